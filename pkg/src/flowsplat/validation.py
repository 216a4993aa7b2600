"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

import numpy as np


def check_image(img, name="image"):
    """Coerce to a float32 (H, W, C) array in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected (H, W, C) or (H, W), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: empty spatial extent {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError(f"{name}: values must lie in [0, 1], got range "
                         f"[{arr.min():.4f}, {arr.max():.4f}]")
    return np.ascontiguousarray(np.clip(arr, 0.0, 1.0))


def check_image_batch(images, channels=None, name="X"):
    """Validate a list/array of images; returns a list of (H, W, C) float32."""
    if isinstance(images, np.ndarray) and images.ndim in (3, 4):
        images = list(images) if images.ndim == 4 else [images]
    out = []
    for i, img in enumerate(images):
        arr = check_image(img, name=f"{name}[{i}]")
        if channels is not None and arr.shape[2] != channels:
            raise ValueError(f"{name}[{i}]: expected {channels} channels, got {arr.shape[2]}")
        out.append(arr)
    if not out:
        raise ValueError(f"{name}: empty image collection")
    return out


def check_scale(scale, lo=1.0, name="scale"):
    s = float(scale)
    if not np.isfinite(s) or s < lo:
        raise ValueError(f"{name}: must be a finite number >= {lo}, got {scale}")
    return s
