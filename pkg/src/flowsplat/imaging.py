"""Image I/O, bicubic resampling, online degradation, augmentation and
procedural dataset synthesis.

Images are float arrays of shape (H, W, C) with values in [0, 1].  The
resampler is Catmull-Rom bicubic (a = -0.5) with half-pixel-centre
coordinate mapping ``src = (dst + 0.5) * in/out - 0.5`` and edge clamping.
Weight tables are built mirror-symmetrically and taps are accumulated in
a symmetric pairing, so resampling commutes bitwise with flips.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

BICUBIC_A = -0.5


def cubic_kernel(d, a=BICUBIC_A):
    """Keys cubic kernel at |distance| ``d``."""
    d = np.abs(np.asarray(d, dtype=np.float64))
    near = ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
    far = ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a
    return np.where(d < 1.0, near, np.where(d < 2.0, far, 0.0))


@functools.lru_cache(maxsize=512)
def _bicubic_table(n_in, n_out):
    """Per-output-index 4-tap weights and start indices, mirror-symmetric."""
    weights = np.empty((n_out, 4), dtype=np.float64)
    starts = np.empty(n_out, dtype=np.int64)
    for j in range((n_out + 1) // 2):
        src = (j + 0.5) * (n_in / n_out) - 0.5
        fl = math.floor(src)
        f = src - fl
        weights[j] = cubic_kernel(np.array([1.0 + f, f, 1.0 - f, 2.0 - f]))
        starts[j] = fl - 1
        jm = n_out - 1 - j
        weights[jm] = weights[j][::-1]
        starts[jm] = n_in - 4 - starts[j]
    taps = np.clip(starts[:, None] + np.arange(4)[None, :], 0, n_in - 1)
    return weights, taps


def _resample_axis0(img, n_out):
    """Apply the 4-tap bicubic filter along axis 0 (symmetric pairing)."""
    n_in = img.shape[0]
    weights, taps = _bicubic_table(n_in, n_out)
    w = weights.astype(img.dtype)
    shape = (n_out,) + (1,) * (img.ndim - 1)
    t0, t1, t2, t3 = (img[taps[:, k]] for k in range(4))
    w0, w1, w2, w3 = (w[:, k].reshape(shape) for k in range(4))
    return (w0 * t0 + w3 * t3) + (w1 * t1 + w2 * t2)


def bicubic_resize(img, out_h, out_w):
    """Catmull-Rom bicubic resize, output clamped to [0, 1]."""
    img = np.asarray(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bicubic_resize: target size {out_h}x{out_w} must be >= 1")
    out = _resample_axis0(img, out_h)
    out = _resample_axis0(out.swapaxes(0, 1), out_w).swapaxes(0, 1)
    return np.clip(out, 0.0, 1.0)


@dataclass
class ImagePair:
    """HR image with its degraded observation at scale ``scale``."""

    hr: np.ndarray
    lr: np.ndarray
    lr_up: np.ndarray
    scale: float
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0

    def transform_record(self):
        return {"hflip": self.hflip, "vflip": self.vflip, "rot90": self.rot90}


def degrade(hr, scale):
    """Bicubic-downsample ``hr`` by ``scale`` and re-upsample to the HR grid."""
    hr = np.asarray(hr)
    if scale < 1.0:
        raise ValueError(f"degrade: scale must be >= 1, got {scale}")
    h, w = hr.shape[:2]
    lh, lw = int(h // scale), int(w // scale)
    if lh < 8 or lw < 8:
        raise ValueError(f"degrade: LR grid {lh}x{lw} too small (< 8) for scale {scale}")
    if scale == 1.0:
        return ImagePair(hr=hr, lr=hr.copy(), lr_up=hr.copy(), scale=1.0)
    lr = bicubic_resize(hr, lh, lw)
    lr_up = bicubic_resize(lr, h, w)
    return ImagePair(hr=hr, lr=lr, lr_up=lr_up, scale=float(scale))


def sample_scale(rng, lo=1.0, hi=8.0):
    """One scale draw, shared by every item of the mini-batch."""
    return float(rng.uniform(lo, hi))


def apply_transform(img, hflip=False, vflip=False, rot90=0):
    out = img
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    if rot90 % 4:
        out = np.rot90(out, k=rot90 % 4, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment(pair, rng, allow_rotation=True):
    """Random flips and 90-degree rotation, applied to hr/lr/lr_up alike."""
    if allow_rotation and pair.hr.shape[0] != pair.hr.shape[1]:
        raise ValueError("augment: 90-degree rotation needs square images, "
                         f"got {pair.hr.shape[0]}x{pair.hr.shape[1]}")
    hflip = bool(rng.integers(2))
    vflip = bool(rng.integers(2))
    rot = int(rng.integers(4)) if allow_rotation else 0
    return ImagePair(
        hr=apply_transform(pair.hr, hflip, vflip, rot),
        lr=apply_transform(pair.lr, hflip, vflip, rot),
        lr_up=apply_transform(pair.lr_up, hflip, vflip, rot),
        scale=pair.scale,
        hflip=hflip, vflip=vflip, rot90=rot,
    )


# -- procedural dataset -------------------------------------------------------

def _polygon_mask(size, rng):
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    n = int(rng.integers(3, 7))
    radius = rng.uniform(0.08, 0.3) * size
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    pts = np.stack([cy + radius * np.sin(angles), cx + radius * np.cos(angles)], axis=1)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.ones((size, size), dtype=bool)
    for i in range(n):
        y1, x1 = pts[i]
        y2, x2 = pts[(i + 1) % n]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        mask &= cross >= 0
    return mask


def _band_noise(size, rng, lo=0.10, hi=0.45):
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    rad = np.sqrt(fy * fy + fx * fx)
    keep = (rad >= lo) & (rad <= hi)
    shaped = np.fft.ifft2(np.fft.fft2(white) * keep).real
    denom = shaped.std()
    return shaped / denom if denom > 0 else shaped


def synth_image(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    base = rng.uniform(0.25, 0.75, 3)
    tilt = rng.uniform(-0.3, 0.3, (2, 3))
    img += base[None, None, :] + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]

    # oriented gratings; at least one above a quarter of the sample rate so a
    # 2x down/up round trip provably loses energy
    n_gratings = int(rng.integers(2, 4))
    freqs = rng.uniform(0.06, 0.42, n_gratings)
    freqs[0] = rng.uniform(0.28, 0.42)
    for f_cpp in freqs:
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.08, 0.22)
        carrier = np.sin(2 * np.pi * f_cpp * size * (yy * np.sin(theta) + xx * np.cos(theta)) + phase)
        img += amp * carrier[..., None] * rng.uniform(0.4, 1.0, 3)[None, None, :]

    for _ in range(int(rng.integers(1, 4))):
        mask = _polygon_mask(size, rng)
        color = rng.uniform(0, 1, 3)
        alpha = rng.uniform(0.5, 0.95)
        img = np.where(mask[..., None], (1 - alpha) * img + alpha * color, img)

    img += 0.05 * _band_noise(size, rng)[..., None]
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(seed, count, size):
    """Deterministic procedural images with recoverable high-frequency detail."""
    if size < 32:
        raise ValueError(f"synth_dataset: size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    return [synth_image(rng, size) for _ in range(count)]


# -- PNG I/O -------------------------------------------------------------------

def load_png(path):
    """Load an 8/16-bit RGB or grayscale PNG as float (H, W, 3) in [0, 1]."""
    try:
        pil = PILImage.open(path)
    except FileNotFoundError:
        raise FileNotFoundError(f"load_png: no such file: {path}") from None
    except Exception as err:
        raise OSError(f"load_png: unreadable image {path}: {err}") from None
    with pil:
        mode = pil.mode
        if mode in ("I;16", "I"):
            arr = np.asarray(pil, dtype=np.float32) / 65535.0
        elif mode in ("L", "LA", "RGB", "RGBA"):
            if mode in ("LA", "RGBA"):
                pil = pil.convert(mode[:-1])
            arr = np.asarray(pil, dtype=np.float32) / np.float32(255.0)
        else:
            raise OSError(f"load_png: unsupported mode '{mode}' in {path}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.clip(arr, 0.0, 1.0)


def save_png(path, img):
    """Write a [0, 1] float image as 8-bit PNG (grayscale stays single channel)."""
    arr = np.asarray(img)
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    PILImage.fromarray(q).save(path, format="PNG")


def write_manifest(path, image_paths):
    with open(path, "w") as f:
        for p in image_paths:
            f.write(f"{p}\n")


def read_manifest(path):
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]
