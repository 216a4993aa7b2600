"""Tiny layer library on top of the differentiable array core."""

from __future__ import annotations

import numpy as np

from . import diffarray as da


class Module:
    """Base with recursive parameter discovery over instance attributes."""

    def named_params(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, da.DiffArray) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(f"{prefix}{key}/"))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{prefix}{key}.{i}/"))
                    elif isinstance(item, da.DiffArray) and item.requires_grad:
                        out.append((f"{prefix}{key}.{i}", item))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_params())
        missing = set(own) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad = None

    def param_checksum(self):
        return float(sum(np.abs(p.data).sum() for _, p in self.named_params()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng, shape, fan_in, gain, dtype):
    return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, gain=np.sqrt(2.0), dtype=np.float32):
        self.w = da.parameter(_he(rng, (n_in, n_out), n_in, gain, dtype))
        self.b = da.parameter(np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return da.add(da.matmul(x, self.w), self.b)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, gain=np.sqrt(2.0), dtype=np.float32):
        self.stride = stride
        self.w = da.parameter(_he(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, gain, dtype))
        self.b = da.parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return da.conv2d(x, self.w, self.b, stride=self.stride)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, stride=2, gain=np.sqrt(2.0), dtype=np.float32):
        self.stride = stride
        self.w = da.parameter(_he(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, gain, dtype))
        self.b = da.parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x, out_hw=None):
        return da.conv2d_transpose(x, self.w, self.b, stride=self.stride, out_hw=out_hw)


class ScaleShift(Module):
    """Per-channel affine modulation (FiLM-style) driven by an embedding."""

    def __init__(self, emb_dim, channels, rng, dtype=np.float32):
        self.channels = channels
        self.lin = Linear(emb_dim, 2 * channels, rng, gain=0.1, dtype=dtype)

    def forward(self, x, emb):
        ss = self.lin(emb)  # (B, 2C)
        b = ss.shape[0]
        scale = da.reshape(ss[:, : self.channels], (b, 1, 1, self.channels))
        shift = da.reshape(ss[:, self.channels:], (b, 1, 1, self.channels))
        return da.add(da.mul(x, da.add(scale, 1.0)), shift)


def sin_embedding(values, dim, max_freq=512.0, dtype=np.float32):
    """Sinusoidal features of scalar inputs; (B,) -> (B, dim) constant array."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = values[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return da.DiffArray(emb.astype(dtype))
