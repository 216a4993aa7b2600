"""Detail latent encoder, condition encoder and scale-aware fusion decoder.

The detail encoder compresses the high-frequency gap between an HR image
and its upsampled LR observation into a small variational latent.  The
condition encoder sees only the LR side and guides generation.  The
fusion decoder expands a latent back up, merges it with LR features and
emits the feature field consumed by the splat renderer, modulated by a
sinusoidal embedding of the target scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffarray as da
from .nn import Conv2d, ConvTranspose2d, Linear, Module, ScaleShift, sin_embedding

SCALE_EMB_DIM = 16


@dataclass
class DetailLatent:
    """Variational latent: posterior maps plus the value in use."""

    mean: da.DiffArray
    log_var: da.DiffArray
    value: da.DiffArray


def _stage_count(downsample):
    n = int(round(math.log2(downsample)))
    if 2 ** n != downsample or n < 1:
        raise ValueError(f"downsample factor must be a power of two >= 2, got {downsample}")
    return n


class _ConvStack(Module):
    """(conv, relu, stride-2 conv, relu) pyramid shared by both encoders."""

    def __init__(self, c_in, widths, rng, dtype):
        self.blocks = []
        prev = c_in
        for width in widths:
            self.blocks.append(Conv2d(prev, width, rng, stride=1, dtype=dtype))
            self.blocks.append(Conv2d(width, width, rng, stride=2, dtype=dtype))
            prev = width

    def forward(self, x):
        h = x
        for conv in self.blocks:
            h = da.relu(conv(h))
        return h


class DetailEncoder(Module):
    """Variational encoder of the HR / upsampled-LR concatenation."""

    def __init__(self, in_channels=3, latent_channels=8, downsample=8,
                 widths=(32, 64, 128), rng=None, dtype=np.float32):
        n = _stage_count(downsample)
        if len(widths) < n:
            raise ValueError(f"need {n} stage widths for downsample {downsample}, got {widths}")
        self.latent_channels = latent_channels
        self.downsample = downsample
        self.stack = _ConvStack(2 * in_channels, widths[:n], rng, dtype)
        self.head = Conv2d(widths[n - 1], 2 * latent_channels, rng, gain=1.0, dtype=dtype)

    def forward(self, hr, lr_up):
        hr, lr_up = da.asdiff(hr), da.asdiff(lr_up)
        if hr.shape != lr_up.shape:
            raise da.ShapeError(f"detail encoder: hr {hr.shape} vs lr_up {lr_up.shape}")
        h = self.stack(da.concat([hr, lr_up], axis=3))
        stats = self.head(h)
        c = self.latent_channels
        return stats[:, :, :, :c], stats[:, :, :, c:]

    def encode(self, hr, lr_up, rng=None):
        """Posterior; the value is a reparametrized sample when ``rng`` is given,
        otherwise the posterior mean (deterministic evaluation)."""
        mean, log_var = self.forward(hr, lr_up)
        if rng is None:
            return DetailLatent(mean=mean, log_var=log_var, value=mean)
        eps = da.DiffArray(rng.standard_normal(mean.shape).astype(mean.dtype))
        value = mean + da.exp(0.5 * log_var) * eps
        return DetailLatent(mean=mean, log_var=log_var, value=value)


class ConditionEncoder(Module):
    """Same pyramid as the detail encoder, LR-only input, deterministic output."""

    def __init__(self, in_channels=3, latent_channels=8, downsample=8,
                 widths=(32, 64, 128), rng=None, dtype=np.float32):
        n = _stage_count(downsample)
        self.stack = _ConvStack(in_channels, widths[:n], rng, dtype)
        self.head = Conv2d(widths[n - 1], latent_channels, rng, gain=1.0, dtype=dtype)

    def forward(self, lr_up):
        return self.head(self.stack(da.asdiff(lr_up)))


def kl_divergence(mean, log_var):
    """Mean per-coordinate KL from N(mean, exp(log_var)) to the unit Gaussian."""
    mean, log_var = da.asdiff(mean), da.asdiff(log_var)
    return 0.5 * da.mean_(mean * mean + da.exp(log_var) - 1.0 - log_var)


def target_grid(scale, lr_h, lr_w):
    """Output grid for upscaling an (lr_h, lr_w) image by ``scale`` (ceil)."""
    return (int(math.ceil(scale * lr_h - 1e-9)), int(math.ceil(scale * lr_w - 1e-9)))


class FusionDecoder(Module):
    """Latent + LR features -> scale-modulated feature field on the target grid."""

    def __init__(self, latent_channels=8, in_channels=3, field_channels=16,
                 downsample=8, width=32, rng=None, dtype=np.float32):
        n = _stage_count(downsample)
        self.field_channels = field_channels
        self.lat_in = Conv2d(latent_channels, width, rng, dtype=dtype)
        self.lat_up = [ConvTranspose2d(width, width, rng, stride=2, dtype=dtype) for _ in range(n)]
        self.lr_conv1 = Conv2d(in_channels, width, rng, dtype=dtype)
        self.lr_conv2 = Conv2d(width, width, rng, dtype=dtype)
        self.merge = Conv2d(2 * width, field_channels, rng, dtype=dtype)
        self.scale_mlp = Linear(SCALE_EMB_DIM, SCALE_EMB_DIM, rng, dtype=dtype)
        # scale modulation at every fusion stage; one checkpoint must serve
        # the whole continuous scale range, so the embedding has to steer
        # both branches and the refinement, not just the final blocks
        self.lr_film = ScaleShift(SCALE_EMB_DIM, width, rng, dtype=dtype)
        self.merge_film = ScaleShift(SCALE_EMB_DIM, field_channels, rng, dtype=dtype)
        self.res_conv = []
        self.res_film = []
        for _ in range(2):
            self.res_conv.append(Conv2d(field_channels, field_channels, rng, dtype=dtype))
            self.res_conv.append(Conv2d(field_channels, field_channels, rng, gain=0.5, dtype=dtype))
            self.res_film.append(ScaleShift(SCALE_EMB_DIM, field_channels, rng, dtype=dtype))

    def forward(self, latent_value, lr, scale, out_hw=None):
        latent_value = da.asdiff(latent_value)
        lr = da.asdiff(lr)
        lr_h, lr_w = lr.shape[1], lr.shape[2]
        if out_hw is None:
            out_hw = target_grid(scale, lr_h, lr_w)
        b = latent_value.shape[0]
        emb = sin_embedding(np.full(b, float(scale)), SCALE_EMB_DIM, dtype=str(latent_value.dtype))
        emb = da.relu(self.scale_mlp(emb))

        # expand the latent only until it covers the LR grid; later stages
        # stay idle for large scale factors (their weights are still part
        # of the single checkpoint)
        h = da.relu(self.lat_in(latent_value))
        for up in self.lat_up:
            if h.shape[1] >= lr_h and h.shape[2] >= lr_w:
                break
            h = da.relu(up(h))
        h = da.resize_bilinear(h, (lr_h, lr_w))

        g = da.relu(self.lr_conv1(lr))
        g = da.relu(self.lr_film(self.lr_conv2(g), emb))

        field = da.relu(self.merge_film(self.merge(da.concat([h, g], axis=3)), emb))
        field = da.resize_bilinear(field, out_hw)
        for i in range(2):
            r = da.relu(self.res_film[i](self.res_conv[2 * i](field), emb))
            r = self.res_conv[2 * i + 1](r)
            field = field + r
        return field
