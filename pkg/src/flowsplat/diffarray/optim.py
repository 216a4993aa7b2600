"""Adaptive-moment optimizer with linear warmup, and EMA weight shadowing."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class OptimizerError(RuntimeError):
    pass


class Adam:
    """Adam over a list of ``(name, DiffArray)`` parameters.

    The effective learning rate ramps linearly from ``base/warmup_steps``
    to ``base`` over the first ``warmup_steps`` steps and stays at ``base``
    afterwards.  A non-finite gradient aborts the whole step, naming the
    offending parameter; a missing gradient counts as zero and leaves the
    parameter untouched.
    """

    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8, warmup_steps=0):
        self.named_params = list(named_params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.warmup_steps = int(warmup_steps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    @property
    def effective_lr(self):
        if self.warmup_steps > 0 and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def step(self):
        for name, p in self.named_params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"non-finite gradient for parameter '{name}'")
        lr = self.effective_lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p), m, v in zip(self.named_params, self._m, self._v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype, copy=False)
        return lr

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


class EmaShadow:
    """Exponential moving average of a parameter set.

    Shadows are kept in float64 so long averaging runs stay accurate; they
    are cast back to the parameter dtype when swapped in.
    """

    def __init__(self, named_params, decay=0.999):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0,1), got {decay}")
        self.decay = float(decay)
        self.shadow = {name: p.data.astype(np.float64) for name, p in named_params}

    def update(self, named_params):
        named_params = list(named_params)
        names = [n for n, _ in named_params]
        if set(names) != set(self.shadow):
            missing = set(self.shadow) ^ set(names)
            raise ValueError(f"EMA update with misaligned parameter set: {sorted(missing)}")
        d = self.decay
        for name, p in named_params:
            s = self.shadow[name]
            if s.shape != p.data.shape:
                raise ValueError(f"EMA shadow shape mismatch for '{name}': {s.shape} vs {p.data.shape}")
            # promote before multiplying; float32 * python-float stays float32
            self.shadow[name] = d * s + (1.0 - d) * p.data.astype(np.float64)

    @contextmanager
    def applied(self, named_params):
        """Temporarily replace parameter values with their shadows."""
        named_params = list(named_params)
        saved = [(p, p.data) for _, p in named_params]
        try:
            for name, p in named_params:
                p.data = self.shadow[name].astype(p.data.dtype)
            yield
        finally:
            for p, data in saved:
                p.data = data

    def state_items(self, prefix="ema/"):
        return [(prefix + name, value) for name, value in self.shadow.items()]

    def load_state_items(self, items, prefix="ema/"):
        for name, value in items:
            if name.startswith(prefix):
                self.shadow[name[len(prefix):]] = np.asarray(value, dtype=np.float64)
