"""Finite-difference gradient verification.

The oracle is a central difference evaluated by re-running the loss
closure; it never touches the reverse-mode machinery, so the two paths
stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CoordinateCheck:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckResult:
    passed: bool
    tol: float
    n_checked: int
    max_rel_err: float
    worst: CoordinateCheck
    failures: list = field(default_factory=list)

    def __str__(self):
        w = self.worst
        status = "ok" if self.passed else "FAIL"
        return (f"grad_check {status}: {self.n_checked} coords, max rel err "
                f"{self.max_rel_err:.3e} (tol {self.tol:.1e}) at {w.param}{list(w.index)} "
                f"analytic={w.analytic:.6e} numeric={w.numeric:.6e}")


def grad_check(loss_fn, named_params, n_samples=120, h=1e-3, tol=1e-3, rng=None):
    """Compare reverse-mode grads of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph on every call (a closure over the
    parameters).  Parameters have to be float64; central differences at
    ``h=1e-3`` are meaningless in single precision.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, '{name}' is {p.dtype}")
    rng = rng or np.random.default_rng(0)

    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named_params}

    sizes = np.array([p.size for _, p in named_params])
    total = int(sizes.sum())
    n = min(n_samples, total)
    flat_choice = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)

    checks = []
    for flat in flat_choice:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        name, p = named_params[pi]
        offset = int(flat - (bounds[pi - 1] if pi else 0))
        index = np.unravel_index(offset, p.data.shape)
        orig = p.data[index]
        p.data[index] = orig + h
        f_plus = loss_fn().item()
        p.data[index] = orig - h
        f_minus = loss_fn().item()
        p.data[index] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name][index])
        rel = abs(a - numeric) / max(1.0, abs(numeric))
        checks.append(CoordinateCheck(name, tuple(int(i) for i in index), a, numeric, rel))

    worst = max(checks, key=lambda c: c.rel_err)
    failures = [c for c in checks if c.rel_err > tol]
    return GradCheckResult(passed=not failures, tol=tol, n_checked=len(checks),
                           max_rel_err=worst.rel_err, worst=worst, failures=failures)
