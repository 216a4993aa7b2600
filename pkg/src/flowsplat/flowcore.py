"""Conditional flow matching with shortcut consistency.

A velocity network is trained to transport unit Gaussian noise to detail
latents along straight paths.  Besides the standard velocity-regression
objective, a quarter of every batch receives a self-consistency target:
the velocity predicted for one large step (2 * dt) must match the average
velocity of two chained small steps (dt) evaluated with EMA weights.
That pressure towards locally linear transport is what makes single-step
sampling viable.
"""

from __future__ import annotations

import numpy as np

from . import diffarray as da
from .nn import Conv2d, Linear, Module, ScaleShift, sin_embedding

TIME_EMB_DIM = 32
DYADIC_MAX_LEVEL = 7  # smallest consistency level; its target step snaps to 0
STEP_SNAP_TO_ZERO = 2.0 ** (-DYADIC_MAX_LEVEL)


class VelocityNet(Module):
    """Compact conv encoder-decoder with skips; conditioned on (t, dt, c).

    Time and step size enter as sinusoidal embeddings through per-stage
    channel modulation; the condition map is concatenated at input
    resolution.  Output shape always equals the state shape.
    """

    def __init__(self, latent_channels, cond_channels=None, widths=(32, 64),
                 rng=None, dtype=np.float32):
        cond_channels = latent_channels if cond_channels is None else cond_channels
        w0, w1 = widths
        self.eval_count = 0
        self.emb_mlp = Linear(2 * TIME_EMB_DIM, TIME_EMB_DIM, rng, dtype=dtype)
        self.in_conv = Conv2d(latent_channels + cond_channels, w0, rng, dtype=dtype)
        self.in_film = ScaleShift(TIME_EMB_DIM, w0, rng, dtype=dtype)
        self.enc_conv = Conv2d(w0, w0, rng, dtype=dtype)
        self.enc_film = ScaleShift(TIME_EMB_DIM, w0, rng, dtype=dtype)
        self.down = Conv2d(w0, w1, rng, stride=2, dtype=dtype)
        self.mid_conv = Conv2d(w1, w1, rng, dtype=dtype)
        self.mid_film = ScaleShift(TIME_EMB_DIM, w1, rng, dtype=dtype)
        self.up_conv = Conv2d(w1 + w0, w0, rng, dtype=dtype)
        self.up_film = ScaleShift(TIME_EMB_DIM, w0, rng, dtype=dtype)
        self.out_conv = Conv2d(w0, latent_channels, rng, gain=0.2, dtype=dtype)

    def _embedding(self, time, step, batch, dtype):
        t = np.broadcast_to(np.asarray(time, dtype=np.float64), (batch,))
        s = np.broadcast_to(np.asarray(step, dtype=np.float64), (batch,))
        emb = da.concat([sin_embedding(t, TIME_EMB_DIM, dtype=dtype),
                         sin_embedding(s, TIME_EMB_DIM, dtype=dtype)], axis=1)
        return da.relu(self.emb_mlp(emb))

    def forward(self, state, time, cond, step=0.0):
        state = da.asdiff(state)
        cond = da.asdiff(cond)
        if cond.shape[:3] != state.shape[:3]:
            raise da.ShapeError(f"velocity net: condition {cond.shape} does not match state {state.shape}")
        self.eval_count += 1
        emb = self._embedding(time, step, state.shape[0], state.dtype)
        h = da.relu(self.in_film(self.in_conv(da.concat([state, cond], axis=3)), emb))
        skip = da.relu(self.enc_film(self.enc_conv(h), emb))
        h = da.relu(self.down(skip))
        h = da.relu(self.mid_film(self.mid_conv(h), emb))
        h = da.resize_nearest(h, (skip.shape[1], skip.shape[2]))
        h = da.relu(self.up_film(self.up_conv(da.concat([h, skip], axis=3)), emb))
        return self.out_conv(h)


def sample_path(source, target, t):
    """Linear path point (1 - t) * source + t * target; t in [0, 1]."""
    source, target = da.asdiff(source), da.asdiff(target)
    if source.shape != target.shape:
        raise da.ShapeError(f"sample_path: endpoint shapes differ: {source.shape} vs {target.shape}")
    tarr = np.asarray(t, dtype=np.float64)
    if np.any(tarr < 0.0) or np.any(tarr > 1.0):
        raise ValueError(f"sample_path: t must lie in [0, 1], got {t}")
    tb = _per_sample(tarr, source)
    return (1.0 - tb) * source + tb * target


def _per_sample(values, like):
    """Broadcast per-sample scalars over the trailing axes of ``like``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    shape = (like.shape[0],) + (1,) * (like.ndim - 1)
    return da.DiffArray(arr.reshape(shape).astype(like.dtype))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr.data)):
        raise FloatingPointError(f"{what} is not finite")


def fm_loss(net, source, target, t, cond):
    """Velocity regression: mean squared error against (target - source)."""
    state = sample_path(source, target, t)
    vel = net(state, t, cond, step=0.0)
    _check_finite(vel, "velocity network output")
    diff = vel - (da.asdiff(target) - da.asdiff(source))
    return da.mean_(diff * diff)


def shortcut_targets(net, shadow, state, t, cond, step):
    """Average velocity over two chained short steps, from EMA weights.

    ``t`` and ``step`` are scalars or per-sample (B,) arrays.  Detached:
    evaluated under ``no_grad`` with shadow parameters swapped in, so no
    gradient can reach either the live or the EMA weights.
    """
    tarr = np.asarray(t, dtype=np.float64)
    sarr = np.asarray(step, dtype=np.float64)
    if np.any(tarr + 2.0 * sarr > 1.0 + 1e-9):
        raise ValueError(f"shortcut step exceeds horizon: t={t}, dt={step}")
    # the smallest level's target is evaluated as an instantaneous velocity
    # (step 0), anchoring the dyadic consistency tower to the plain
    # velocity-regression behaviour instead of letting it float free
    eval_step = np.where(sarr < STEP_SNAP_TO_ZERO + 1e-12, 0.0, sarr)
    state = da.asdiff(state)
    with da.no_grad(), shadow.applied(net.named_params()):
        start = state.detach()
        v1 = net(start, tarr, cond, step=eval_step)
        mid = start + _per_sample(sarr, start) * v1
        v2 = net(mid, tarr + sarr, cond, step=eval_step)
        avg = 0.5 * (v1 + v2)
    return da.DiffArray(avg.data)


def shortcut_loss(net, shadow, state, t, cond, step):
    """Consistency of the 2*dt prediction with the two-step average velocity."""
    target = shortcut_targets(net, shadow, state, t, cond, step)
    vel = net(state, t, cond, step=2.0 * step)
    _check_finite(vel, "velocity network output")
    diff = vel - target
    return da.mean_(diff * diff)


def draw_shortcut_times(rng, max_level=DYADIC_MAX_LEVEL):
    """One (t, dt) draw: dt from the dyadic set, t on the 2*dt grid."""
    level = int(rng.integers(1, max_level + 1))
    step = 2.0 ** (-level)
    slot = int(rng.integers(0, 2 ** (level - 1)))
    return 2.0 * step * slot, step


def batch_objective(net, shadow, sources, targets, cond, rng):
    """Quarter-split objective over one batch.

    Exactly ``B // 4`` samples take the shortcut consistency loss (dyadic
    t, dt), the rest the plain velocity regression loss; returns the
    batch-mean loss plus a report with the per-branch components.
    """
    sources, targets, cond = da.asdiff(sources), da.asdiff(targets), da.asdiff(cond)
    b = sources.shape[0]
    n_shortcut = b // 4 if b >= 4 else 0
    perm = rng.permutation(b)
    sc_idx = np.sort(perm[:n_shortcut])
    fm_idx = np.sort(perm[n_shortcut:])

    t_all = np.empty(b)
    step_all = np.zeros(b)
    for i in sc_idx:
        t_all[i], step_all[i] = draw_shortcut_times(rng)
    t_all[fm_idx] = rng.uniform(0.0, 1.0, fm_idx.size)

    state = sample_path(sources, targets, t_all)
    target_vel = (targets - sources).data.copy()
    if n_shortcut:
        sc_state = da.DiffArray(state.data[sc_idx])
        sc_cond = da.DiffArray(cond.data[sc_idx])
        sc_target = shortcut_targets(net, shadow, sc_state, t_all[sc_idx], sc_cond, step_all[sc_idx])
        target_vel[sc_idx] = sc_target.data
    # query step is 2*dt on the shortcut branch, 0 on the plain branch
    vel = net(state, t_all, cond, step=2.0 * step_all)
    _check_finite(vel, "velocity network output")
    diff = vel - da.DiffArray(target_vel)
    per_sample = da.mean_(diff * diff, axis=(1, 2, 3))
    loss = da.mean_(per_sample)

    report = {
        "n_shortcut": int(n_shortcut),
        "n_fm": int(b - n_shortcut),
        "small_batch_warning": b < 4,
        "fm": float(per_sample.data[fm_idx].mean()) if fm_idx.size else 0.0,
        "shortcut": float(per_sample.data[sc_idx].mean()) if sc_idx.size else 0.0,
    }
    return loss, report


def euler_sample(net, source, cond, n_steps):
    """Integrate the learned flow with ``n_steps`` uniform Euler steps."""
    if n_steps < 1:
        raise ValueError(f"euler_sample: n_steps must be >= 1, got {n_steps}")
    step = 1.0 / n_steps
    z = da.asdiff(source)
    cond = da.asdiff(cond)
    for k in range(n_steps):
        vel = net(z, k * step, cond, step=step)
        z = z + step * vel
        if not np.all(np.isfinite(z.data)):
            raise FloatingPointError(f"euler_sample: non-finite state after step {k + 1}/{n_steps}")
    return z


def one_step_sample(net, source, cond):
    """Single Euler step across the whole horizon (one network evaluation)."""
    return euler_sample(net, source, cond, n_steps=1)
