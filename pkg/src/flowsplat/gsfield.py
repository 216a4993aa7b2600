"""Continuous-scale Gaussian splat rendering.

A learnable bank of 2D Gaussian kernel candidates (anisotropic covariance
plus opacity) is shared across all spatial locations of a feature field.
Each location predicts soft assignment weights over the bank, mixes a
per-location kernel/opacity, and splats its opacity-modulated feature
into every query inside a Chebyshev window.  A residual head maps the
aggregated features to residual pixels.

``render_bruteforce`` is the dense reference: a plain-numpy, float64,
unwindowed sum over every primitive for every query.  It exists purely
to cross-check the windowed fast path.
"""

from __future__ import annotations

import numpy as np

from . import diffarray as da
from .nn import Conv2d, Linear, Module

LOG_TWO_PI = float(np.log(2.0 * np.pi))


class SingularCovarianceError(ValueError):
    pass


class GaussianBank(Module):
    """K kernel candidates: (log sigma_x, log sigma_y, rotation, opacity logit).

    The realized covariance R(theta) diag(sx^2, sy^2) R(theta)^T is SPD for
    any parameter values; realized opacity is sigmoid(logit) in (0, 1).
    """

    def __init__(self, count, rng, sigma_range=(0.3, 1.5), dtype=np.float32):
        lo, hi = np.log(sigma_range[0]), np.log(sigma_range[1])
        self.count = count
        self.log_sigma_x = da.parameter(rng.uniform(lo, hi, count).astype(dtype))
        self.log_sigma_y = da.parameter(rng.uniform(lo, hi, count).astype(dtype))
        self.rotation = da.parameter(rng.uniform(0.0, np.pi, count).astype(dtype))
        self.opacity_logit = da.parameter(np.zeros(count, dtype=dtype))

    def cov_components(self):
        """Candidate covariances as a (K, 3) array of (a, b, d) entries."""
        sx2 = da.exp(2.0 * self.log_sigma_x)
        sy2 = da.exp(2.0 * self.log_sigma_y)
        cos = _cos(self.rotation)
        sin = _sin(self.rotation)
        a = cos * cos * sx2 + sin * sin * sy2
        d = sin * sin * sx2 + cos * cos * sy2
        b = cos * sin * (sx2 - sy2)
        k = self.count
        return da.concat([da.reshape(a, (k, 1)), da.reshape(b, (k, 1)), da.reshape(d, (k, 1))], axis=1)

    def opacities(self):
        return da.sigmoid(self.opacity_logit)

    def clamp_sigma(self, lo, hi):
        """Project log-scales into [log lo, log hi] (training stabilizer)."""
        for p in (self.log_sigma_x, self.log_sigma_y):
            p.data = np.clip(p.data, np.log(lo), np.log(hi))

    def covariance_matrices(self):
        """Realized candidate covariances as a (K, 2, 2) numpy array."""
        comp = self.cov_components().data
        out = np.empty((self.count, 2, 2), dtype=comp.dtype)
        out[:, 0, 0] = comp[:, 0]
        out[:, 0, 1] = out[:, 1, 0] = comp[:, 1]
        out[:, 1, 1] = comp[:, 2]
        return out


def _cos(x):
    data = np.cos(x.data)

    def backward(g):
        da.accumulate_grad(x, -g * np.sin(x.data))

    return da.make_node(data, (x,), backward)


def _sin(x):
    data = np.sin(x.data)

    def backward(g):
        da.accumulate_grad(x, g * np.cos(x.data))

    return da.make_node(data, (x,), backward)


class AssignmentHead(Module):
    """Single linear layer from field channels to bank logits."""

    def __init__(self, channels, count, rng, dtype=np.float32):
        self.lin = Linear(channels, count, rng, gain=1.0, dtype=dtype)

    def forward(self, flat_features):
        return self.lin(flat_features)


class ResidualHead(Module):
    """Two-layer per-location MLP from aggregated features to residual pixels."""

    def __init__(self, channels, out_channels, rng, dtype=np.float32):
        self.lin1 = Linear(channels, channels, rng, dtype=dtype)
        self.lin2 = Linear(channels, out_channels, rng, gain=0.5, dtype=dtype)

    def forward(self, flat_features):
        return self.lin2(da.relu(self.lin1(flat_features)))


def assignment_weights(features, head):
    """Softmax assignment over the bank; rows sum to one.

    ``features`` may be (N, C) or (B, H, W, C); the output keeps the
    leading layout with a trailing bank axis.
    """
    feats = da.asdiff(features)
    lead = feats.shape[:-1]
    flat = da.reshape(feats, (-1, feats.shape[-1]))
    logits = head(flat)
    pi = da.softmax(logits, axis=-1)
    return da.reshape(pi, lead + (logits.shape[-1],))


def mix_kernels(pi, bank):
    """Convex mixture of candidate covariances/opacities under weights ``pi``.

    Returns ``(cov_components, opacity)`` with shapes (..., 3) and (..., 1).
    """
    pi = da.asdiff(pi)
    lead = pi.shape[:-1]
    flat = da.reshape(pi, (-1, pi.shape[-1]))
    comps = da.matmul(flat, bank.cov_components())
    op = da.matmul(flat, da.reshape(bank.opacities(), (bank.count, 1)))
    return da.reshape(comps, lead + (3,)), da.reshape(op, lead + (1,))


def gaussian_pdf(query, center, cov):
    """Normalized 2D Gaussian density at ``query``.

    ``cov`` is a 2x2 SPD DiffArray (or array); ``query``/``center`` are
    2-vectors.  Differentiable wrt all three inputs.
    """
    q = da.asdiff(query)
    mu = da.asdiff(center)
    cov = da.asdiff(cov)
    if cov.shape != (2, 2):
        raise da.ShapeError(f"gaussian_pdf: covariance must be 2x2, got {cov.shape}")
    a = cov[0, 0]
    b = 0.5 * (cov[0, 1] + cov[1, 0])
    d = cov[1, 1]
    det = a * d - b * b
    if det.item() < 1e-12:
        raise SingularCovarianceError(f"gaussian_pdf: |cov| = {det.item():.3e} below 1e-12")
    diff = q - mu
    dy, dx = diff[0], diff[1]
    quad = (d * dy * dy - 2.0 * b * dy * dx + a * dx * dx) / det
    return da.exp(-0.5 * quad - 0.5 * da.log(det) - LOG_TWO_PI)


def window_splat(ca, cb, cd, cl, feat, radius):
    """Fused windowed splat-and-aggregate primitive.

    For every query pixel q the output is the sum over primitives p with
    ``chebyshev(p - q) <= radius`` of ``exp(ca_p u^2 + cb_p uv + cd_p v^2
    + cl_p) * feat_p`` where (u, v) = p - q.  Inputs: coefficient maps
    (B, H, W) and features (B, H, W, C); output (B, H, W, C).

    Out-of-bounds primitives are handled by padding the log-response map
    with -inf, so the window arithmetic stays fully vectorized.
    """
    ca, cb, cd, cl, feat = (da.asdiff(x) for x in (ca, cb, cd, cl, feat))
    bsz, h, w = ca.shape
    if feat.shape[:3] != (bsz, h, w):
        raise da.ShapeError(f"window_splat: feature shape {feat.shape} does not match maps {(bsz, h, w)}")
    side = 2 * radius + 1
    dtype = feat.dtype
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    u2 = (offs * offs)[:, None] + np.zeros((1, side))
    uv = offs[:, None] * offs[None, :]
    v2 = u2.T

    def _pad3(x, fill=0.0):
        return np.pad(x, ((0, 0), (radius, radius), (radius, radius)),
                      constant_values=fill)

    # -inf outside the grid: those primitives splat exactly zero response
    ca_p = _pad3(ca.data)
    cb_p = _pad3(cb.data)
    cd_p = _pad3(cd.data)
    cl_p = _pad3(cl.data, fill=-np.inf)
    feat_pad = np.pad(feat.data, ((0, 0), (radius, radius), (radius, radius), (0, 0)))

    # offset-major response store keeps every loop body contiguous
    resp = np.empty((side, side, bsz, h, w), dtype=dtype)
    out = np.zeros(feat.shape, dtype=dtype)
    for i in range(side):
        for j in range(side):
            sl = (slice(None), slice(i, i + h), slice(j, j + w))
            arg = ca_p[sl] * float(u2[i, j]) + cb_p[sl] * float(uv[i, j]) \
                + cd_p[sl] * float(v2[i, j]) + cl_p[sl]
            rij = np.exp(arg, out=arg)
            resp[i, j] = rij
            out += rij[..., None] * feat_pad[:, i:i + h, j:j + w, :]

    def backward(g):
        gfeat_pad = np.zeros_like(feat_pad)
        hp, wp = h + 2 * radius, w + 2 * radius
        gca = np.zeros((bsz, hp, wp), dtype=dtype)
        gcb = np.zeros((bsz, hp, wp), dtype=dtype)
        gcd = np.zeros((bsz, hp, wp), dtype=dtype)
        gcl = np.zeros((bsz, hp, wp), dtype=dtype)
        garg = np.empty((bsz, h, w), dtype=dtype)
        for i in range(side):
            for j in range(side):
                fsl = feat_pad[:, i:i + h, j:j + w, :]
                rij = resp[i, j]
                gfeat_pad[:, i:i + h, j:j + w, :] += rij[..., None] * g
                np.einsum("bhwc,bhwc->bhw", g, fsl, out=garg)
                garg *= rij
                gca[:, i:i + h, j:j + w] += garg * float(u2[i, j])
                gcb[:, i:i + h, j:j + w] += garg * float(uv[i, j])
                gcd[:, i:i + h, j:j + w] += garg * float(v2[i, j])
                gcl[:, i:i + h, j:j + w] += garg
        crop = (slice(None), slice(radius, radius + h), slice(radius, radius + w))
        da.accumulate_grad(ca, gca[crop])
        da.accumulate_grad(cb, gcb[crop])
        da.accumulate_grad(cd, gcd[crop])
        da.accumulate_grad(cl, gcl[crop])
        da.accumulate_grad(feat, gfeat_pad[:, radius:radius + h, radius:radius + w, :])

    return da.make_node(out, (ca, cb, cd, cl, feat), backward)


def _splat_coefficients(field, bank, assign_head):
    """Per-location exponent coefficients and opacity-modulated features."""
    bsz, h, w, c = field.shape
    pi = assignment_weights(field, assign_head)
    comps, op = mix_kernels(pi, bank)
    flat = da.reshape(comps, (-1, 3))
    a, b, d = flat[:, 0], flat[:, 1], flat[:, 2]
    det = a * d - b * b
    ca = da.reshape(-0.5 * (d / det), (bsz, h, w))
    cb = da.reshape(b / det, (bsz, h, w))
    cd = da.reshape(-0.5 * (a / det), (bsz, h, w))
    cl = da.reshape(-0.5 * da.log(det) - LOG_TWO_PI, (bsz, h, w))
    feat = da.mul(op, field)
    return ca, cb, cd, cl, feat


def render_windowed(field, bank, assign_head, residual_head, window=7):
    """Residual image from windowed Gaussian aggregation of ``field``.

    Differentiable wrt field values, bank parameters and both heads.
    """
    if window % 2 == 0:
        raise ValueError(f"render_windowed: window must be odd, got {window}")
    field = da.asdiff(field)
    bsz, h, w, c = field.shape
    ca, cb, cd, cl, feat = _splat_coefficients(field, bank, assign_head)
    agg = window_splat(ca, cb, cd, cl, feat, window // 2)
    flat = da.reshape(agg, (bsz * h * w, c))
    res = residual_head(flat)
    return da.reshape(res, (bsz, h, w, res.shape[-1]))


MAX_BRUTEFORCE_SIDE = 64


def render_bruteforce(field, bank, assign_head, residual_head, origin=(0, 0)):
    """Dense float64 reference renderer (every primitive for every query).

    O(N^2) in pixels, so grids above 64 per side are refused; use it for
    oracle checks only.  ``origin`` shifts primitive centres and queries
    by the same integer offset.
    """
    values = np.asarray(getattr(field, "data", field), dtype=np.float64)
    bsz, h, w, c = values.shape
    if h > MAX_BRUTEFORCE_SIDE or w > MAX_BRUTEFORCE_SIDE:
        raise ValueError(
            f"render_bruteforce: grid {h}x{w} too large; keep both sides <= {MAX_BRUTEFORCE_SIDE}")

    wa = assign_head.lin.w.data.astype(np.float64)
    ba = assign_head.lin.b.data.astype(np.float64)
    comps = bank.cov_components().data.astype(np.float64)
    opac = 1.0 / (1.0 + np.exp(-bank.opacity_logit.data.astype(np.float64)))

    oy, ox = origin
    yy, xx = np.mgrid[0:h, 0:w]
    coords = np.stack([yy.ravel() + oy, xx.ravel() + ox], axis=1).astype(np.float64)
    n = h * w

    out = np.empty((bsz, h, w, residual_head.lin2.w.shape[1]), dtype=np.float64)
    for bi in range(bsz):
        flat = values[bi].reshape(n, c)
        logits = flat @ wa + ba
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        pi = e / e.sum(axis=1, keepdims=True)
        mixed = pi @ comps                     # (N, 3) covariance entries
        op = pi @ opac                         # (N,)
        a, b2, d = mixed[:, 0], mixed[:, 1], mixed[:, 2]
        det = a * d - b2 * b2
        dy = coords[:, None, 0] - coords[None, :, 0]   # query minus primitive
        dx = coords[:, None, 1] - coords[None, :, 1]
        quad = (d[None, :] * dy * dy - 2.0 * b2[None, :] * dy * dx + a[None, :] * dx * dx) / det[None, :]
        resp = np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det)[None, :])
        contrib = op[:, None] * flat           # (N, C) opacity-modulated features
        agg = resp @ contrib                   # (N_q, C)
        w1 = residual_head.lin1.w.data.astype(np.float64)
        b1 = residual_head.lin1.b.data.astype(np.float64)
        w2 = residual_head.lin2.w.data.astype(np.float64)
        bb2 = residual_head.lin2.b.data.astype(np.float64)
        res = np.maximum(agg @ w1 + b1, 0.0) @ w2 + bb2
        out[bi] = res.reshape(h, w, -1)
    return out


def compose_sr(lr_up, residual):
    """Super-resolved output: upsampled observation plus predicted residual.

    No clamping here; clamp to [0, 1] only when materializing final images.
    """
    lr_up = da.asdiff(lr_up)
    residual = da.asdiff(residual)
    if lr_up.shape != residual.shape:
        raise da.ShapeError(f"compose_sr: shapes differ: {lr_up.shape} vs {residual.shape}")
    return da.add(lr_up, residual)


def top_contributors(field, bank, assign_head, query, k=5, window=7):
    """Ranked (location, response * opacity) list for one query pixel."""
    values = np.asarray(getattr(field, "data", field), dtype=np.float64)
    if values.ndim == 4:
        values = values[0]
    h, w, c = values.shape
    qy, qx = query
    radius = window // 2
    with da.no_grad():
        pi = assignment_weights(values.reshape(1, h, w, c), assign_head)
        comps, op = mix_kernels(pi, bank)
    comps = comps.data[0]
    op = op.data[0, :, :, 0]
    rows = []
    for py in range(max(0, qy - radius), min(h, qy + radius + 1)):
        for px in range(max(0, qx - radius), min(w, qx + radius + 1)):
            a, b, d = comps[py, px]
            det = a * d - b * b
            dy, dx = qy - py, qx - px
            quad = (d * dy * dy - 2 * b * dy * dx + a * dx * dx) / det
            resp = float(np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(det)))
            rows.append(((py, px), resp * float(op[py, px]), resp, float(op[py, px])))
    rows.sort(key=lambda r: -r[1])
    return rows[:k]


def dump_contributions(field, bank, assign_head, stream, k=3, window=7):
    """Write per-query top contributor lines for the whole grid."""
    values = np.asarray(getattr(field, "data", field))
    if values.ndim == 4:
        values = values[0]
    h, w = values.shape[:2]
    stream.write(f"# per-query top-{k} contributors (query -> location weight response opacity)\n")
    for qy in range(h):
        for qx in range(w):
            rows = top_contributors(values[None], bank, assign_head, (qy, qx), k=k, window=window)
            cells = " ".join(
                f"({py},{px}) {wgt:.3e} {resp:.3e} {op:.3f}" for (py, px), wgt, resp, op in rows)
            stream.write(f"q=({qy},{qx}) {cells}\n")
