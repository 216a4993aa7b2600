import numpy as np
import pytest

from flowsplat import diffarray as da
from flowsplat import flowcore
from flowsplat.diffarray import EmaShadow, grad_check


class StubField:
    """Callable velocity field with no parameters (for sampler identities)."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, state, time, cond, step=0.0):
        self.calls += 1
        return self.fn(da.asdiff(state), time)

    def named_params(self):
        return []


def latent(rng, b=2, h=2, w=2, c=3):
    return da.DiffArray(rng.standard_normal((b, h, w, c)).astype(np.float32))


def make_net(rng, c=3, dtype=np.float32):
    return flowcore.VelocityNet(c, c, widths=(8, 12), rng=rng, dtype=dtype)


# -- path construction -------------------------------------------------------

def test_path_endpoints():
    rng = np.random.default_rng(0)
    z0, z1 = latent(rng), latent(rng)
    assert np.array_equal(flowcore.sample_path(z0, z1, 0.0).data, z0.data)
    assert np.array_equal(flowcore.sample_path(z0, z1, 1.0).data, z1.data)


def test_path_midpoint_of_opposites_is_zero():
    rng = np.random.default_rng(1)
    z0 = latent(rng)
    z1 = da.DiffArray(-z0.data)
    mid = flowcore.sample_path(z0, z1, 0.5)
    assert np.abs(mid.data).max() < 1e-7


def test_path_rejects_time_outside_unit_interval():
    rng = np.random.default_rng(2)
    z0, z1 = latent(rng), latent(rng)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        flowcore.sample_path(z0, z1, 1.2)


def test_path_per_sample_times():
    rng = np.random.default_rng(3)
    z0, z1 = latent(rng, b=3), latent(rng, b=3)
    t = np.array([0.0, 0.5, 1.0])
    out = flowcore.sample_path(z0, z1, t).data
    assert np.array_equal(out[0], z0.data[0])
    assert np.allclose(out[1], 0.5 * (z0.data[1] + z1.data[1]), atol=1e-7)
    assert np.array_equal(out[2], z1.data[2])


# -- velocity regression loss --------------------------------------------------

def test_fm_loss_zero_when_output_matches_target():
    rng = np.random.default_rng(4)
    z0, z1 = latent(rng), latent(rng)
    gap = z1.data - z0.data
    net = StubField(lambda z, t: da.DiffArray(gap))
    cond = latent(rng)
    assert flowcore.fm_loss(net, z0, z1, 0.3, cond).item() == pytest.approx(0.0, abs=1e-12)


def test_fm_loss_zero_for_equal_endpoints_and_zero_net():
    rng = np.random.default_rng(5)
    z0 = latent(rng)
    net = StubField(lambda z, t: da.DiffArray(np.zeros_like(z.data)))
    loss = flowcore.fm_loss(net, z0, da.DiffArray(z0.data.copy()), 0.7, z0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_fm_loss_mean_of_ones():
    rng = np.random.default_rng(6)
    z0 = latent(rng)
    z1 = da.DiffArray(z0.data + 1.0)
    net = StubField(lambda z, t: da.DiffArray(np.zeros_like(z.data)))
    loss = flowcore.fm_loss(net, z0, z1, 0.25, z0)
    assert loss.item() == pytest.approx(1.0, abs=1e-6)


def test_fm_loss_rejects_non_finite_network():
    rng = np.random.default_rng(7)
    z0, z1 = latent(rng), latent(rng)
    net = StubField(lambda z, t: da.DiffArray(np.full_like(z.data, np.nan)))
    with pytest.raises(FloatingPointError, match="not finite"):
        flowcore.fm_loss(net, z0, z1, 0.5, z0)


# -- shortcut targets -----------------------------------------------------------

def _empty_shadow(net):
    return EmaShadow(net.named_params() or [("dummy", da.parameter(np.zeros(1)))], decay=0.999) \
        if net.named_params() else EmaShadow([], decay=0.999)


def test_shortcut_target_constant_field():
    rng = np.random.default_rng(8)
    k = rng.standard_normal((2, 2, 2, 3)).astype(np.float32)
    net = StubField(lambda z, t: da.DiffArray(k))
    shadow = EmaShadow([], decay=0.999)
    z = latent(rng)
    target = flowcore.shortcut_targets(net, shadow, z, 0.25, z, 0.125)
    assert np.allclose(target.data, k, atol=1e-7)


def test_shortcut_target_zero_step_degenerates():
    rng = np.random.default_rng(9)
    net = StubField(lambda z, t: 2.0 * z)
    shadow = EmaShadow([], decay=0.999)
    z = latent(rng)
    target = flowcore.shortcut_targets(net, shadow, z, 0.4, z, 0.0)
    assert np.allclose(target.data, 2.0 * z.data, atol=1e-7)


def test_shortcut_target_linear_field_closed_form():
    # velocity(z) = z: first step gives z' = z(1 + dt); the two-step average
    # velocity is z(1 + dt/2)
    rng = np.random.default_rng(10)
    net = StubField(lambda z, t: z)
    shadow = EmaShadow([], decay=0.999)
    z = latent(rng)
    dt = 0.25
    target = flowcore.shortcut_targets(net, shadow, z, 0.0, z, dt)
    assert np.allclose(target.data, z.data * (1.0 + dt / 2.0), atol=1e-6)


def test_shortcut_target_rejects_horizon_overflow():
    rng = np.random.default_rng(11)
    net = StubField(lambda z, t: z)
    z = latent(rng)
    with pytest.raises(ValueError, match="horizon"):
        flowcore.shortcut_targets(net, EmaShadow([], decay=0.999), z, 0.8, z, 0.2)


def test_shortcut_target_is_detached():
    rng = np.random.default_rng(12)
    net = make_net(rng)
    shadow = EmaShadow(net.named_params(), decay=0.999)
    z = latent(rng)
    target = flowcore.shortcut_targets(net, shadow, z, 0.25, z, 0.125)
    assert target._parents == () and not target.requires_grad


def test_shortcut_loss_zero_for_constant_self_consistent_field():
    rng = np.random.default_rng(13)
    k = rng.standard_normal((2, 2, 2, 3)).astype(np.float32)
    net = StubField(lambda z, t: da.DiffArray(k))
    loss = flowcore.shortcut_loss(net, EmaShadow([], decay=0.999), latent(rng), 0.25,
                                  latent(rng), 0.125)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_shortcut_loss_gradient_only_through_live_branch():
    rng = np.random.default_rng(14)
    net = make_net(rng)
    shadow = EmaShadow(net.named_params(), decay=0.999)
    # make the shadow differ from the live weights
    for name in shadow.shadow:
        shadow.shadow[name] = shadow.shadow[name] + 0.05
    z, cond = latent(rng), latent(rng)
    loss = flowcore.shortcut_loss(net, shadow, z, 0.25, cond, 0.125)
    loss.backward()
    grads = {name: p.grad.copy() for name, p in net.named_params()}
    net.zero_grad()
    # identical loss against the frozen target must give identical grads
    target = flowcore.shortcut_targets(net, shadow, z, 0.25, cond, 0.125)
    vel = net(z, 0.25, cond, step=0.25)
    diff = vel - target
    da.mean_(diff * diff).backward()
    for name, p in net.named_params():
        assert np.allclose(p.grad, grads[name], atol=1e-7), name


# -- batch objective ---------------------------------------------------------------

@pytest.mark.parametrize("batch,expect_sc", [(8, 2), (4, 1), (3, 0)])
def test_batch_objective_quarter_split(batch, expect_sc):
    rng = np.random.default_rng(15)
    net = make_net(rng)
    shadow = EmaShadow(net.named_params(), decay=0.999)
    z0, z1, cond = latent(rng, b=batch), latent(rng, b=batch), latent(rng, b=batch)
    loss, report = flowcore.batch_objective(net, shadow, z0, z1, cond,
                                            np.random.default_rng(0))
    assert report["n_shortcut"] == expect_sc
    assert report["n_fm"] == batch - expect_sc
    assert report["small_batch_warning"] == (batch < 4)
    assert np.isfinite(loss.item())


def test_batch_objective_routing_reproducible():
    rng = np.random.default_rng(16)
    net = make_net(rng)
    shadow = EmaShadow(net.named_params(), decay=0.999)
    z0, z1, cond = latent(rng, b=8), latent(rng, b=8), latent(rng, b=8)
    l1, r1 = flowcore.batch_objective(net, shadow, z0, z1, cond, np.random.default_rng(5))
    l2, r2 = flowcore.batch_objective(net, shadow, z0, z1, cond, np.random.default_rng(5))
    assert l1.item() == l2.item()
    assert r1 == r2


def test_dyadic_time_grid():
    rng = np.random.default_rng(17)
    for _ in range(500):
        t, dt = flowcore.draw_shortcut_times(rng)
        level = -np.log2(dt)
        assert level == int(level) and 1 <= level <= flowcore.DYADIC_MAX_LEVEL
        assert t + 2 * dt <= 1.0 + 1e-12
        slots = t / (2 * dt)
        assert abs(slots - round(slots)) < 1e-12


# -- samplers -------------------------------------------------------------------

def test_euler_constant_field_any_steps():
    rng = np.random.default_rng(18)
    z0 = latent(rng)
    k = rng.standard_normal(z0.shape).astype(np.float32)
    net = StubField(lambda z, t: da.DiffArray(k))
    outs = [flowcore.euler_sample(net, z0, z0, n).data for n in (1, 2, 4, 128)]
    for out in outs:
        assert np.allclose(out, z0.data + k, atol=1e-6)


def test_euler_linear_field_compounds():
    rng = np.random.default_rng(19)
    z0 = latent(rng)
    net = StubField(lambda z, t: z)
    for n in (1, 2, 8, 64):
        out = flowcore.euler_sample(net, z0, z0, n).data
        assert np.allclose(out, z0.data * (1 + 1.0 / n) ** n, rtol=1e-5)
    big = flowcore.euler_sample(net, z0, z0, 4096).data
    assert np.allclose(big, z0.data * np.e, rtol=1e-3)


def test_euler_counts_evaluations_and_rejects_bad_steps():
    rng = np.random.default_rng(20)
    z0 = latent(rng)
    net = StubField(lambda z, t: da.DiffArray(np.zeros_like(z.data)))
    flowcore.euler_sample(net, z0, z0, 7)
    assert net.calls == 7
    with pytest.raises(ValueError, match=">= 1"):
        flowcore.euler_sample(net, z0, z0, 0)


def test_euler_aborts_on_divergence_with_step_index():
    rng = np.random.default_rng(21)
    z0 = latent(rng)
    net = StubField(lambda z, t: 1e30 * z)  # multiplicative blowup overflows float32
    with pytest.raises(FloatingPointError, match="step 2/4"):
        flowcore.euler_sample(net, z0, z0, 4)


def test_one_step_equals_single_euler():
    rng = np.random.default_rng(22)
    net = make_net(rng)
    z0, cond = latent(rng), latent(rng)
    a = flowcore.one_step_sample(net, z0, cond)
    b = flowcore.euler_sample(net, z0, cond, 1)
    assert np.array_equal(a.data, b.data)


def test_one_step_zero_velocity_returns_source():
    rng = np.random.default_rng(23)
    z0 = latent(rng)
    net = StubField(lambda z, t: da.DiffArray(np.zeros_like(z.data)))
    out = flowcore.one_step_sample(net, z0, z0)
    assert np.array_equal(out.data, z0.data)
    assert net.calls == 1


def test_one_step_exact_transport_for_memorized_pair():
    rng = np.random.default_rng(24)
    z0, z1 = latent(rng), latent(rng)
    gap = z1.data - z0.data
    net = StubField(lambda z, t: da.DiffArray(gap))
    out = flowcore.one_step_sample(net, z0, z0)
    assert np.allclose(out.data, z1.data, atol=1e-6)


# -- velocity network ---------------------------------------------------------------

def test_velocity_net_shape_and_determinism():
    rng = np.random.default_rng(25)
    net = make_net(rng, c=4)
    z = latent(rng, b=2, h=3, w=5, c=4)
    cond = latent(rng, b=2, h=3, w=5, c=4)
    a = net(z, 0.3, cond, step=0.25)
    b = net(z, 0.3, cond, step=0.25)
    assert a.shape == z.shape
    assert np.array_equal(a.data, b.data)
    c2 = net(z, 0.9, cond, step=0.25)
    assert not np.array_equal(a.data, c2.data)


def test_velocity_net_gradients():
    rng = np.random.default_rng(26)
    net = make_net(rng, dtype=np.float64)
    z0, z1, cond = (da.DiffArray(np.random.default_rng(27).standard_normal((2, 2, 2, 3)))
                    for _ in range(3))

    def loss_fn():
        return flowcore.fm_loss(net, z0, z1, 0.4, cond)

    rep = grad_check(loss_fn, net.named_params("velocity/"), n_samples=120,
                     rng=np.random.default_rng(28))
    assert rep.passed, str(rep)
