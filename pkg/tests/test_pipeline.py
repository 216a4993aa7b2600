import os

import numpy as np
import pytest

from flowsplat import diffarray as da
from flowsplat import imaging, pipeline
from flowsplat.pipeline import (
    PatchDiscriminator,
    SRModel,
    Stage1Trainer,
    Stage2Trainer,
    TrainConfig,
    adversarial_terms,
    make_batch,
    parse_log,
    perceptual_proxy,
)


def tiny_config(**overrides):
    cfg = TrainConfig.profile("desk")
    cfg.image_size = 32
    cfg.scale_max = 4.0
    cfg.latent_downsample = 4
    cfg.encoder_widths = (12, 16)
    cfg.velocity_widths = (8, 12)
    cfg.fusion_width = 12
    cfg.field_channels = 8
    cfg.kernel_count = 16
    cfg.dataset_count = 8
    cfg.dataset_train = 5
    cfg.dataset_val = 1
    cfg.stage1_steps = 8
    cfg.stage2_steps = 8
    cfg.stage1_lr = 1e-3
    cfg.stage2_lr = 1e-3
    cfg.val_interval = 4
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """A few steps of both stages on a tiny config, shared by read-only tests."""
    run = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    s1 = Stage1Trainer(cfg, run)
    s1.train()
    s2 = Stage2Trainer(cfg, run)
    s2.train()
    return cfg, str(run)


# -- config ------------------------------------------------------------------

def test_profiles_load():
    desk = TrainConfig.profile("desk")
    paper = TrainConfig.profile("paper")
    assert desk.kernel_count == paper.kernel_count == 100
    assert desk.splat_window == paper.splat_window == 7
    assert paper.stage1_steps == 1_000_000 and paper.stage2_steps == 400_000
    assert paper.stage1_lr == pytest.approx(4.5e-6)
    assert paper.stage2_lr == pytest.approx(1e-5)
    assert paper.stage2_warmup == 1000
    for cfg in (desk, paper):
        assert (cfg.lambda_perceptual, cfg.lambda_adversarial, cfg.lambda_kl) == (1.0, 0.5, 1e-6)
        assert (cfg.scale_min, cfg.scale_max) == (1.0, 8.0)
        assert cfg.ema_decay == 0.999
        assert cfg.stage2_batch == 8


def test_config_yaml_roundtrip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "config.yaml"
    cfg.save(path)
    back = TrainConfig.from_yaml(path)
    assert back == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_mapping({"definitely_not_a_key": 1})


def test_unknown_profile_rejected():
    with pytest.raises(ValueError, match="unknown config profile"):
        TrainConfig.profile("gpu-cluster")


# -- batch assembly -------------------------------------------------------------

def test_make_batch_shares_scale():
    cfg = tiny_config()
    images = imaging.synth_dataset(0, 4, 32)
    hr, lr, lr_up, scale = make_batch(images, np.random.default_rng(1), 4, 1.0, 4.0)
    assert hr.shape == (4, 32, 32, 3)
    assert lr_up.shape == (4, 32, 32, 3)
    assert lr.shape[1] == int(32 // scale)


# -- loss pieces ------------------------------------------------------------------

def test_perceptual_proxy_identical_images():
    rng = np.random.default_rng(2)
    img = da.DiffArray(rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32))
    assert perceptual_proxy(img, img).item() == pytest.approx(0.0, abs=1e-9)


def test_perceptual_proxy_shift_invariance():
    rng = np.random.default_rng(3)
    base = rng.uniform(0.1, 0.7, (1, 16, 16, 3)).astype(np.float32)
    a = da.DiffArray(base)
    b = da.DiffArray(base + 0.1)
    assert perceptual_proxy(a, b).item() == pytest.approx(0.0, abs=1e-6)


def test_perceptual_proxy_detects_blur():
    edge = np.zeros((1, 16, 16, 3), dtype=np.float32)
    edge[:, :, 8:, :] = 1.0
    blurred = imaging.bicubic_resize(imaging.bicubic_resize(edge[0], 4, 4), 16, 16)
    val = perceptual_proxy(da.DiffArray(edge), da.DiffArray(blurred[None])).item()
    assert val > 1e-3


def test_adversarial_closed_forms():
    rng = np.random.default_rng(4)
    disc = PatchDiscriminator(3, widths=(4, 6, 8), rng=rng)
    for conv in (disc.c1, disc.c2, disc.c3, disc.c4):
        conv.w.data[:] = 0.0
        conv.b.data[:] = 0.0
    sr = da.DiffArray(rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32))
    hr = da.DiffArray(rng.uniform(0, 1, (2, 16, 16, 3)).astype(np.float32))
    gen_term, disc_term = adversarial_terms(sr, hr, disc)
    assert gen_term.item() == pytest.approx(np.log(2.0), rel=1e-6)
    assert disc_term.item() == pytest.approx(2.0 * np.log(2.0), rel=1e-6)


def test_discriminator_learns_separable_task():
    rng = np.random.default_rng(5)
    disc = PatchDiscriminator(3, widths=(4, 6, 8), rng=rng)
    opt = da.Adam(disc.named_params("disc/"), lr=2e-3) if hasattr(da, "Adam") else None
    from flowsplat.diffarray import Adam
    opt = Adam(disc.named_params("disc/"), lr=2e-3)
    real = da.DiffArray(np.full((2, 16, 16, 3), 0.9, dtype=np.float32))
    fake = da.DiffArray(np.full((2, 16, 16, 3), 0.1, dtype=np.float32))
    first = None
    for _ in range(100):
        _, disc_term = adversarial_terms(fake, real, disc)
        if first is None:
            first = disc_term.item()
        disc_term.backward()
        opt.step()
        opt.zero_grad()
    assert disc_term.item() < first * 0.5


def test_generator_gradient_isolated_from_disc_update():
    rng = np.random.default_rng(6)
    disc = PatchDiscriminator(3, widths=(4, 6, 8), rng=rng)
    sr = da.DiffArray(rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32),
                      requires_grad=True, name="sr")
    _, disc_term = adversarial_terms(sr, da.DiffArray(rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)), disc)
    disc_term.backward()
    assert sr.grad is None  # the discriminator objective saw a detached copy


# -- stage 1 -----------------------------------------------------------------------

def test_stage1_identity_reconstruction_means_zero_loss():
    cfg = tiny_config()
    rng = np.random.default_rng(7)
    hr = rng.uniform(0.2, 0.8, (1, 16, 16, 3)).astype(np.float32)
    hr_t = da.DiffArray(hr)
    l1 = pipeline.l1_loss(hr_t, da.DiffArray(hr.copy()))
    proxy = perceptual_proxy(hr_t, da.DiffArray(hr.copy()))
    kl = pipeline.kl_divergence(da.DiffArray(np.zeros((1, 4, 4, 2), np.float32)),
                                da.DiffArray(np.zeros((1, 4, 4, 2), np.float32)))
    total = l1.item() + cfg.lambda_perceptual * proxy.item() + cfg.lambda_kl * kl.item()
    assert total == pytest.approx(0.0, abs=1e-9)


def test_kl_weight_arithmetic():
    cfg = TrainConfig.profile("desk")
    assert cfg.lambda_kl * 1e6 == pytest.approx(1.0)


def test_stage1_step_report_and_log(tiny_run):
    cfg, run = tiny_run
    rows = parse_log(os.path.join(run, "stage1_log.txt"))
    assert len(rows) == cfg.stage1_steps
    for row in rows:
        recombined = (row["l1"] + cfg.lambda_perceptual * row["proxy"]
                      + cfg.lambda_adversarial * row["adv"] + cfg.lambda_kl * row["kl"])
        assert abs(recombined - row["total"]) < 1e-6


def test_stage1_loss_decreases_when_overfitting():
    cfg = tiny_config(dataset_count=6, dataset_train=4, dataset_val=1,
                      stage1_steps=200, stage1_lr=2e-3, adv_warmup_fraction=1.0)
    images = imaging.synth_dataset(11, 6, 32)
    trainer = Stage1Trainer(cfg, "/tmp/flowsplat_overfit_s1",
                            images=(images[:4], images[4:5], images[5:]))
    batch = make_batch(images[:4], np.random.default_rng(0), 4, 4.0, 4.0)
    losses = [trainer.step(batch=batch)["l1"] for _ in range(200)]
    assert losses[-1] <= 0.5 * losses[0], f"l1 {losses[0]:.4f} -> {losses[-1]:.4f}"


def test_stage1_aborts_on_nonfinite():
    cfg = tiny_config()
    trainer = Stage1Trainer(cfg, "/tmp/flowsplat_nan_s1")
    for _, p in trainer.parts.encoder.named_params():
        p.data[:] = np.nan
    with pytest.raises(FloatingPointError, match="components"):
        trainer.step()


# -- stage 2 ------------------------------------------------------------------------

def test_stage2_requires_stage1_checkpoint(tmp_path):
    cfg = tiny_config()
    with pytest.raises(FileNotFoundError, match="stage-1 checkpoint"):
        Stage2Trainer(cfg, tmp_path / "empty")


def test_stage2_routing_and_freeze(tiny_run):
    cfg, run = tiny_run
    rows = parse_log(os.path.join(run, "stage2_log.txt"))
    assert len(rows) == cfg.stage2_steps
    for row in rows:
        assert row["n_shortcut"] == cfg.stage2_batch // 4
        assert row["n_fm"] == cfg.stage2_batch - cfg.stage2_batch // 4
        assert row["warn_small_batch"] == 0


def test_stage2_leaves_stage1_untouched(tmp_path):
    cfg = tiny_config()
    run = tmp_path / "isolation"
    s1 = Stage1Trainer(cfg, run)
    s1.train()
    checksums = {
        "encoder": s1.parts.encoder.param_checksum(),
        "fusion": s1.parts.fusion.param_checksum(),
        "bank": s1.parts.bank.param_checksum(),
    }
    s2 = Stage2Trainer(cfg, run)
    s2.train()
    assert s2.parts.encoder.param_checksum() == pytest.approx(checksums["encoder"], rel=1e-7)
    assert s2.parts.fusion.param_checksum() == pytest.approx(checksums["fusion"], rel=1e-7)
    assert s2.parts.bank.param_checksum() == pytest.approx(checksums["bank"], rel=1e-7)
    grads = [name for name, p in s2.parts.encoder.named_params() if p.grad is not None]
    assert grads == []


def test_stage2_fm_loss_decreases_when_overfitting():
    cfg = tiny_config(dataset_count=6, dataset_train=4, dataset_val=1,
                      scale_min=2.0, scale_max=2.0, stage1_steps=30, stage2_steps=500)
    images = imaging.synth_dataset(21, 6, 32)
    split = (images[:4], images[4:5], images[5:])
    run = "/tmp/flowsplat_overfit_s2"
    Stage1Trainer(cfg, run, images=split).train()
    s2 = Stage2Trainer(cfg, run, images=split)
    losses = [s2.step()["fm"] for _ in range(500)]
    early = float(np.mean(losses[:20]))
    late = float(np.mean(losses[-20:]))
    assert late <= 0.7 * early, f"fm {early:.4f} -> {late:.4f}"


# -- inference ---------------------------------------------------------------------

def test_infer_shapes_and_determinism(tiny_run):
    cfg, run = tiny_run
    model = SRModel.load(run)
    lr = imaging.synth_dataset(5, 1, 32)[0][:16, :16]
    res = model.infer(lr, 4.0, nfe=1, seed=9)
    assert res.image.shape == (64, 64, 3)
    assert res.nfe == 1
    res2 = model.infer(lr, 4.0, nfe=1, seed=9)
    assert np.array_equal(res.image, res2.image)
    res3 = model.infer(lr, 4.0, nfe=1, seed=10)
    assert not np.array_equal(res.image, res3.image)  # latent noise differs


def test_infer_fractional_and_extrapolated_scales(tiny_run):
    cfg, run = tiny_run
    model = SRModel.load(run)
    lr = imaging.synth_dataset(6, 1, 32)[0][:12, :10]
    res = model.infer(lr, 2.6, nfe=2, seed=0)
    assert res.image.shape == (32, 26, 3)  # ceil(2.6*12), ceil(2.6*10)
    assert not res.extrapolated
    with pytest.warns(UserWarning, match="outside trained range"):
        res10 = model.infer(lr, 10.0, nfe=1, seed=0)
    assert res10.image.shape == (120, 100, 3)
    assert res10.extrapolated


def test_infer_nfe_counter(tiny_run):
    cfg, run = tiny_run
    model = SRModel.load(run)
    lr = imaging.synth_dataset(7, 1, 32)[0][:16, :16]
    before = model.parts.velocity.eval_count
    res = model.infer(lr, 2.0, nfe=5, seed=1)
    assert res.nfe == 5
    assert model.parts.velocity.eval_count - before == 5


def test_infer_output_in_unit_range(tiny_run):
    cfg, run = tiny_run
    model = SRModel.load(run)
    lr = imaging.synth_dataset(8, 1, 32)[0][:16, :16]
    res = model.infer(lr, 3.0, nfe=1, seed=2)
    assert res.image.min() >= 0.0 and res.image.max() <= 1.0
