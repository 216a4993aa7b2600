"""Two-stage training orchestration and end-to-end inference.

Stage 1 jointly trains the detail encoder, fusion decoder and splat
renderer with an L1 + perceptual-proxy + adversarial + KL objective.
Stage 2 freezes those components and trains the conditional velocity
network (plus the condition encoder) with the quarter-split flow
objective, maintaining an EMA shadow that also drives sampling.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np
import yaml

from . import diffarray as da
from . import flowcore, gsfield, imaging
from .diffarray import Adam, EmaShadow, load_checkpoint, save_checkpoint
from .latentnet import ConditionEncoder, DetailEncoder, FusionDecoder, kl_divergence, target_grid
from .nn import Conv2d, Module


@dataclass
class TrainConfig:
    seed: int = 0
    in_channels: int = 3
    image_size: int = 64
    dataset_kind: str = "synthetic"
    dataset_count: int = 52
    dataset_train: int = 40
    dataset_val: int = 4
    dataset_seed: int = 7
    dataset_manifest: str | None = None
    scale_min: float = 1.0
    scale_max: float = 8.0
    latent_channels: int = 8
    latent_downsample: int = 8
    field_channels: int = 16
    encoder_widths: tuple = (32, 64, 128)
    fusion_width: int = 32
    velocity_widths: tuple = (32, 64)
    kernel_count: int = 100
    splat_window: int = 7
    sigma_init: tuple = (0.3, 1.5)
    sigma_clamp: tuple = (0.15, 2.2)
    stage1_steps: int = 4500
    stage1_batch: int = 4
    stage1_lr: float = 2e-3
    stage1_warmup: int = 100
    disc_lr: float = 1e-3
    adv_warmup_fraction: float = 0.1
    lambda_perceptual: float = 1.0
    lambda_adversarial: float = 0.5
    lambda_kl: float = 1e-6
    val_interval: int = 500
    stage2_steps: int = 4500
    stage2_batch: int = 8
    stage2_lr: float = 2e-3
    stage2_warmup: int = 200
    ema_decay: float = 0.999

    @classmethod
    def profile(cls, name):
        ref = importlib.resources.files("flowsplat") / "profiles" / f"{name}.yaml"
        try:
            text = ref.read_text()
        except FileNotFoundError:
            raise ValueError(f"unknown config profile '{name}' (expected desk or paper)") from None
        return cls.from_mapping(yaml.safe_load(text))

    @classmethod
    def from_yaml(cls, path):
        with open(path) as f:
            return cls.from_mapping(yaml.safe_load(f))

    @classmethod
    def from_mapping(cls, mapping):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - fields
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(mapping)
        for key in ("encoder_widths", "velocity_widths", "sigma_init", "sigma_clamp"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def save(self, path):
        data = dataclasses.asdict(self)
        for key, val in data.items():
            if isinstance(val, tuple):
                data[key] = list(val)
        with open(path, "w") as f:
            yaml.safe_dump(data, f, sort_keys=False)


def load_dataset(config):
    """(train, val, test) image lists following the config split."""
    if config.dataset_kind == "synthetic":
        images = imaging.synth_dataset(config.dataset_seed, config.dataset_count, config.image_size)
    elif config.dataset_kind == "manifest":
        if not config.dataset_manifest:
            raise ValueError("dataset_kind=manifest needs dataset_manifest")
        images = [imaging.load_png(p) for p in imaging.read_manifest(config.dataset_manifest)]
    else:
        raise ValueError(f"unknown dataset_kind '{config.dataset_kind}'")
    n_train = config.dataset_train or max(1, int(0.8 * len(images)))
    n_val = config.dataset_val or max(1, int(0.05 * len(images)))
    if n_train + n_val >= len(images):
        raise ValueError(f"dataset split {n_train}+{n_val} leaves no test images out of {len(images)}")
    return images[:n_train], images[n_train:n_train + n_val], images[n_train + n_val:]


class Components:
    """All trainable pieces, built deterministically from the config seed."""

    def __init__(self, config):
        self.config = config
        streams = np.random.SeedSequence(config.seed).spawn(7)
        rngs = [np.random.default_rng(s) for s in streams]
        c = config
        self.encoder = DetailEncoder(c.in_channels, c.latent_channels, c.latent_downsample,
                                     c.encoder_widths, rng=rngs[0])
        self.fusion = FusionDecoder(c.latent_channels, c.in_channels, c.field_channels,
                                    c.latent_downsample, c.fusion_width, rng=rngs[1])
        self.bank = gsfield.GaussianBank(c.kernel_count, rngs[2], sigma_range=c.sigma_init)
        self.assign = gsfield.AssignmentHead(c.field_channels, c.kernel_count, rngs[3])
        self.residual = gsfield.ResidualHead(c.field_channels, c.in_channels, rngs[4])
        self.cond = ConditionEncoder(c.in_channels, c.latent_channels, c.latent_downsample,
                                     c.encoder_widths, rng=rngs[5])
        self.velocity = flowcore.VelocityNet(c.latent_channels, c.latent_channels,
                                             c.velocity_widths, rng=rngs[6])
        self.discriminator = PatchDiscriminator(c.in_channels, rng=np.random.default_rng(config.seed + 101))

    def stage1_named(self):
        return (self.encoder.named_params("encoder/")
                + self.fusion.named_params("fusion/")
                + self.bank.named_params("bank/")
                + self.assign.named_params("assign/")
                + self.residual.named_params("residual/"))

    def stage2_named(self):
        return (self.velocity.named_params("velocity/")
                + self.cond.named_params("cond/"))

    def load_stage1(self, state):
        for module, prefix in ((self.encoder, "encoder/"), (self.fusion, "fusion/"),
                               (self.bank, "bank/"), (self.assign, "assign/"),
                               (self.residual, "residual/")):
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            module.load_state_dict(sub)

    def load_stage2(self, state, ema=None):
        for module, prefix in ((self.velocity, "velocity/"), (self.cond, "cond/")):
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            module.load_state_dict(sub)
        if ema is not None:
            ema.load_state_items(state.items(), prefix="ema/velocity/")


class PatchDiscriminator(Module):
    """Four stride-2 convolutions down to a per-patch logit map."""

    def __init__(self, in_channels=3, widths=(32, 64, 128), rng=None, dtype=np.float32):
        w0, w1, w2 = widths
        self.c1 = Conv2d(in_channels, w0, rng, stride=2, dtype=dtype)
        self.c2 = Conv2d(w0, w1, rng, stride=2, dtype=dtype)
        self.c3 = Conv2d(w1, w2, rng, stride=2, dtype=dtype)
        self.c4 = Conv2d(w2, 1, rng, stride=2, gain=1.0, dtype=dtype)

    def forward(self, x):
        h = da.leaky_relu(self.c1(x))
        h = da.leaky_relu(self.c2(h))
        h = da.leaky_relu(self.c3(h))
        return self.c4(h)


def l1_loss(a, b):
    return da.mean_(da.absolute(da.sub(a, b)))


def perceptual_proxy(a, b, levels=3):
    """Mean absolute difference of image gradients at dyadic scales.

    Zero iff the finite-difference edge maps agree at every level;
    invariant to constant intensity offsets.
    """
    a, b = da.asdiff(a), da.asdiff(b)
    total = None
    for level in range(levels):
        if level:
            hw = (max(2, a.shape[1] >> level), max(2, a.shape[2] >> level))
            ai = da.resize_bilinear(a, hw)
            bi = da.resize_bilinear(b, hw)
        else:
            ai, bi = a, b
        dya = ai[:, 1:, :, :] - ai[:, :-1, :, :]
        dyb = bi[:, 1:, :, :] - bi[:, :-1, :, :]
        dxa = ai[:, :, 1:, :] - ai[:, :, :-1, :]
        dxb = bi[:, :, 1:, :] - bi[:, :, :-1, :]
        term = da.mean_(da.absolute(dya - dyb)) + da.mean_(da.absolute(dxa - dxb))
        total = term if total is None else total + term
    return total / levels


def adversarial_terms(sr, hr, discriminator):
    """Non-saturating logistic GAN terms (generator term, discriminator term).

    The discriminator term sees the super-resolved image detached, so the
    generator never receives gradient from discriminator updates.
    """
    sr, hr = da.asdiff(sr), da.asdiff(hr)
    gen_term = da.mean_(da.softplus(da.neg(discriminator(sr))))
    fake = sr.detach()
    disc_term = da.mean_(da.softplus(da.neg(discriminator(hr)))) + da.mean_(da.softplus(discriminator(fake)))
    return gen_term, disc_term


def make_batch(images, rng, batch, scale_lo, scale_hi, augment=True):
    """Assemble one mini-batch of degraded pairs sharing a single scale draw."""
    scale = imaging.sample_scale(rng, scale_lo, scale_hi)
    idx = rng.integers(0, len(images), batch)
    pairs = []
    for i in idx:
        pair = imaging.degrade(images[int(i)], scale)
        if augment:
            pair = imaging.augment(pair, rng)
        pairs.append(pair)
    hr = np.stack([p.hr for p in pairs])
    lr = np.stack([p.lr for p in pairs])
    lr_up = np.stack([p.lr_up for p in pairs])
    return hr, lr, lr_up, scale


def _append_log(path, fields):
    parts = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items()]
    with open(path, "a") as f:
        f.write(" ".join(parts) + "\n")


def parse_log(path):
    rows = []
    with open(path) as f:
        for line in f:
            row = {}
            for token in line.split():
                key, val = token.split("=", 1)
                try:
                    row[key] = float(val)
                except ValueError:
                    row[key] = val
            rows.append(row)
    return rows


class Stage1Trainer:
    """Joint training of encoder, fusion decoder and splat renderer."""

    def __init__(self, config, run_dir, images=None):
        self.config = config
        self.run_dir = str(run_dir)
        os.makedirs(self.run_dir, exist_ok=True)
        if images is None:
            self.train_images, self.val_images, self.test_images = load_dataset(config)
        else:
            self.train_images, self.val_images, self.test_images = images
        self.parts = Components(config)
        self.gen_opt = Adam(self.parts.stage1_named(), lr=config.stage1_lr,
                            warmup_steps=config.stage1_warmup)
        self.disc_opt = Adam(self.parts.discriminator.named_params("disc/"), lr=config.disc_lr)
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed + 1))
        self.log_path = os.path.join(self.run_dir, "stage1_log.txt")
        self.step_count = 0
        self.best_val = float("inf")
        self.best_state = None

    def _forward_losses(self, hr, lr, lr_up, scale, sample_latent=True):
        c = self.config
        hr_t, lr_t, lr_up_t = da.DiffArray(hr), da.DiffArray(lr), da.DiffArray(lr_up)
        latent = self.parts.encoder.encode(hr_t, lr_up_t, rng=self.rng if sample_latent else None)
        field = self.parts.fusion(latent.value, lr_t, scale, out_hw=hr.shape[1:3])
        delta = gsfield.render_windowed(field, self.parts.bank, self.parts.assign,
                                        self.parts.residual, window=c.splat_window)
        sr = gsfield.compose_sr(lr_up_t, delta)
        losses = {
            "l1": l1_loss(sr, hr_t),
            "proxy": perceptual_proxy(sr, hr_t),
            "kl": kl_divergence(latent.mean, latent.log_var),
        }
        return sr, hr_t, losses

    def step(self, batch=None):
        """One generator step plus one alternating discriminator step."""
        c = self.config
        self.step_count += 1
        if batch is None:
            batch = make_batch(self.train_images, self.rng, c.stage1_batch,
                               c.scale_min, c.scale_max)
        hr, lr, lr_up, scale = batch
        sr, hr_t, losses = self._forward_losses(hr, lr, lr_up, scale)

        adv_active = self.step_count > c.adv_warmup_fraction * c.stage1_steps
        if adv_active:
            gen_adv, disc_term = adversarial_terms(sr, hr_t, self.parts.discriminator)
        else:
            _, disc_term = adversarial_terms(da.DiffArray(sr.data), hr_t, self.parts.discriminator)
            gen_adv = None

        components = {k: v.item() for k, v in losses.items()}
        components["adv"] = gen_adv.item() if gen_adv is not None else 0.0
        bad = [k for k, v in components.items() if not np.isfinite(v)]
        if bad:
            raise FloatingPointError(f"stage-1 loss not finite; components: {components}")

        total = losses["l1"] + c.lambda_perceptual * losses["proxy"] + c.lambda_kl * losses["kl"]
        if gen_adv is not None:
            total = total + c.lambda_adversarial * gen_adv
        total.backward()
        lr_now = self.gen_opt.step()
        self.parts.bank.clamp_sigma(*c.sigma_clamp)
        self.gen_opt.zero_grad()
        self.disc_opt.zero_grad()

        disc_term.backward()
        self.disc_opt.step()
        self.disc_opt.zero_grad()
        self.gen_opt.zero_grad()

        total_logged = (components["l1"] + c.lambda_perceptual * components["proxy"]
                        + c.lambda_adversarial * components["adv"] + c.lambda_kl * components["kl"])
        report = {
            "step": self.step_count,
            "l1": components["l1"],
            "proxy": components["proxy"],
            "adv": components["adv"],
            "kl": components["kl"],
            "total": total_logged,
            "lr": lr_now,
            "disc": disc_term.item(),
            "scale": scale,
        }
        _append_log(self.log_path, report)
        return report

    def validation_score(self):
        """Deterministic reconstruction score (L1 + proxy) on the val split."""
        scores = []
        with da.no_grad():
            for img in self.val_images:
                for scale in (2.0, 4.0):
                    pair = imaging.degrade(img, scale)
                    _, _, losses = self._forward_losses(pair.hr[None], pair.lr[None],
                                                        pair.lr_up[None], scale,
                                                        sample_latent=False)
                    scores.append(losses["l1"].item() + losses["proxy"].item())
        return float(np.mean(scores))

    def train(self, steps=None, progress=None):
        steps = steps or self.config.stage1_steps
        for _ in range(steps):
            report = self.step()
            if progress and self.step_count % 250 == 0:
                progress(report)
            if self.step_count % self.config.val_interval == 0 or self.step_count == steps:
                score = self.validation_score()
                if score < self.best_val:
                    self.best_val = score
                    self.best_state = dict(
                        (name, p.data.copy()) for name, p in self.parts.stage1_named())
        if self.best_state is not None:
            for name, p in self.parts.stage1_named():
                p.data = self.best_state[name]
        self.save()
        return {"steps": self.step_count, "best_val": self.best_val}

    def save(self):
        named = self.parts.stage1_named() + self.parts.discriminator.named_params("disc/")
        save_checkpoint(os.path.join(self.run_dir, "stage1.ckpt"), named)
        self.config.save(os.path.join(self.run_dir, "config.yaml"))


class Stage2Trainer:
    """Flow training on top of a frozen stage-1 checkpoint."""

    def __init__(self, config, run_dir, images=None):
        self.config = config
        self.run_dir = str(run_dir)
        ckpt = os.path.join(self.run_dir, "stage1.ckpt")
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"stage 2 refused: no stage-1 checkpoint at {ckpt}")
        if images is None:
            self.train_images, self.val_images, self.test_images = load_dataset(config)
        else:
            self.train_images, self.val_images, self.test_images = images
        self.parts = Components(config)
        self.parts.load_stage1(load_checkpoint(ckpt))
        self.opt = Adam(self.parts.stage2_named(), lr=config.stage2_lr,
                        warmup_steps=config.stage2_warmup)
        self.ema = EmaShadow(self.parts.velocity.named_params(), decay=config.ema_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed + 2))
        self.log_path = os.path.join(self.run_dir, "stage2_log.txt")
        self.step_count = 0

    def step(self, batch=None):
        c = self.config
        self.step_count += 1
        if batch is None:
            batch = make_batch(self.train_images, self.rng, c.stage2_batch,
                               c.scale_min, c.scale_max)
        hr, lr, lr_up, scale = batch
        lr_up_t = da.DiffArray(lr_up)
        with da.no_grad():
            latent = self.parts.encoder.encode(da.DiffArray(hr), lr_up_t, rng=None)
        targets = da.DiffArray(latent.mean.data)
        cond = self.parts.cond(lr_up_t)
        sources = da.DiffArray(self.rng.standard_normal(targets.shape).astype(np.float32))

        loss, report = flowcore.batch_objective(self.parts.velocity, self.ema,
                                                sources, targets, cond, self.rng)
        loss.backward()
        lr_now = self.opt.step()
        self.opt.zero_grad()
        self.ema.update(self.parts.velocity.named_params())

        out = {
            "step": self.step_count,
            "fm": report["fm"],
            "shortcut": report["shortcut"],
            "total": loss.item(),
            "lr": lr_now,
            "n_shortcut": report["n_shortcut"],
            "n_fm": report["n_fm"],
            "warn_small_batch": int(report["small_batch_warning"]),
            "scale": scale,
        }
        _append_log(self.log_path, out)
        return out

    def train(self, steps=None, progress=None):
        steps = steps or self.config.stage2_steps
        for _ in range(steps):
            report = self.step()
            if progress and self.step_count % 250 == 0:
                progress(report)
        self.save()
        return {"steps": self.step_count}

    def save(self):
        named = self.parts.stage2_named() + self.ema.state_items(prefix="ema/velocity/")
        save_checkpoint(os.path.join(self.run_dir, "stage2.ckpt"), named)


@dataclass
class InferResult:
    image: np.ndarray
    nfe: int
    seconds: float
    out_hw: tuple
    extrapolated: bool


class SRModel:
    """Loaded two-stage model exposing end-to-end inference."""

    def __init__(self, config, parts, ema):
        self.config = config
        self.parts = parts
        self.ema = ema

    @classmethod
    def load(cls, run_dir):
        config = TrainConfig.from_yaml(os.path.join(run_dir, "config.yaml"))
        parts = Components(config)
        parts.load_stage1(load_checkpoint(os.path.join(run_dir, "stage1.ckpt")))
        stage2_path = os.path.join(run_dir, "stage2.ckpt")
        if not os.path.exists(stage2_path):
            raise FileNotFoundError(f"no stage-2 checkpoint at {stage2_path}")
        ema = EmaShadow(parts.velocity.named_params(), decay=config.ema_decay)
        parts.load_stage2(load_checkpoint(stage2_path), ema=ema)
        return cls(config, parts, ema)

    def infer(self, lr_image, scale, nfe=1, seed=0):
        """Super-resolve ``lr_image`` by ``scale`` with an ``nfe``-step sampler."""
        c = self.config
        lr_image = np.asarray(lr_image, dtype=np.float32)
        extrapolated = not (c.scale_min <= scale <= c.scale_max)
        if extrapolated:
            warnings.warn(f"scale {scale} outside trained range "
                          f"[{c.scale_min}, {c.scale_max}]; extrapolating", stacklevel=2)
        out_hw = target_grid(scale, lr_image.shape[0], lr_image.shape[1])
        lr_up = imaging.bicubic_resize(lr_image, *out_hw).astype(np.float32)
        rng = np.random.default_rng(seed)

        start = time.perf_counter()
        nfe_before = self.parts.velocity.eval_count
        with da.no_grad():
            cond = self.parts.cond(da.DiffArray(lr_up[None]))
            noise = rng.standard_normal(
                (1,) + cond.shape[1:3] + (c.latent_channels,)).astype(np.float32)
            with self.ema.applied(self.parts.velocity.named_params()):
                latent = flowcore.euler_sample(self.parts.velocity, da.DiffArray(noise), cond, nfe)
            field = self.parts.fusion(latent, da.DiffArray(lr_image[None]), scale, out_hw=out_hw)
            delta = gsfield.render_windowed(field, self.parts.bank, self.parts.assign,
                                            self.parts.residual, window=c.splat_window)
            sr = gsfield.compose_sr(da.DiffArray(lr_up[None]), delta)
        seconds = time.perf_counter() - start
        used = self.parts.velocity.eval_count - nfe_before
        assert used == nfe, f"NFE accounting broke: {used} evaluations for nfe={nfe}"
        image = np.clip(sr.data[0], 0.0, 1.0)
        return InferResult(image=image, nfe=used, seconds=seconds,
                           out_hw=out_hw, extrapolated=extrapolated)

    def stage1_reconstruction(self, hr, lr, lr_up, scale):
        """Renderer output from the true (posterior-mean) latent; no flow."""
        with da.no_grad():
            latent = self.parts.encoder.encode(da.DiffArray(hr[None]), da.DiffArray(lr_up[None]))
            field = self.parts.fusion(latent.value, da.DiffArray(lr[None]), scale,
                                      out_hw=hr.shape[:2])
            delta = gsfield.render_windowed(field, self.parts.bank, self.parts.assign,
                                            self.parts.residual, window=self.config.splat_window)
            sr = gsfield.compose_sr(da.DiffArray(lr_up[None]), delta)
        return np.clip(sr.data[0], 0.0, 1.0)
