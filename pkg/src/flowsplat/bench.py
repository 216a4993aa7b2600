"""Metrics, oracle drivers and the command-line interface.

Metric notes: ``rp_frechet`` is a Frechet distance over a fixed, seeded
random convolutional projection (64 features).  It plays the role a
pretrained-feature Frechet metric would play at full scale but its
numbers are NOT comparable to published FID values; report headers say
so explicitly.
"""

from __future__ import annotations

import argparse
import sys
import time
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from . import diffarray as da
from . import flowcore, gsfield, imaging, pipeline
from .diffarray import grad_check
from .latentnet import DetailEncoder, FusionDecoder, kl_divergence

PSNR_CAP_DB = 99.0


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on [0, 1] images; capped at 99."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x, kernel):
    w = sliding_window_view(x, len(kernel), axis=0) @ kernel
    return sliding_window_view(w, len(kernel), axis=1) @ kernel


def _luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def ssim(a, b, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean local structural similarity over luma (valid windows only)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"ssim: image {a.shape[:2]} smaller than the {window}x{window} window")
    x, y = _luma(a), _luma(b)
    k = _gaussian_window(window, sigma)
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    var_x = _filter_valid(x * x, k) - mu_x * mu_x
    var_y = _filter_valid(y * y, k) - mu_y * mu_y
    cov = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def _projection_features(images, seed, dim=64):
    """Fixed seeded random conv projection, global-average pooled."""
    images = [np.asarray(img, dtype=np.float32) for img in images]
    c_in = images[0].shape[2]
    rng = np.random.default_rng(seed)
    w1 = (rng.standard_normal((3, 3, c_in, 32)) / np.sqrt(9 * c_in)).astype(np.float32)
    w2 = (rng.standard_normal((3, 3, 32, dim)) / np.sqrt(9 * 32)).astype(np.float32)
    feats = np.empty((len(images), dim), dtype=np.float64)
    with da.no_grad():
        for i, img in enumerate(images):
            h = da.relu(da.conv2d(da.DiffArray(img[None]), da.DiffArray(w1), stride=2))
            h = da.relu(da.conv2d(h, da.DiffArray(w2), stride=2))
            feats[i] = h.data[0].mean(axis=(0, 1))
    return feats


def rp_frechet(set_a, set_b, seed=0):
    """Frechet distance between feature statistics of two image sets."""
    fa = _projection_features(list(set_a), seed)
    fb = _projection_features(list(set_b), seed)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)

    def distance(ca, cb):
        root, _ = linalg.sqrtm(ca @ cb, disp=False)
        root = np.real(root)
        return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2.0 * root))

    value = distance(cov_a, cov_b)
    if not np.isfinite(value):
        warnings.warn("rp_frechet: singular covariance, adding 1e-6 jitter", stacklevel=2)
        eye = np.eye(cov_a.shape[0])
        value = distance(cov_a + 1e-6 * eye, cov_b + 1e-6 * eye)
    return float(value) if value > 0 else 0.0


def sliced_wasserstein(points_a, points_b, n_projections=128, seed=0):
    """Average 1D Wasserstein-1 distance over random projections."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    qs = np.linspace(0.0, 1.0, 256)
    total = 0.0
    for d in dirs:
        pa = np.quantile(a @ d, qs)
        pb = np.quantile(b @ d, qs)
        total += np.abs(pa - pb).mean()
    return total / n_projections


def image_grid(rows, path, upscale_to=None):
    """Save a montage; each row is a list of images, cells nearest-upscaled."""
    cell_h = upscale_to or max(img.shape[0] for row in rows for img in row)
    cell_w = upscale_to or max(img.shape[1] for row in rows for img in row)
    gap = 2
    n_cols = max(len(row) for row in rows)
    canvas = np.ones((len(rows) * (cell_h + gap) - gap,
                      n_cols * (cell_w + gap) - gap, 3), dtype=np.float32)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            img = np.asarray(img, dtype=np.float32)
            if img.ndim == 2:
                img = img[:, :, None]
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            if img.shape[:2] != (cell_h, cell_w):
                with da.no_grad():
                    img = da.resize_nearest(da.DiffArray(img[None]), (cell_h, cell_w)).data[0]
            y, x = r * (cell_h + gap), c * (cell_w + gap)
            canvas[y:y + cell_h, x:x + cell_w] = np.clip(img, 0, 1)
    imaging.save_png(path, canvas)


REPORT_HEADER = ("# flowsplat eval report: one line per image 'name psnr ssim'\n"
                 "# rpfd is a seeded random-projection Frechet distance; its numbers are\n"
                 "# NOT comparable to published FID, and the perceptual proxy is NOT LPIPS\n")


def evaluate_model(model, images, scale, nfe=1, seed=0, report_path=None, grid_path=None,
                   metrics=("psnr", "ssim", "rpfd")):
    """Run inference over ``images`` and collect the metric report."""
    rows, grid_rows = [], []
    outputs, targets = [], []
    seconds = []
    bicubic_psnrs = []
    for i, hr in enumerate(images):
        pair = imaging.degrade(hr, scale)
        res = model.infer(pair.lr, scale, nfe=nfe, seed=seed + i)
        gt = hr if res.image.shape == hr.shape else imaging.bicubic_resize(hr, *res.out_hw)
        baseline = imaging.bicubic_resize(pair.lr, *res.out_hw)
        entry = {"name": f"img{i:03d}"}
        if "psnr" in metrics:
            entry["psnr"] = psnr(res.image, gt)
            bicubic_psnrs.append(psnr(baseline, gt))
        if "ssim" in metrics:
            entry["ssim"] = ssim(res.image, gt)
        rows.append(entry)
        outputs.append(res.image)
        targets.append(np.asarray(gt))
        seconds.append(res.seconds)
        if grid_path and i < 6:
            grid_rows.append([pair.lr, baseline, res.image, np.asarray(gt)])
    summary = {
        "scale": scale,
        "nfe": nfe,
        "sec_per_image": float(np.mean(seconds)),
        "psnr": float(np.mean([r["psnr"] for r in rows])) if "psnr" in metrics else None,
        "ssim": float(np.mean([r["ssim"] for r in rows])) if "ssim" in metrics else None,
        "bicubic_psnr": float(np.mean(bicubic_psnrs)) if bicubic_psnrs else None,
        "rpfd": rp_frechet(outputs, targets, seed=seed) if "rpfd" in metrics else None,
        "rows": rows,
    }
    if report_path:
        with open(report_path, "w") as f:
            f.write(REPORT_HEADER)
            f.write(f"# scale={scale} nfe={nfe} seed={seed}\n")
            for r in rows:
                f.write(f"{r['name']} {r.get('psnr', float('nan')):.4f} "
                        f"{r.get('ssim', float('nan')):.6f}\n")
            f.write(f"rpfd {summary['rpfd'] if summary['rpfd'] is not None else float('nan'):.6f} "
                    f"nfe {nfe} sec_per_image {summary['sec_per_image']:.4f}\n")
    if grid_path and grid_rows:
        image_grid(grid_rows, grid_path)
    return summary


def nfe_sweep(model, images, scale, nfes, seed=0, out_path=None):
    """Quality/runtime trade-off across sampler step counts."""
    rows = []
    for nfe in nfes:
        summary = evaluate_model(model, images, scale, nfe=nfe, seed=seed,
                                 metrics=("psnr", "ssim"))
        rows.append({"nfe": nfe, "psnr": summary["psnr"], "ssim": summary["ssim"],
                     "sec_per_image": summary["sec_per_image"]})
    if out_path:
        with open(out_path, "w") as f:
            f.write("# nfe psnr ssim sec_per_image\n")
            for r in rows:
                f.write(f"{r['nfe']} {r['psnr']:.4f} {r['ssim']:.6f} {r['sec_per_image']:.4f}\n")
    return rows


# -- oracle suites -------------------------------------------------------------

def oracle_render(n_fields=20, side=16, tol=1e-5, echo=print):
    """Windowed renderer against the dense float64 reference."""
    worst = 0.0
    for trial in range(n_fields):
        rng = np.random.default_rng(1000 + trial)
        bank = gsfield.GaussianBank(100, rng, sigma_range=(0.3, 0.8))
        assign = gsfield.AssignmentHead(8, 100, rng)
        resid = gsfield.ResidualHead(8, 3, rng)
        field = da.DiffArray(rng.standard_normal((1, side, side, 8)).astype(np.float32))
        out_w = gsfield.render_windowed(field, bank, assign, resid, window=7)
        out_b = gsfield.render_bruteforce(field, bank, assign, resid)
        worst = max(worst, float(np.abs(out_w.data - out_b).max()))
    ok = worst <= tol
    echo(f"render oracle: {n_fields} fields {side}x{side}, worst |diff| {worst:.3e} "
         f"(tol {tol:.0e}) -> {'PASS' if ok else 'FAIL'}")
    return ok


def oracle_grad(echo=print):
    """Finite-difference checks over the differentiable surfaces."""
    rng = np.random.default_rng(3)
    ok = True

    bank = gsfield.GaussianBank(6, rng, sigma_range=(0.4, 0.9), dtype=np.float64)
    assign = gsfield.AssignmentHead(4, 6, rng, dtype=np.float64)
    resid = gsfield.ResidualHead(4, 3, rng, dtype=np.float64)
    field = da.DiffArray(rng.standard_normal((1, 6, 6, 4)), requires_grad=True, name="field")

    def render_loss():
        out = gsfield.render_windowed(field, bank, assign, resid, window=5)
        return da.mean_(da.mul(out, out))

    rep = grad_check(render_loss, [("field", field)] + bank.named_params("bank/")
                     + assign.named_params("assign/") + resid.named_params("residual/"),
                     n_samples=120, rng=np.random.default_rng(11))
    echo(f"render grads: {rep}")
    ok &= rep.passed

    vel = flowcore.VelocityNet(3, 3, widths=(8, 12), rng=rng, dtype=np.float64)
    state = da.DiffArray(rng.standard_normal((2, 4, 4, 3)))
    cond = da.DiffArray(rng.standard_normal((2, 4, 4, 3)))
    target = da.DiffArray(rng.standard_normal((2, 4, 4, 3)))

    def vel_loss():
        return flowcore.fm_loss(vel, state, target, 0.3, cond)

    rep = grad_check(vel_loss, vel.named_params("velocity/"), n_samples=120,
                     rng=np.random.default_rng(12))
    echo(f"velocity grads: {rep}")
    ok &= rep.passed

    enc = DetailEncoder(2, 3, downsample=4, widths=(6, 8), rng=rng, dtype=np.float64)
    fus = FusionDecoder(3, 2, field_channels=4, downsample=4, width=6, rng=rng, dtype=np.float64)
    resid2 = gsfield.ResidualHead(4, 2, rng, dtype=np.float64)
    hr = da.DiffArray(rng.uniform(0, 1, (1, 8, 8, 2)))
    lr = da.DiffArray(rng.uniform(0, 1, (1, 4, 4, 2)))
    lr_up = da.DiffArray(rng.uniform(0, 1, (1, 8, 8, 2)))

    def stage1_loss():
        latent = enc.encode(hr, lr_up)
        fld = fus(latent.value, lr, 2.0, out_hw=(8, 8))
        delta = gsfield.render_windowed(fld, bank, assign, resid2, window=5)
        sr = gsfield.compose_sr(lr_up, delta)
        recon = da.mean_(da.absolute(sr - hr))
        return recon + 1e-6 * kl_divergence(latent.mean, latent.log_var)

    rep = grad_check(stage1_loss, enc.named_params("encoder/"), n_samples=100,
                     rng=np.random.default_rng(13))
    echo(f"stage-1 loss wrt encoder: {rep}")
    ok &= rep.passed
    return ok


def oracle_ode(echo=print):
    """Euler sampler identities on analytic velocity fields."""
    rng = np.random.default_rng(5)
    z0 = da.DiffArray(rng.standard_normal((2, 1, 1, 2)))
    cond = da.DiffArray(np.zeros((2, 1, 1, 2), dtype=np.float32))
    k = rng.standard_normal((2, 1, 1, 2)).astype(np.float32)

    def const_field(z, t, c, step=0.0):
        return da.DiffArray(k)

    results = [flowcore.euler_sample(const_field, z0, cond, n).data for n in (1, 2, 4, 128)]
    const_ok = all(np.allclose(r, z0.data + k, atol=1e-6) for r in results)
    echo(f"constant field: n-independent across NFE 1/2/4/128 -> {'PASS' if const_ok else 'FAIL'}")

    def linear_field(z, t, c, step=0.0):
        return z

    lin_ok = True
    for n in (1, 4, 64):
        out = flowcore.euler_sample(linear_field, z0, cond, n).data
        expect = z0.data * (1.0 + 1.0 / n) ** n
        lin_ok &= np.allclose(out, expect, rtol=1e-5)
    echo(f"linear field: matches (1 + 1/n)^n compounding -> {'PASS' if lin_ok else 'FAIL'}")
    return const_ok and lin_ok


# -- CLI ------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(prog="flowsplat",
                                     description="continuous-scale SR: train, infer, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--profile", default="desk")
    p.add_argument("--config", default=None, help="explicit config YAML (overrides --profile)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--steps", type=int, default=None, help="override configured step count")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--nfe", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="metric report over the held-out split")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--metrics", default="psnr,ssim,rpfd")
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--nfe", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.add_argument("--grid", default=None)
    p.add_argument("--count", type=int, default=None, help="cap the number of images")

    p = sub.add_parser("oracle", help="run a self-contained oracle suite")
    p.add_argument("--suite", choices=("render", "grad", "ode"), required=True)

    p = sub.add_parser("bench", help="NFE sweep on a trained model")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--nfe-sweep", default="1,2,4,8,128")
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", default=None)

    p = sub.add_parser("dump-contribs", help="per-query top splat contributors (debug)")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    return parser


def _cmd_train(args):
    config = (pipeline.TrainConfig.from_yaml(args.config) if args.config
              else pipeline.TrainConfig.profile(args.profile))
    progress = None if args.quiet else (lambda r: print(
        " ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items())))
    trainer_cls = pipeline.Stage1Trainer if args.stage == 1 else pipeline.Stage2Trainer
    trainer = trainer_cls(config, args.run_dir)
    summary = trainer.train(steps=args.steps, progress=progress)
    print(f"stage {args.stage} done: {summary}")
    return 0


def _cmd_infer(args):
    model = pipeline.SRModel.load(args.run_dir)
    lr = imaging.load_png(args.input)
    res = model.infer(lr, args.scale, nfe=args.nfe, seed=args.seed)
    imaging.save_png(args.output, res.image)
    note = " (extrapolated scale)" if res.extrapolated else ""
    print(f"wrote {args.output}: {res.out_hw[0]}x{res.out_hw[1]}, nfe={res.nfe}, "
          f"{res.seconds:.3f}s{note}")
    return 0


def _cmd_eval(args):
    model = pipeline.SRModel.load(args.run_dir)
    _, _, test_images = pipeline.load_dataset(model.config)
    if args.count:
        test_images = test_images[:args.count]
    metrics = tuple(m.strip() for m in args.metrics.split(","))
    summary = evaluate_model(model, test_images, args.scale, nfe=args.nfe, seed=args.seed,
                             report_path=args.report, grid_path=args.grid, metrics=metrics)
    print(f"eval scale={args.scale} nfe={args.nfe}: psnr={summary['psnr']} "
          f"ssim={summary['ssim']} rpfd={summary['rpfd']} "
          f"bicubic_psnr={summary['bicubic_psnr']} sec/img={summary['sec_per_image']:.3f}")
    return 0


def _cmd_oracle(args):
    suite = {"render": oracle_render, "grad": oracle_grad, "ode": oracle_ode}[args.suite]
    return 0 if suite() else 1


def _cmd_bench(args):
    model = pipeline.SRModel.load(args.run_dir)
    _, _, test_images = pipeline.load_dataset(model.config)
    nfes = [int(x) for x in args.nfe_sweep.split(",")]
    rows = nfe_sweep(model, test_images[:args.count], args.scale, nfes, seed=args.seed,
                     out_path=args.out)
    for r in rows:
        print(f"nfe={r['nfe']:<4d} psnr={r['psnr']:.3f} ssim={r['ssim']:.4f} "
              f"sec/img={r['sec_per_image']:.3f}")
    return 0


def _cmd_dump_contribs(args):
    rng = np.random.default_rng(args.seed)
    bank = gsfield.GaussianBank(16, rng)
    assign = gsfield.AssignmentHead(4, 16, rng)
    field = rng.standard_normal((1, args.size, args.size, 4)).astype(np.float32)
    stream = sys.stdout if args.out == "-" else open(args.out, "w")
    try:
        gsfield.dump_contributions(field, bank, assign, stream, k=args.topk)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "oracle": _cmd_oracle,
    "bench": _cmd_bench,
    "dump-contribs": _cmd_dump_contribs,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as err:  # single-line cause, nonzero exit
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
