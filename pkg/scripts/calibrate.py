"""Calibration: quality-vs-steps for the desk profile (not part of the package)."""
import sys
import time

import numpy as np

from flowsplat import bench, imaging, pipeline
from flowsplat.pipeline import SRModel, Stage1Trainer, Stage2Trainer, TrainConfig


def eval_quality(model, images, scale, nfe=1, seed0=0):
    gains, psnrs, base = [], [], []
    for i, hr in enumerate(images):
        pair = imaging.degrade(hr, scale)
        res = model.infer(pair.lr, scale, nfe=nfe, seed=seed0 + i)
        gt = hr if res.image.shape == hr.shape else imaging.bicubic_resize(hr, *res.out_hw)
        bas = imaging.bicubic_resize(pair.lr, *res.out_hw)
        p = bench.psnr(res.image, gt)
        b = bench.psnr(bas, gt)
        psnrs.append(p); base.append(b); gains.append(p - b)
    return float(np.mean(psnrs)), float(np.mean(base)), float(np.mean(gains))


def eval_stage1(trainer, images, scale):
    gains = []
    for hr in images:
        pair = imaging.degrade(hr, scale)
        sr, hr_t, _ = None, None, None
        from flowsplat import diffarray as da
        with da.no_grad():
            s, h, losses = trainer._forward_losses(pair.hr[None], pair.lr[None],
                                                   pair.lr_up[None], scale, sample_latent=False)
        img = np.clip(s.data[0], 0, 1)
        gains.append(bench.psnr(img, pair.hr) - bench.psnr(pair.lr_up, pair.hr))
    return float(np.mean(gains))


def main():
    run = sys.argv[1]
    s1_steps = int(sys.argv[2])
    s2_steps = int(sys.argv[3])
    cfg = TrainConfig.profile("desk")
    cfg.stage1_steps = s1_steps
    cfg.stage2_steps = s2_steps
    train, val, test = pipeline.load_dataset(cfg)
    print(f"dataset: {len(train)} train / {len(val)} val / {len(test)} test", flush=True)

    t0 = time.perf_counter()
    s1 = Stage1Trainer(cfg, run, images=(train, val, test))
    for k in range(s1_steps):
        s1.step()
        if (k + 1) % 750 == 0:
            g2 = eval_stage1(s1, test, 2.0)
            g4 = eval_stage1(s1, test, 4.0)
            print(f"[{time.perf_counter()-t0:7.1f}s] stage1 step {k+1}: recon gain s2={g2:+.2f} dB s4={g4:+.2f} dB", flush=True)
            score = s1.validation_score()
            if score < s1.best_val:
                s1.best_val = score
                s1.best_state = {n: p.data.copy() for n, p in s1.parts.stage1_named()}
    if s1.best_state is not None:
        for n, p in s1.parts.stage1_named():
            p.data = s1.best_state[n]
    s1.save()
    print(f"stage1 done in {time.perf_counter()-t0:.0f}s best_val={s1.best_val:.4f}", flush=True)

    t0 = time.perf_counter()
    s2 = Stage2Trainer(cfg, run, images=(train, val, test))
    for k in range(s2_steps):
        s2.step()
        if (k + 1) % 750 == 0:
            s2.save()
            model = SRModel.load(run)
            p2, b2, g2 = eval_quality(model, test, 2.0)
            p4, b4, g4 = eval_quality(model, test, 4.0)
            p2_128, _, _ = eval_quality(model, test, 2.0, nfe=128)
            print(f"[{time.perf_counter()-t0:7.1f}s] stage2 step {k+1}: s2 {p2:.2f} (bicubic {b2:.2f}, gain {g2:+.2f}) "
                  f"s4 {p4:.2f} (bicubic {b4:.2f}, gain {g4:+.2f}) nfe128 s2 {p2_128:.2f}", flush=True)
    s2.save()
    print(f"stage2 done in {time.perf_counter()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
