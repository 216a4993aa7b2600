"""Fast stage-1-only probe: recon gains at fixed scales during training."""
import sys
import time

import numpy as np

from flowsplat import bench, imaging, pipeline
from flowsplat import diffarray as da
from flowsplat.pipeline import Stage1Trainer, TrainConfig


def recon_gain(tr, images, scale):
    gains = []
    for hr in images:
        pair = imaging.degrade(hr, scale)
        with da.no_grad():
            s, _, _ = tr._forward_losses(pair.hr[None], pair.lr[None], pair.lr_up[None],
                                         scale, sample_latent=False)
        gains.append(bench.psnr(np.clip(s.data[0], 0, 1), pair.hr)
                     - bench.psnr(pair.lr_up, pair.hr))
    return float(np.mean(gains))


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
    cfg = TrainConfig.profile("desk")
    cfg.adv_warmup_fraction = 1.0  # probe the plain objective
    train, val, test = pipeline.load_dataset(cfg)
    tr = Stage1Trainer(cfg, "/tmp/s1probe", images=(train, val, test))
    t0 = time.perf_counter()
    for k in range(steps):
        r = tr.step()
        if (k + 1) % 300 == 0:
            gains = {s: recon_gain(tr, test, s) for s in (1.5, 2.0, 4.0)}
            print(f"[{time.perf_counter()-t0:6.0f}s] step {k+1} l1={r['l1']:.4f} "
                  + " ".join(f"s{s}={g:+.2f}" for s, g in gains.items()), flush=True)


if __name__ == "__main__":
    main()
