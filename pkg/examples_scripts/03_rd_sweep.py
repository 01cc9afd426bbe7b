"""Rate-distortion table for a set of checkpoints.

    python3 examples_scripts/03_rd_sweep.py a.ckpt b.ckpt ...

Writes rd.csv and rd.json with one row per checkpoint (and per
internal-learning setting), sorted by bits per pixel. Every row is a real
encode of the same synthetic clips; nothing is interpolated.
"""
import sys

import numpy as np

from cevc.codec import checkpoint_load
from cevc.harness import gen_synthetic_video, rd_sweep, write_rd_table

paths = sys.argv[1:] or ["example.ckpt"]
models = [checkpoint_load(p) for p in paths]
video = np.concatenate([gen_synthetic_video(seed=s, frames=4) for s in (11, 12)])

rows = rd_sweep(models, video, internal_learning=True, labels=paths)
write_rd_table(rows, "rd.csv", "rd.json")
print(f"{'label':20s} {'IL':>3s} {'bpp':>8s} {'PSNR':>7s} {'MS-SSIM dB':>10s}")
for r in rows:
    print(f"{r.label:20s} {'yes' if r.internal_learning else 'no':>3s} {r.bpp:8.4f} {r.psnr:7.2f} {r.log_msssim:10.2f}")
