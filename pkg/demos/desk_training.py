"""Train one model for every scale in (1, 4] on procedural textures.

The run uses configs/desk.cfg and caches its checkpoint and timing record in
artifacts/desk; a second invocation only evaluates. Expect most of an hour
on a single CPU core for a fresh run.

    python demos/desk_training.py [--retrain]
"""
import logging
import sys
from pathlib import Path

from arbscale import desk
from arbscale.evaluation import eval_images

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = Path(__file__).resolve().parents[1]
state, record = desk.ensure(root / "configs" / "desk.cfg", root / "artifacts" / "desk",
                            retrain="--retrain" in sys.argv)
print(f"{record['steps']} steps, {float(record['wall_time_s']) / 60:.1f} min")

report = eval_images(state, desk.heldout_images(), [1.6, 2.0, 2.75, 3.5, 4.0], dataset="desk-heldout")
print(f"{'s':>5} {'ours':>8} {'bicubic':>8} {'gain':>6} {'LR SSIM':>8}")
for r in report.rows:
    print(f"{r.s:5.2f} {r.psnr_hr:8.2f} {r.psnr_baseline:8.2f} {r.psnr_hr - r.psnr_baseline:+6.2f} "
          f"{r.ssim_lr_vs_bicubic:8.4f}")
