"""Train the desk-scale model on synthetic scenes and look at a prediction.

The defaults are small so the script finishes in about a minute. The full toy
setting is ``--samples 200 --epochs 60`` (several minutes on one core).

Run: python demos/04_train_toy.py [--samples N] [--epochs E] [--mode soft|mono_down|mono_up]
"""

import argparse

import numpy as np

from polarbev.model import ModelConfig
from polarbev.synthdata import CAR, PEDESTRIAN, SceneSpec, generate_samples
from polarbev.train import TrainConfig, evaluate, fit, predict

ap = argparse.ArgumentParser()
ap.add_argument("--samples", type=int, default=48)
ap.add_argument("--epochs", type=int, default=12)
ap.add_argument("--mode", default="soft", choices=("soft", "mono_down", "mono_up"))
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

spec = SceneSpec()
mcfg = ModelConfig(attention_mode=args.mode, seed=args.seed)
samples = generate_samples(args.seed, args.samples, spec, mcfg.polar_grids(spec.camera))
print(f"{len(samples)} samples, {args.epochs} epochs, {args.mode} attention")

tcfg = TrainConfig(epochs=args.epochs, seed=args.seed)
model, hist, metrics = fit(mcfg, samples, tcfg)
print(f"trained in {hist.seconds:.1f}s")
for i in sorted({0, len(hist.loss) // 2, len(hist.loss) - 1}):
    print(f"  epoch {i + 1:3d}  loss {hist.loss[i]:.4f}")
print("IoU on the training split:", {k: round(v, 3) for k, v in metrics.items()})

# Side by side for the first sample, far rows on top:
# truth on the left, prediction (probability >= 0.5) on the right;
# '-' marks cells in view but hidden, which the scores ignore.
probs, _ = predict(model, samples[:1])
s = samples[0]
def cell(car, ped, vis, fov):
    if not fov:
        return " "
    return "#" if car else "o" if ped else "." if vis else "-"
print("\ntruth" + " " * 29 + "prediction")
for iz in reversed(range(spec.bev_z)):
    fov = s.gt[0, iz] > 0
    left = "".join(cell(s.gt[CAR, iz, ix], s.gt[PEDESTRIAN, iz, ix], s.visibility[iz, ix], fov[ix])
                   for ix in range(spec.bev_x))
    right = "".join(cell(probs[0, CAR, iz, ix] >= 0.5, probs[0, PEDESTRIAN, iz, ix] >= 0.5, s.visibility[iz, ix],
                         fov[ix]) for ix in range(spec.bev_x))
    print(left + "  " + right)

held_out = generate_samples(args.seed + 1000, 16, spec, mcfg.polar_grids(spec.camera))
print("\nIoU on 16 unseen samples:", {k: round(v, 3) for k, v in evaluate(model, held_out).items()})
