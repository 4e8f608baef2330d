"""The command-line workflow end to end in a scratch directory: gen, train, eval, infer.

Uses a small 32x32 camera and an 8x12 BEV grid so it runs in seconds. The
same commands work from a shell as ``polarbev gen ...`` and so on.

Run: python demos/05_cli_workflow.py
"""

import tempfile
from pathlib import Path

from polarbev.cli import main
from polarbev.dataset import read_pgm

SPEC = """\
image_height = 32
image_width = 32
fx = 32.0
fy = 32.0
cx = 16.0
cy = 8.0
bev_z = 8
bev_x = 12
cell_size = 1.0
z_range = 2.0, 8.0
pedestrian_z_range = 2.0, 6.0
cars = 1, 1
pedestrians = 0, 2
"""

CONFIG = """\
# model keys, plus train.* keys for the optimiser
image_height = 32
image_width = 32
channels = 16
heads = 2
radial_bins = 4, 4
bev_z = 8
bev_x = 12
cell_size = 1.0
attention.mode = soft
train.epochs = 25
train.batch_size = 4
"""

work = Path(tempfile.mkdtemp(prefix="polarbev_"))
(work / "spec.txt").write_text(SPEC)
(work / "model.txt").write_text(CONFIG)
print("working in", work)


def run(*argv):
    print("\n$ polarbev " + " ".join(str(a) for a in argv), flush=True)
    code = main([str(a) for a in argv])
    print("exit status", code, flush=True)
    return code


run("gen", "--spec", work / "spec.txt", "--config", work / "model.txt", "--out", work / "data", "--count", 16, "--seed", 1)
run("train", "--config", work / "model.txt", "--data", work / "data", "--out", work / "run", "--seed", 0)
print((work / "run" / "loss.csv").read_text())
run("eval", "--checkpoint", work / "run" / "checkpoint.bevt", "--data", work / "data", "--out", work / "eval")
print((work / "eval" / "metrics.csv").read_text())
run("infer", "--checkpoint", work / "run" / "checkpoint.bevt", "--sample", work / "data" / "sample_000000",
    "--out", work / "maps")
car = read_pgm(work / "maps" / "car.pgm")
print("car.pgm is", car.shape[1], "x", car.shape[0], "(X by Z); far rows on top:")
for row in car[::-1]:
    print(" ".join(f"{v:3d}" for v in row))

# malformed input gives a message on stderr and a nonzero status
(work / "bad.txt").write_text("attention.mode = sideways\n")
run("train", "--config", work / "bad.txt", "--data", work / "data", "--out", work / "bad")
