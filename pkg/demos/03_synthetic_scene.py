"""A synthetic street: boxes on a ground plane, their image and their BEV labels.

Run: python demos/03_synthetic_scene.py [seed]
"""

import sys

import numpy as np

from polarbev.model import ModelConfig
from polarbev.synthdata import CAR, CLASS_NAMES, PEDESTRIAN, SceneSpec, generate_samples

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 3
spec = SceneSpec()
grids = ModelConfig().polar_grids(spec.camera)
s = generate_samples(seed, 1, spec, grids)[0]

for o in s.scene.objects:
    x0, x1, z0, z1 = o.bounds
    print(f"{CLASS_NAMES[o.cls]:10s} x [{x0:5.1f}, {x1:5.1f}]  z [{z0:5.1f}, {z1:5.1f}]  height {o.height} m")

# The image, one character per 2x2 pixels: sky ' ', ground '.', car 'C', pedestrian 'P'.
img = s.image[:, ::2, ::2]
def pixel(rgb):
    r, g, b = rgb
    if b > 0.9 and r < 0.1:
        return "C"
    if r > 0.9 and b < 0.1:
        return "P"
    return " " if b > 0.95 else "."
print("\nimage")
for v in range(img.shape[1]):
    print("".join(pixel(img[:, v, u]) for u in range(img.shape[2])))

# Ground truth, far rows on top: '#' car, 'o' pedestrian, '.' visible ground,
# '-' in view but hidden behind an object, ' ' outside the field of view.
print("\nbird's-eye view")
for iz in reversed(range(spec.bev_z)):
    line = ""
    for ix in range(spec.bev_x):
        if s.gt[CAR, iz, ix]:
            line += "#"
        elif s.gt[PEDESTRIAN, iz, ix]:
            line += "o"
        elif s.visibility[iz, ix]:
            line += "."
        elif s.gt[0, iz, ix]:
            line += "-"
        else:
            line += " "
    print(line)
print(f"\nvisible cells: {int(s.visibility.sum())}, hidden: {int((s.gt[0] - s.visibility).sum())}")
