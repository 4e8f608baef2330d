"""From polar rays to the bird's-eye-view grid.

Run: python demos/02_polar_resampling.py
"""

import numpy as np

from polarbev.geometry import BevGrid, CameraIntrinsics, build_polar_grid, max_range, polar_to_cartesian, radial_bands

cam = CameraIntrinsics(64.0, 64.0, 32.0, 16.0)  # 64x64 image, horizon at row 16
bev = BevGrid(32, 32, 0.5)  # 16 m ahead, 8 m to either side
print("farthest BEV cell centre: %.2f m" % max_range(bev))

# Two scales split the range: the finer features (stride 4) cover the far band.
bands = radial_bands(1.0, max_range(bev), 2)
print("radial bands, fine scale first:", [(round(a, 2), round(b, 2)) for a, b in bands])
grids = (build_polar_grid(16, cam, 16, *bands[0], stride=4),
         build_polar_grid(8, cam, 16, *bands[1], stride=8))
for g in grids:
    print(f"  {g.num_angles} rays x {g.num_radial} bins, {g.bin_width:.3f} m per bin, "
          f"angles {np.degrees(g.angles[0]):.1f} to {np.degrees(g.angles[-1]):.1f} deg")

# Put a smooth function of angle and range on each ray grid and resample.
polar = [np.sin(3 * g.angle_array)[None, :, None] + 0.1 * g.bin_centers[None, None, :] for g in grids]
out, mask = polar_to_cartesian(polar, grids, bev)
theta, rho = bev.polar_coords()
truth = np.sin(3 * theta) + 0.1 * rho
err = np.abs(out.data[0] - truth)[mask > 0]
print(f"\n{int(mask.sum())} of {mask.size} cells in view; mean error {err.mean():.4f}, max {err.max():.4f}")
print("(the max sits at band edges and the outermost rays, where sampling clamps)")

# The field of view, far rows on top, camera at the bottom centre.
print()
for row in mask[::-1]:
    print("".join("#" if v else "." for v in row))
