"""Camera geometry: image columns <-> polar rays, and polar -> BEV resampling.

Conventions: the camera sits at the origin of the ground plane looking along
+z, with +x to the right. BEV arrays are indexed ``[z_index, x_index]``; row 0
is the band nearest the camera and the camera is centred on the x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .numerics import DomainError, Tensor


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m) -> "CameraIntrinsics":
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        return cls(float(m[0, 0]), float(m[1, 1]), float(m[0, 2]), float(m[1, 2]))

    def scaled(self, stride: float) -> "CameraIntrinsics":
        """Intrinsics of a feature map downsampled by ``stride``."""
        return CameraIntrinsics(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride)

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.cx <= width and 0 <= self.cy <= height):
            raise DomainError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image")


def write_intrinsics(path, cam: CameraIntrinsics) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in cam.matrix]
    Path(path).write_text("\n".join(rows) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    vals = Path(path).read_text().split()
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {len(vals)}")
    return CameraIntrinsics.from_matrix([float(v) for v in vals])


def column_to_angle(u, cam: CameraIntrinsics):
    """Azimuth of the ray through the centre of column ``u`` (radians, right positive)."""
    return np.arctan((np.asarray(u, dtype=np.float64) + 0.5 - cam.cx) / cam.fx)


@dataclass(frozen=True)
class PolarGrid:
    num_angles: int
    num_radial: int
    r_min: float
    r_max: float
    angles: tuple = field(repr=False)

    @property
    def bin_width(self) -> float:
        return (self.r_max - self.r_min) / self.num_radial

    @property
    def bin_centers(self) -> np.ndarray:
        return self.r_min + (np.arange(self.num_radial) + 0.5) * self.bin_width

    @property
    def angle_array(self) -> np.ndarray:
        return np.asarray(self.angles)


def build_polar_grid(width: int, cam: CameraIntrinsics, num_radial: int, r_min: float, r_max: float,
                     stride: float = 1.0) -> PolarGrid:
    """One ray per feature column; ``cam`` is the full-resolution camera, rescaled by ``stride``."""
    if r_max <= r_min:
        raise DomainError(f"r_max ({r_max}) must exceed r_min ({r_min})")
    if num_radial < 1 or width < 1:
        raise DomainError("grid extents must be positive")
    angles = column_to_angle(np.arange(width), cam.scaled(stride))
    return PolarGrid(width, num_radial, float(r_min), float(r_max), tuple(float(a) for a in angles))


@dataclass(frozen=True)
class BevGrid:
    Z: int
    X: int
    cell_size: float

    @property
    def forward_range(self) -> float:
        return self.Z * self.cell_size

    @property
    def lateral_range(self) -> float:
        return self.X * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, z) metric coordinates of every cell centre, each shaped (Z, X)."""
        xs = (np.arange(self.X) + 0.5 - self.X / 2.0) * self.cell_size
        zs = (np.arange(self.Z) + 0.5) * self.cell_size
        return np.meshgrid(xs, zs)

    def polar_coords(self) -> tuple[np.ndarray, np.ndarray]:
        x, z = self.cell_centers()
        return np.arctan2(x, z), np.hypot(x, z)


def fov_mask(pgrid: PolarGrid, bgrid: BevGrid) -> np.ndarray:
    """Cells whose centre angle lies between the outermost rays and range within the grid."""
    theta, rho = bgrid.polar_coords()
    a = pgrid.angle_array
    return (theta >= a[0]) & (theta <= a[-1]) & (rho >= pgrid.r_min) & (rho <= pgrid.r_max)


def _resampling_matrix(pgrid: PolarGrid, bgrid: BevGrid, cells: np.ndarray) -> sp.csr_matrix:
    W, R = pgrid.num_angles, pgrid.num_radial
    theta, rho = bgrid.polar_coords()
    cell_idx = np.flatnonzero(cells.reshape(-1))
    th = theta.reshape(-1)[cell_idx]
    rh = rho.reshape(-1)[cell_idx]
    a = pgrid.angle_array
    # angles are not uniform in column index: invert the monotone table
    uf = np.interp(th, a, np.arange(W, dtype=np.float64)) if W > 1 else np.zeros_like(th)
    kf = np.clip((rh - pgrid.r_min) / pgrid.bin_width - 0.5, 0.0, R - 1.0)
    u0 = np.minimum(np.floor(uf).astype(int), max(W - 2, 0))
    k0 = np.minimum(np.floor(kf).astype(int), max(R - 2, 0))
    fu = uf - u0 if W > 1 else np.zeros_like(uf)
    fk = kf - k0 if R > 1 else np.zeros_like(kf)
    rows, cols, vals = [], [], []
    for du, wu in ((0, 1.0 - fu), (1, fu)):
        if du and W == 1:
            continue
        for dk, wk in ((0, 1.0 - fk), (1, fk)):
            if dk and R == 1:
                continue
            rows.append((u0 + du) * R + (k0 + dk))
            cols.append(cell_idx)
            vals.append(wu * wk)
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(W * R, bgrid.Z * bgrid.X))
    return M.tocsr()


@lru_cache(maxsize=64)
def resampling_plan(pgrids: tuple[PolarGrid, ...], bgrid: BevGrid) -> tuple[tuple[sp.csr_matrix, ...], np.ndarray]:
    """Bilinear (angle, range) resampling matrices for a set of radial bands.

    Each BEV cell is served by the first grid whose field of view covers it, so
    bands sharing a boundary never double count. Returns one ``(W*r, Z*X)``
    matrix per grid and the union field-of-view mask.
    """
    taken = np.zeros((bgrid.Z, bgrid.X), dtype=bool)
    mats = []
    for g in pgrids:
        cells = fov_mask(g, bgrid) & ~taken
        taken |= cells
        mats.append(_resampling_matrix(g, bgrid, cells))
    return tuple(mats), taken


def polar_to_cartesian(polar, pgrid, bgrid: BevGrid) -> tuple[Tensor, np.ndarray]:
    """Resample polar maps ``(..., C, W, r)`` onto the BEV grid.

    ``pgrid`` may be one grid or a sequence of radial bands; with bands,
    ``polar`` is a matching sequence of maps and the result is their fused
    BEV map. Cells outside the field of view are zero and masked out.
    """
    if isinstance(pgrid, PolarGrid):
        pgrids, maps = (pgrid,), [polar]
    else:
        pgrids, maps = tuple(pgrid), list(polar)
    mats, mask = resampling_plan(pgrids, bgrid)
    out = None
    for M, pm in zip(mats, maps):
        pm = nx.as_tensor(pm)
        flat = nx.reshape(pm, pm.shape[:-2] + (pm.shape[-2] * pm.shape[-1],))
        part = nx.sparse_matmul(flat, M)
        out = part if out is None else nx.add(out, part)
    out = nx.reshape(out, out.shape[:-1] + (bgrid.Z, bgrid.X))
    return out, mask.astype(np.float64)


def radial_bands(r_min: float, r_max: float, n_scales: int, split: float | None = None) -> list[tuple[float, float]]:
    """Radial range per scale, finest scale first: the finest covers the far band.

    Two scales split at ``split`` (default: metric midpoint); more scales split
    the range uniformly.
    """
    if n_scales == 1:
        return [(r_min, r_max)]
    if n_scales == 2:
        s = 0.5 * (r_min + r_max) if split is None else split
        if not r_min < s < r_max:
            raise DomainError(f"band split {s} outside ({r_min}, {r_max})")
        return [(s, r_max), (r_min, s)]
    edges = np.linspace(r_min, r_max, n_scales + 1)
    return [(float(edges[i]), float(edges[i + 1])) for i in reversed(range(n_scales))]


def max_range(bgrid: BevGrid) -> float:
    return math.hypot(bgrid.forward_range, bgrid.lateral_range / 2.0)
