"""Deterministic synthetic pinhole worlds with ground-truth BEV occupancy.

A scene is a flat ground plane with axis-aligned box objects (cars and
pedestrians) standing on it. Images are rendered column by column: the ray
through each column hits the nearest footprint, whose vertical extent is
projected with the pinhole model. Ground truth comes from the same footprints
rasterised onto the BEV grid, with a visibility mask removing cells hidden
behind other objects.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGrid, CameraIntrinsics, PolarGrid, fov_mask, resampling_plan

GROUND, CAR, PEDESTRIAN = 0, 1, 2
CLASS_NAMES = ("ground", "car", "pedestrian")

PALETTE = {
    "sky": (0.8, 0.9, 1.0),
    GROUND: (0.5, 0.5, 0.5),
    CAR: (0.0, 0.0, 1.0),
    PEDESTRIAN: (1.0, 0.0, 0.0),
}

OBJECT_SHAPES = {
    # class: (width x, depth z, height), metres
    CAR: (2.0, 4.0, 1.5),
    PEDESTRIAN: (0.5, 0.5, 1.8),
}


class GenerationError(RuntimeError):
    """Requested objects could not be placed."""


@dataclass(frozen=True)
class SceneObject:
    cls: int
    x: float  # footprint centre
    z: float
    w: float  # extent along x
    d: float  # extent along z
    height: float
    vx: float = 0.0  # metres per frame
    vz: float = 0.0

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.x + self.w / 2, self.z - self.d / 2, self.z + self.d / 2)

    def at_frame_offset(self, k: int) -> "SceneObject":
        """The object ``k`` frames later (negative k: earlier)."""
        return dataclasses.replace(self, x=self.x + k * self.vx, z=self.z + k * self.vz)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = ()
    camera_height: float = 1.5

    def at_frame_offset(self, k: int) -> "Scene":
        return Scene(tuple(o.at_frame_offset(k) for o in self.objects), self.camera_height)


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters. Counts are inclusive ranges."""

    image_height: int = 64
    image_width: int = 64
    fx: float = 64.0
    fy: float = 64.0
    cx: float = 32.0
    cy: float = 16.0
    camera_height: float = 1.5
    bev_z: int = 32
    bev_x: int = 32
    cell_size: float = 0.5
    cars: tuple[int, ...] = (1, 2)
    pedestrians: tuple[int, ...] = (2, 5)
    z_range: tuple[float, ...] = (3.0, 14.0)
    # one-cell footprints: a 0.5 m depth step moves the foot row by fy*h*0.5/z**2 px,
    # which drops below about half a pixel past 9-10 m at 64x64
    pedestrian_z_range: tuple[float, ...] = (3.0, 9.0)
    fov_margin: float = 0.25
    frames: int = 1
    max_speed: float = 0.5
    supersample: int = 4
    max_tries: int = 200

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def bev(self) -> BevGrid:
        return BevGrid(self.bev_z, self.bev_x, self.cell_size)


def _overlaps(a: SceneObject, b: SceneObject, gap: float) -> bool:
    ax0, ax1, az0, az1 = a.bounds
    bx0, bx1, bz0, bz1 = b.bounds
    return ax0 < bx1 + gap and bx0 < ax1 + gap and az0 < bz1 + gap and bz0 < az1 + gap


def generate_scene(seed, spec: SceneSpec = SceneSpec()) -> Scene:
    """Random non-overlapping objects, footprints aligned to the BEV cell lattice."""
    rng = np.random.default_rng(seed)
    cam = spec.camera
    half_fov = math.atan((spec.image_width - cam.cx) / cam.fx), math.atan(cam.cx / cam.fx)
    cell = spec.cell_size
    half_x = spec.bev_x * cell / 2
    z_lo, z_hi = spec.z_range
    if z_hi <= z_lo or z_lo <= 0:
        raise GenerationError(f"invalid z_range {spec.z_range}")
    ped_lo, ped_hi = spec.pedestrian_z_range
    if not z_lo <= ped_lo < ped_hi <= z_hi:
        raise GenerationError(f"pedestrian_z_range {spec.pedestrian_z_range} not inside z_range {spec.z_range}")
    z_limits = {CAR: (z_lo, z_hi), PEDESTRIAN: (ped_lo, ped_hi)}
    wanted = []
    for cls, rng_n in ((CAR, spec.cars), (PEDESTRIAN, spec.pedestrians)):
        lo, hi = rng_n
        wanted += [cls] * int(rng.integers(lo, hi + 1))
    placed: list[SceneObject] = []
    for cls in wanted:
        w, d, height = OBJECT_SHAPES[cls]
        lo_z, hi_z = z_limits[cls]
        for _ in range(spec.max_tries):
            z0 = lo_z + rng.uniform(0, hi_z - lo_z - d)
            z0 = round(z0 / cell) * cell  # snap footprint edges to cell boundaries
            zc = z0 + d / 2
            lim_r = zc * math.tan(half_fov[0]) - spec.fov_margin
            lim_l = zc * math.tan(half_fov[1]) - spec.fov_margin
            xc = rng.uniform(-lim_l, lim_r)
            x0 = round((xc - w / 2) / cell) * cell
            xc = x0 + w / 2
            if z0 < lo_z - 1e-9 or z0 + d > hi_z + 1e-9 or abs(x0) > half_x or abs(x0 + w) > half_x:
                continue
            if spec.frames > 1:
                speed = rng.uniform(0, spec.max_speed)
                ang = rng.uniform(0, 2 * math.pi)
                vx, vz = speed * math.cos(ang), speed * math.sin(ang)
            else:
                vx = vz = 0.0
            obj = SceneObject(cls, xc, zc, w, d, height, vx, vz)
            if all(not _overlaps(obj, o, gap=0.5) for o in placed):
                placed.append(obj)
                break
        else:
            raise GenerationError(f"could not place object of class {cls} after {spec.max_tries} tries")
    return Scene(tuple(placed), spec.camera_height)


def ray_entry_depth(obj: SceneObject, slope) -> np.ndarray:
    """Forward depth ``z`` where the ray ``x = slope * z`` enters the footprint (inf on a miss)."""
    slope = np.asarray(slope, dtype=np.float64)
    x0, x1, z0, z1 = obj.bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(slope != 0, x0 / slope, -np.inf)
        b = np.where(slope != 0, x1 / slope, np.inf)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    straight = slope == 0
    inside = (x0 <= 0) & (0 <= x1)
    lo = np.where(straight, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(straight, np.where(inside, np.inf, -np.inf), hi)
    enter = np.maximum(lo, max(z0, 1e-9))
    leave = np.minimum(hi, z1)
    return np.where(enter <= leave, enter, np.inf)


def render_columns(scene: Scene, cam: CameraIntrinsics, height: int, width: int,
                   supersample: int = 4) -> np.ndarray:
    """Class-coloured rendering ``(3, H, W)`` in [0, 1].

    Each (sub-)column's ray is intersected with every footprint; the nearest
    hit paints rows ``[cy - fy (h_obj - h_cam)/z, cy + fy h_cam / z]``. Ground
    fills below the horizon row ``cy``, sky above. With ``supersample > 1`` the
    image is rendered on a finer lattice and box-averaged.
    """
    s = supersample
    us = (np.arange(width * s) + 0.5) / s
    vs = (np.arange(height * s) + 0.5) / s
    slope = (us - cam.cx) / cam.fx
    labels = np.where(vs[:, None] > cam.cy, GROUND, -1) * np.ones((1, width * s), dtype=int)
    depth = np.full((height * s, width * s), np.inf)
    # back-to-front by footprint depth; the per-pixel depth test settles ties in order
    for obj in sorted(scene.objects, key=lambda o: -o.z):
        z = ray_entry_depth(obj, slope)
        hit = np.isfinite(z)
        if not hit.any():
            continue
        zz = np.where(hit, z, 1.0)
        v_bot = cam.cy + cam.fy * scene.camera_height / zz
        v_top = cam.cy - cam.fy * (obj.height - scene.camera_height) / zz
        cover = hit[None, :] & (vs[:, None] >= v_top[None, :]) & (vs[:, None] <= v_bot[None, :])
        cover &= z[None, :] < depth
        labels = np.where(cover, obj.cls, labels)
        depth = np.where(cover, z[None, :], depth)
    colors = np.zeros((3, height * s, width * s))
    colors[:] = np.asarray(PALETTE["sky"])[:, None, None]
    for cls in (GROUND, CAR, PEDESTRIAN):
        m = labels == cls
        colors[:, m] = np.asarray(PALETTE[cls])[:, None]
    if s == 1:
        return colors
    return colors.reshape(3, height, s, width, s).mean(axis=(2, 4))


def _inside(obj: SceneObject, x, z) -> np.ndarray:
    x0, x1, z0, z1 = obj.bounds
    return (x >= x0) & (x <= x1) & (z >= z0) & (z <= z1)


def _segment_hits(obj: SceneObject, x, z) -> np.ndarray:
    """Does the segment from the camera to (x, z) cross the footprint?"""
    x0, x1, z0, z1 = obj.bounds
    t_lo = np.zeros_like(x)
    t_hi = np.ones_like(x)
    for d, lo, hi in ((x, x0, x1), (z, z0, z1)):
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(d != 0, lo / d, -np.inf)
            b = np.where(d != 0, hi / d, np.inf)
        par = d == 0
        ok = (lo <= 0) & (0 <= hi)
        a = np.where(par, np.where(ok, -np.inf, np.inf), a)
        b = np.where(par, np.where(ok, np.inf, -np.inf), b)
        t_lo = np.maximum(t_lo, np.minimum(a, b))
        t_hi = np.minimum(t_hi, np.maximum(a, b))
    return t_lo <= t_hi


def field_of_view(bgrid: BevGrid, pgrid) -> np.ndarray:
    if isinstance(pgrid, PolarGrid):
        return fov_mask(pgrid, bgrid)
    return resampling_plan(tuple(pgrid), bgrid)[1]


def rasterize_gt(scene: Scene, bgrid: BevGrid, pgrid, num_classes: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Binary occupancy ``(K, Z, X)`` and visibility ``(Z, X)``.

    ``pgrid`` is a polar grid or a sequence of radial-band grids; their union
    field of view bounds both outputs. Ground covers the whole field of view.
    """
    fov = field_of_view(bgrid, pgrid)
    x, z = bgrid.cell_centers()
    gt = np.zeros((num_classes, bgrid.Z, bgrid.X))
    gt[GROUND] = fov
    blocked = np.zeros_like(fov)
    for obj in scene.objects:
        inside = _inside(obj, x, z)
        gt[obj.cls] = np.maximum(gt[obj.cls], inside & fov)
        blocked |= ~inside & _segment_hits(obj, x, z)
    return gt, (fov & ~blocked).astype(np.float64)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W), final frame
    frames: np.ndarray  # (T, 3, H, W)
    intrinsics: CameraIntrinsics
    gt: np.ndarray  # (K, Z, X)
    visibility: np.ndarray  # (Z, X)
    scene: Scene = field(default=None, repr=False)


def make_sample(scene: Scene, spec: SceneSpec, pgrid) -> Sample:
    cam = spec.camera
    T = spec.frames
    frames = np.stack([
        render_columns(scene.at_frame_offset(t - (T - 1)), cam, spec.image_height, spec.image_width,
                       spec.supersample)
        for t in range(T)
    ])
    gt, vis = rasterize_gt(scene, spec.bev, pgrid)
    return Sample(frames[-1], frames, cam, gt, vis, scene)


def generate_samples(seed: int, count: int, spec: SceneSpec, pgrid) -> list[Sample]:
    """Sample ``i`` depends only on ``(seed, i)``."""
    return [make_sample(generate_scene([seed, i], spec), spec, pgrid) for i in range(count)]
