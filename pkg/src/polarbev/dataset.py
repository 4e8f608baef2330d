"""On-disk datasets: one directory per sample plus a manifest.

Layout::

    manifest.txt            sample ids, a blank line, then the generation spec
    sample_000000/
        image.tnsr          (3, H, W) final frame
        intrinsics.txt      3x3 camera matrix
        gt.tnsr             (K, Z, X) binary occupancy
        vis.pgm             (Z, X) visibility, 0 or 255
        frame_0.tnsr ...    only for multi-frame samples
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import config as cfgmod
from .geometry import read_intrinsics, write_intrinsics
from .numerics import serialize
from .numerics.serialize import FormatError
from .synthdata import Sample, SceneSpec, generate_samples

MANIFEST = "manifest.txt"


def write_pgm(path, arr) -> None:
    """Binary greyscale (P5), 8-bit; ``arr`` is (rows, cols) of uint8-range values."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {a.shape}")
    a = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    data = raw[pos + 1:]
    n = w * h * channels
    if len(data) < n:
        raise FormatError(f"{path}: expected {n} bytes of pixel data, found {len(data)}")
    a = np.frombuffer(data[:n], dtype=np.uint8)
    return a.reshape(h, w) if channels == 1 else a.reshape(h, w, channels)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path, image) -> None:
    """``image`` (3, H, W) in [0, 1] as binary P6."""
    a = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = a.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + a.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).transpose(2, 0, 1) / 255.0


def sample_dir(root, idx: int) -> Path:
    return Path(root) / f"sample_{idx:06d}"


def write_sample(directory, sample: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    serialize.save(d / "image.tnsr", sample.image)
    write_intrinsics(d / "intrinsics.txt", sample.intrinsics)
    serialize.save(d / "gt.tnsr", sample.gt)
    write_pgm(d / "vis.pgm", sample.visibility * 255)
    if len(sample.frames) > 1:
        for t, frame in enumerate(sample.frames):
            serialize.save(d / f"frame_{t}.tnsr", frame)


def read_sample(directory) -> Sample:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no sample directory {d}")
    if (d / "image.tnsr").exists():
        image = serialize.load(d / "image.tnsr")
    elif (d / "image.ppm").exists():
        image = read_ppm(d / "image.ppm")
    else:
        raise FileNotFoundError(f"{d}: missing image.tnsr / image.ppm")
    cam = read_intrinsics(d / "intrinsics.txt")
    gt = serialize.load(d / "gt.tnsr")
    vis = (read_pgm(d / "vis.pgm") > 127).astype(np.float64)
    frames = []
    while (d / f"frame_{len(frames)}.tnsr").exists():
        frames.append(serialize.load(d / f"frame_{len(frames)}.tnsr"))
    frames = np.stack(frames) if frames else image[None]
    if gt.ndim != 3 or gt.shape[1:] != vis.shape:
        raise FormatError(f"{d}: gt {gt.shape} and visibility {vis.shape} disagree")
    return Sample(image, frames, cam, gt, vis)


def write_dataset(root, samples: list[Sample], spec: SceneSpec) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        write_sample(sample_dir(root, i), s)
        ids.append(sample_dir(root, i).name)
    (root / MANIFEST).write_text("\n".join(ids) + "\n\n" + cfgmod.dump(spec))


def read_manifest(root) -> tuple[list[str], dict[str, str]]:
    """Sample ids (one per line), a blank line, then the generation spec."""
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{root}: no {MANIFEST}")
    head, _, spec_text = path.read_text().partition("\n\n")
    ids = [ln.strip() for ln in head.splitlines() if ln.strip()]
    bad = [i for i in ids if not i.startswith("sample_")]
    if bad:
        raise FormatError(f"{path}: bad sample id {bad[0]!r}")
    return ids, cfgmod.parse_lines(spec_text, str(path))


def read_dataset(root) -> list[Sample]:
    ids, _ = read_manifest(root)
    return [read_sample(Path(root) / i) for i in ids]


def generate_dataset(root, seed: int, count: int, spec: SceneSpec, pgrid) -> list[Sample]:
    samples = generate_samples(seed, count, spec, pgrid)
    write_dataset(root, samples, spec)
    return samples
