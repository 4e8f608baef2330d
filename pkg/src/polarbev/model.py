"""The image-to-BEV network: frontend, scanline-to-ray translation, dynamics, segmentation, loss."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import numerics as nx
from .attention import MODES, AxialAttention, DecoderLayer, EncoderLayer, sinusoid_encoding
from .config import ConfigError
from .geometry import (BevGrid, CameraIntrinsics, PolarGrid, build_polar_grid, max_range,
                       polar_to_cartesian, radial_bands, resampling_plan)
from .monotonic import NUMERATORS
from .nn import Conv2d, LayerNorm, Module, param
from .numerics import Tensor, serialize

POLAR_ENCODINGS = ("agnostic", "image_plane", "bev_plane", "both")


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    channels: int = 32
    strides: tuple[int, ...] = (4, 8)
    radial_bins: tuple[int, ...] = (16, 16)
    heads: int = 4
    enc_layers: int = 1
    dec_layers: int = 2
    ffn_mult: int = 4
    attention_mode: str = "soft"
    mail_numerator: str = "slot_j"
    polar_encoding: str = "both"
    angle_scale: float = 100.0
    horizontal_context: bool = False
    temporal_frames: int = 1
    num_classes: int = 3
    bev_z: int = 32
    bev_x: int = 32
    cell_size: float = 0.5
    r_min: float = 1.0
    r_max: float | None = None
    band_split: float | None = None
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.attention_mode not in MODES:
            raise ConfigError(f"attention.mode must be one of {MODES}, got {self.attention_mode!r}")
        if self.mail_numerator not in NUMERATORS:
            raise ConfigError(f"attention.mail_numerator must be one of {NUMERATORS}")
        if self.polar_encoding not in POLAR_ENCODINGS:
            raise ConfigError(f"polar_encoding must be one of {POLAR_ENCODINGS}")
        if len(self.strides) != len(self.radial_bins) or not self.strides:
            raise ConfigError("strides and radial_bins need one entry per scale")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ConfigError(f"consecutive strides must double, got {self.strides}")
        if self.strides[0] < 2 or self.strides[0] & (self.strides[0] - 1):
            raise ConfigError("finest stride must be a power of two >= 2")
        top = self.strides[-1]
        if self.image_height % top or self.image_width % top:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible by stride {top}")
        if self.channels % self.heads or self.channels % 2:
            raise ConfigError("channels must be even and divisible by heads")
        if self.bev_z % 2 or self.bev_x % 2:
            raise ConfigError("BEV extents must be even")
        if self.temporal_frames < 1:
            raise ConfigError("temporal_frames must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def bev(self) -> BevGrid:
        return BevGrid(self.bev_z, self.bev_x, self.cell_size)

    @property
    def range_max(self) -> float:
        return max_range(self.bev) if self.r_max is None else self.r_max

    def feature_size(self, u: int) -> tuple[int, int]:
        s = self.strides[u]
        return self.image_height // s, self.image_width // s

    def polar_grids(self, cam: CameraIntrinsics) -> tuple[PolarGrid, ...]:
        """One radial band per scale; the finest scale covers the far band."""
        bands = radial_bands(self.r_min, self.range_max, len(self.strides), self.band_split)
        return tuple(
            build_polar_grid(self.feature_size(u)[1], cam, self.radial_bins[u], lo, hi, self.strides[u])
            for u, (lo, hi) in enumerate(bands)
        )


MODEL_KEYS = {"attention.mode": "attention_mode", "attention.mail_numerator": "mail_numerator"}


def load_model_config(values: dict[str, str], base: ModelConfig = ModelConfig(), source="<config>") -> ModelConfig:
    try:
        return cfgmod.apply(base, values, MODEL_KEYS, source)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


# -- components ---------------------------------------------------------------

class Frontend(Module):
    """Strided convolutional stack with top-down lateral connections.

    Produces one ``C``-channel map per configured stride, finest first.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        C = cfg.channels
        width = max(C // 2, 8)
        self.stem = Conv2d(3, width, 3, rng, dtype, stride=2)
        self.stages = []
        c_in, s = width, 2
        while s < cfg.strides[-1]:
            s *= 2
            self.stages.append(Conv2d(c_in, C, 3, rng, dtype, stride=2))
            c_in = C
        self.refine = Conv2d(C, C, 3, rng, dtype)
        self.out_strides = cfg.strides
        self.laterals = [Conv2d(C, C, 1, rng, dtype) for _ in cfg.strides]

    def __call__(self, image: Tensor) -> list[Tensor]:
        x = nx.relu(self.stem(image))
        feats = {}
        s = 2
        for i, conv in enumerate(self.stages):
            s *= 2
            x = nx.relu(conv(x))
            if i == 0:
                x = nx.relu(self.refine(x))
            feats[s] = x
        outs = [None] * len(self.out_strides)
        top = None
        for u in reversed(range(len(self.out_strides))):
            lat = self.laterals[u](feats[self.out_strides[u]])
            top = lat if top is None else nx.add(lat, nx.upsample2x(top))
            outs[u] = top
        return outs


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.layers = [EncoderLayer(cfg.channels, cfg.heads, rng, dtype, cfg.ffn_mult)
                       for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.channels, dtype)

    def __call__(self, x, pe=None):
        for layer in self.layers:
            x = layer(x, pe)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, r: int, rng, dtype):
        C = cfg.channels
        self.queries = param((r, C), rng, C, dtype)
        self.layers = [DecoderLayer(C, cfg.heads, rng, dtype, cfg.ffn_mult, cfg.attention_mode,
                                    cfg.mail_numerator) for _ in range(cfg.dec_layers)]

    def __call__(self, memory: Tensor, query_pe: np.ndarray) -> Tensor:
        """memory (..., w, H, C); query_pe (r, C) or (w, r, C) -> rays (..., w, r, C)."""
        lead = memory.shape[:-2]
        r, C = self.queries.shape
        x = nx.add(nx.add(self.queries, query_pe), np.zeros(lead + (r, C), dtype=memory.dtype))
        for layer in self.layers:
            x = layer(x, memory, query_pe)
        return x


class Dynamics(Module):
    """Axial attention along time, then depth, then lateral axis; keeps the final frame."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        C = cfg.channels
        self.time = AxialAttention(C, cfg.heads, rng, dtype)
        self.depth = AxialAttention(C, cfg.heads, rng, dtype)
        self.lateral = AxialAttention(C, cfg.heads, rng, dtype)
        # zero residual branches: a fresh module returns the final frame unchanged,
        # so training starts from the single-frame model
        for ax in (self.time, self.depth, self.lateral):
            ax.attn.out.weight.data[...] = 0
            ax.attn.out.bias.data[...] = 0

    def __call__(self, seq: Tensor) -> Tensor:
        """seq (B, T, C, Z, X) -> (B, C, Z, X)."""
        B, T, C, Z, X = seq.shape
        if T == 1:
            return nx.reshape(seq, (B, C, Z, X))
        dt = seq.dtype
        x = nx.transpose(seq, (0, 3, 4, 1, 2))  # B Z X T C
        x = self.time(x, sinusoid_encoding(T, C).astype(dt))
        # later passes only feed the final frame
        x = x[:, :, :, T - 1, :]  # B Z X C
        x = nx.transpose(x, (0, 2, 1, 3))  # B X Z C
        x = self.depth(x, sinusoid_encoding(Z, C).astype(dt))
        x = nx.transpose(x, (0, 2, 1, 3))  # B Z X C
        x = self.lateral(x, sinusoid_encoding(X, C).astype(dt))
        return nx.transpose(x, (0, 3, 1, 2))


def dynamics_axial(module: Dynamics, bev_seq: Tensor) -> Tensor:
    """``(T, C, Z, X)`` or batched ``(B, T, C, Z, X)`` -> features of the final timestep."""
    if bev_seq.ndim == 4:
        return nx.reshape(module(nx.reshape(bev_seq, (1,) + bev_seq.shape)), bev_seq.shape[1:])
    return module(bev_seq)


class SegmentationHead(Module):
    """Downsample-upsample conv head; logits at full and half BEV resolution."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        C, K = cfg.channels, cfg.num_classes
        self.enc1 = Conv2d(C, C, 3, rng, dtype)
        self.enc2 = Conv2d(C, C, 3, rng, dtype, stride=2)
        self.mid = Conv2d(C, C, 3, rng, dtype)
        self.dec1 = Conv2d(C, C, 3, rng, dtype)
        self.out_full = Conv2d(C, K, 1, rng, dtype)
        self.out_half = Conv2d(C, K, 1, rng, dtype)

    def __call__(self, bev: Tensor) -> list[Tensor]:
        e1 = nx.relu(self.enc1(bev))
        e2 = nx.relu(self.enc2(e1))
        m = nx.relu(self.mid(e2))
        d1 = nx.relu(self.dec1(nx.add(nx.upsample2x(m), e1)))
        return [self.out_full(d1), self.out_half(m)]


def segment(head: SegmentationHead, bev: Tensor) -> list[Tensor]:
    """``(C, Z, X)`` or ``(B, C, Z, X)`` -> logits ``[(.., K, Z, X), (.., K, Z/2, X/2)]``."""
    if bev.ndim == 3:
        outs = head(nx.reshape(bev, (1,) + bev.shape))
        return [nx.reshape(o, o.shape[1:]) for o in outs]
    return head(bev)


def dice_loss(probs, gt, mask, eps: float = 1e-5) -> Tensor:
    """``1 - mean_k 2 sum(p y) / (sum(p + y) + eps)`` over unmasked cells.

    Shapes ``(K, z, x)`` or ``(B, K, z, x)``; ``mask`` broadcasts against the
    spatial axes. Sums run over every axis except the class axis.
    """
    probs = nx.as_tensor(probs)
    gt = np.asarray(gt, dtype=probs.dtype)
    mask = np.asarray(mask, dtype=probs.dtype)
    if probs.ndim == 3:
        pm = nx.mul(probs, mask[None] if mask.ndim == 2 else mask)
        ym = gt * (mask[None] if mask.ndim == 2 else mask)
        axes = (1, 2)
    else:
        m = mask[:, None] if mask.ndim == 3 else mask
        pm = nx.mul(probs, m)
        ym = gt * m
        axes = (0, 2, 3)
    inter = nx.tsum(nx.mul(pm, ym), axis=axes)
    denom = nx.add(nx.tsum(pm, axis=axes), ym.sum(axis=axes) + eps)
    return nx.sub(1.0, nx.mean(nx.scale(nx.div(inter, denom), 2.0)))


def downsample_targets(gt: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max-pooled targets for the half-resolution output; occluded cells don't count."""
    def pool(a):
        s = a.shape
        return a.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).max(axis=(-3, -1))
    m = mask[..., None, :, :] if gt.ndim == mask.ndim + 1 else mask
    return pool(gt * m), pool(mask)


@dataclass
class ModelOutput:
    logits: list  # per scale (B, K, z_u, x_u)
    probs: list
    fov_mask: np.ndarray  # (Z, X)
    polar: list | None = None  # per scale (B*T, C, w_u, r_u), kept for inspection


# -- the network ----------------------------------------------------------------

class BEVModel(Module):
    """Image (+ intrinsics) -> per-class occupancy logits on the BEV grid.

    Parameters are named ``frontend.*``, ``enc{u}.{layer}.{role}``,
    ``dec{u}.{layer}.{role}``, ``dynamics.*`` and ``head.*``.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        self.frontend = Frontend(cfg, rng, dt)
        for u, r in enumerate(cfg.radial_bins):
            enc = Encoder(cfg, rng, dt)
            setattr(self, f"enc{u}", enc.layers)
            setattr(self, f"encnorm{u}", enc.norm)
            dec = Decoder(cfg, r, rng, dt)
            setattr(self, f"dec{u}", dec.layers)
            setattr(self, f"query{u}", dec.queries)
            if cfg.horizontal_context:
                setattr(self, f"hctx{u}", AxialAttention(cfg.channels, cfg.heads, rng, dt))
        self.dynamics = Dynamics(cfg, rng, dt) if cfg.temporal_frames > 1 else None
        self.head = SegmentationHead(cfg, rng, dt)

    # components addressable by scale
    def encoder(self, u: int) -> Encoder:
        enc = Encoder.__new__(Encoder)
        enc.layers, enc.norm = getattr(self, f"enc{u}"), getattr(self, f"encnorm{u}")
        return enc

    def decoder(self, u: int) -> Decoder:
        dec = Decoder.__new__(Decoder)
        dec.layers, dec.queries = getattr(self, f"dec{u}"), getattr(self, f"query{u}")
        return dec

    def angle_encoding(self, grid: PolarGrid) -> np.ndarray:
        C = self.cfg.channels
        return sinusoid_encoding(grid.num_angles, C, grid.angle_array * self.cfg.angle_scale)

    def horizontal_axial_context(self, u: int, feats: Tensor) -> Tensor:
        """Self-attention along each feature row of ``(N, C, h, w)``; passthrough when disabled."""
        if not self.cfg.horizontal_context:
            return feats
        x = nx.transpose(feats, (0, 2, 3, 1))  # N h w C
        x = getattr(self, f"hctx{u}")(x)
        return nx.transpose(x, (0, 3, 1, 2))

    def translate_scale(self, u: int, feats: Tensor, grid: PolarGrid) -> Tensor:
        """Features ``(N, C, h, w)`` -> polar map ``(N, C, w, r)``: one encoded column per ray."""
        cfg = self.cfg
        dt = feats.dtype
        N, C, h, w = feats.shape
        cols = nx.transpose(feats, (0, 3, 2, 1))  # N w h C, rows top to bottom
        height_pe = sinusoid_encoding(h, C)[None]  # 1 h C
        ray_pe = sinusoid_encoding(self.cfg.radial_bins[u], C)[None]  # 1 r C
        if cfg.polar_encoding in ("image_plane", "both"):
            height_pe = height_pe + self.angle_encoding(grid)[:, None, :]
        if cfg.polar_encoding in ("bev_plane", "both"):
            ray_pe = ray_pe + self.angle_encoding(grid)[:, None, :]
        height_pe = height_pe.astype(dt)
        memory = self.encoder(u)(cols, height_pe)
        memory = nx.add(memory, height_pe)
        rays = self.decoder(u)(memory, ray_pe.astype(dt))  # N w r C
        return nx.transpose(rays, (0, 3, 1, 2))

    def translate_image_to_bev(self, feats: list, cam: CameraIntrinsics) -> tuple[Tensor, np.ndarray, list]:
        """Per-scale features -> fused BEV features ``(N, C, Z, X)`` and the FOV mask."""
        grids = self.cfg.polar_grids(cam)
        polar = []
        for u, f in enumerate(feats):
            f = self.horizontal_axial_context(u, f)
            polar.append(self.translate_scale(u, f, grids[u]))
        bev, mask = polar_to_cartesian(polar, grids, self.cfg.bev)
        return bev, mask, polar

    def forward(self, images, cam: CameraIntrinsics) -> ModelOutput:
        """``images``: (B, T, 3, H, W), (B, 3, H, W) or (3, H, W)."""
        cfg = self.cfg
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.dtype))
        if x.ndim == 3:
            x = nx.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 4:
            x = nx.reshape(x, (x.shape[0], 1) + x.shape[1:])
        B, T = x.shape[:2]
        if T != cfg.temporal_frames:
            raise ConfigError(f"model expects {cfg.temporal_frames} frames, got {T}")
        if x.shape[2:] != (3, cfg.image_height, cfg.image_width):
            raise ConfigError(f"image shape {x.shape[2:]} does not match config")
        flat = nx.reshape(x, (B * T,) + x.shape[2:])
        feats = self.frontend(flat)
        bev, mask, polar = self.translate_image_to_bev(feats, cam)
        C = cfg.channels
        seq = nx.reshape(bev, (B, T, C, cfg.bev_z, cfg.bev_x))
        if self.dynamics is not None:
            bev = self.dynamics(seq)
        else:
            bev = nx.reshape(seq, (B, C, cfg.bev_z, cfg.bev_x))
        logits = self.head(bev)
        return ModelOutput(logits, [nx.sigmoid(l) for l in logits], mask, polar)

    __call__ = forward

    def loss(self, out: ModelOutput, gt: np.ndarray, mask: np.ndarray, eps: float = 1e-5) -> tuple[Tensor, list]:
        """Sum over output scales of the Dice loss; also returns the per-scale terms."""
        terms = []
        g, m = gt, mask
        for u, p in enumerate(out.probs):
            if u > 0:
                g, m = downsample_targets(g, m)
            terms.append(dice_loss(p, g, m, eps))
        total = terms[0]
        for t in terms[1:]:
            total = nx.add(total, t)
        return total, terms


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"BEVT"
CKPT_VERSION = 1


def save_checkpoint(path, model: BEVModel, extra_config: str = "") -> None:
    """``BEVT``, u32 version, u32-length config text, u32 count, then (u32-length name, tensor) pairs."""
    text = (cfgmod.dump(model.cfg, MODEL_KEYS) + extra_config).encode()
    params = list(model.named_parameters())
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        serialize.write_tensor(buf, p.data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[BEVModel, dict[str, str]]:
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    if fh.read(4) != CKPT_MAGIC:
        raise serialize.FormatError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", fh.read(8))
    if version != CKPT_VERSION:
        raise serialize.FormatError(f"{path}: unsupported checkpoint version {version}")
    values = cfgmod.parse_lines(fh.read(n).decode(), str(path))
    model_vals = {k: v for k, v in values.items() if not k.startswith("train.")}
    cfg = load_model_config(model_vals, source=str(path))
    (count,) = struct.unpack("<I", fh.read(4))
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", fh.read(4))
        name = fh.read(ln).decode()
        state[name] = serialize.read_tensor(fh)
    model = BEVModel(cfg)
    model.load_state_dict(state)
    return model, values


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return dataclasses.replace(cfg, **kw)


__all__ = [
    "ModelConfig", "BEVModel", "ModelOutput", "Frontend", "SegmentationHead", "Dynamics",
    "dice_loss", "downsample_targets", "dynamics_axial", "segment", "save_checkpoint",
    "load_checkpoint", "load_model_config", "resampling_plan", "with_overrides",
]
