"""Training loop, evaluation and IoU."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .config import ConfigError
from .geometry import CameraIntrinsics
from .model import BEVModel, ModelConfig
from .nn import Adam
from .synthdata import CLASS_NAMES, Sample

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    grad_clip: float | None = 5.0
    shuffle: bool = True
    seed: int = 0
    threads: int = 1
    dice_eps: float = 1e-5
    threshold: float = 0.5


TRAIN_KEYS = {f"train.{f}": f for f in TrainConfig.__dataclass_fields__}


@dataclass
class History:
    loss: list = field(default_factory=list)  # mean loss per epoch
    seconds: float = 0.0


def iou(pred, gt, mask=None) -> float:
    """Intersection over union of binary maps restricted to ``mask``; 1.0 when the union is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != pred.shape:
            raise ValueError(f"mask shape {m.shape} does not match {pred.shape}")
        pred, gt = pred & m, gt & m
    union = np.count_nonzero(pred | gt)
    if union == 0:
        log.info("empty union; IoU defined as 1")
        return 1.0
    return np.count_nonzero(pred & gt) / union


class IoUAccumulator:
    """Per-class intersection and union counts summed over a dataset."""

    def __init__(self, num_classes: int):
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred, gt, mask) -> None:
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        m = np.asarray(mask, dtype=bool)
        if pred.shape != gt.shape or m.shape != pred.shape[:-3] + pred.shape[-2:]:
            raise ValueError(f"shapes do not agree: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
        m = m[:, None] if pred.ndim == 4 else m[None]
        axes = tuple(i for i in range(pred.ndim) if i != pred.ndim - 3)
        self.inter += np.count_nonzero(pred & gt & m, axis=axes)
        self.union += np.count_nonzero((pred | gt) & m, axis=axes)

    def per_class(self) -> np.ndarray:
        empty = self.union == 0
        if empty.any():
            log.info("empty union for classes %s; IoU defined as 1", np.flatnonzero(empty).tolist())
        return np.where(empty, 1.0, self.inter / np.maximum(self.union, 1))


def stack_batch(samples: list[Sample], temporal: bool):
    images = np.stack([s.frames if temporal else s.image for s in samples])
    gt = np.stack([s.gt for s in samples])
    vis = np.stack([s.visibility for s in samples])
    return images, gt, vis


def _check_camera(samples: list[Sample]) -> CameraIntrinsics:
    cam = samples[0].intrinsics
    if any(s.intrinsics != cam for s in samples):
        raise ConfigError("all samples in a dataset must share intrinsics")
    return cam


def train(model: BEVModel, samples: list[Sample], tcfg: TrainConfig = TrainConfig(),
          callback=None) -> History:
    """Adam on the summed multi-scale Dice loss. Raises TrainingDiverged on NaN/inf."""
    if not samples:
        raise ConfigError("no training samples")
    cam = _check_camera(samples)
    temporal = model.cfg.temporal_frames > 1
    opt = Adam(model.parameters(), lr=tcfg.lr, grad_clip=tcfg.grad_clip)
    rng = np.random.default_rng(tcfg.seed)
    hist = History()
    start = time.perf_counter()
    with threadpool_limits(limits=tcfg.threads):
        for epoch in range(tcfg.epochs):
            order = rng.permutation(len(samples)) if tcfg.shuffle else np.arange(len(samples))
            total, seen = 0.0, 0
            for b in range(0, len(order), tcfg.batch_size):
                batch = [samples[i] for i in order[b:b + tcfg.batch_size]]
                images, gt, vis = stack_batch(batch, temporal)
                opt.zero_grad()
                try:
                    out = model(images, cam)
                    loss, _ = model.loss(out, gt, vis, tcfg.dice_eps)
                    nx.backward(loss)
                except nx.NumericError as exc:
                    raise TrainingDiverged(f"epoch {epoch + 1}: {exc}") from exc
                val = float(loss.data)
                if not math.isfinite(val):
                    raise TrainingDiverged(f"epoch {epoch + 1}: loss {val}")
                opt.step()
                total += val * len(batch)
                seen += len(batch)
            hist.loss.append(total / seen)
            log.info("epoch %d loss %.5f", epoch + 1, hist.loss[-1])
            if callback is not None:
                callback(epoch + 1, hist.loss[-1])
    hist.seconds = time.perf_counter() - start
    return hist


def predict(model: BEVModel, samples: list[Sample], batch_size: int = 8, threads: int = 1):
    """Full-resolution probabilities ``(N, K, Z, X)`` and the FOV mask."""
    cam = _check_camera(samples)
    temporal = model.cfg.temporal_frames > 1
    probs = []
    mask = None
    with threadpool_limits(limits=threads), nx.no_grad():
        for b in range(0, len(samples), batch_size):
            images, _, _ = stack_batch(samples[b:b + batch_size], temporal)
            out = model(images, cam)
            probs.append(out.probs[0].data)
            mask = out.fov_mask
    return np.concatenate(probs), mask


def evaluate(model: BEVModel, samples: list[Sample], threshold: float = 0.5, batch_size: int = 8,
             threads: int = 1) -> dict[str, float]:
    """Per-class IoU over the visible cells of ``samples``, plus their mean."""
    probs, _ = predict(model, samples, batch_size, threads)
    acc = IoUAccumulator(model.cfg.num_classes)
    gt = np.stack([s.gt for s in samples])
    vis = np.stack([s.visibility for s in samples])
    acc.update(probs >= threshold, gt > 0.5, vis > 0.5)
    scores = acc.per_class()
    names = CLASS_NAMES if len(CLASS_NAMES) == len(scores) else [f"class{k}" for k in range(len(scores))]
    result = {n: float(v) for n, v in zip(names, scores)}
    result["mean"] = float(scores.mean())
    return result


def fit(mcfg: ModelConfig, samples: list[Sample], tcfg: TrainConfig = TrainConfig()):
    """Build, train and evaluate on the training split; returns ``(model, history, metrics)``."""
    model = BEVModel(mcfg)
    hist = train(model, samples, tcfg)
    return model, hist, evaluate(model, samples, tcfg.threshold, tcfg.batch_size, tcfg.threads)
