"""Command-line entry points: ``gen``, ``train``, ``eval`` and ``infer``.

Every command accepts ``--seed``, ``--precision {f32,f64}`` and ``--threads``;
errors print a one-line message on stderr and exit with status 2 (status 3
when training diverges).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataset
from .config import ConfigError
from .geometry import CameraIntrinsics
from .model import BEVModel, ModelConfig, load_checkpoint, load_model_config, save_checkpoint
from .numerics import DomainError, serialize
from .synthdata import CLASS_NAMES, GenerationError, SceneSpec
from .train import TRAIN_KEYS, TrainConfig, TrainingDiverged, evaluate, predict, train

log = logging.getLogger("polarbev")

CHECKPOINT = "checkpoint.bevt"


class CommandError(RuntimeError):
    pass


def split_config(values: dict[str, str], source: str) -> tuple[ModelConfig, TrainConfig]:
    model_vals = {k: v for k, v in values.items() if not k.startswith("train.")}
    train_vals = {k: v for k, v in values.items() if k.startswith("train.")}
    mcfg = load_model_config(model_vals, source=source)
    tcfg = cfgmod.apply(TrainConfig(), train_vals, TRAIN_KEYS, source)
    return mcfg, tcfg


def model_config_for(spec: SceneSpec, mcfg: ModelConfig) -> ModelConfig:
    """Model config whose image and BEV extents follow the generation spec."""
    return dataclasses.replace(mcfg, image_height=spec.image_height, image_width=spec.image_width,
                               bev_z=spec.bev_z, bev_x=spec.bev_x, cell_size=spec.cell_size)


def check_data(mcfg: ModelConfig, samples) -> CameraIntrinsics:
    if not samples:
        raise CommandError("dataset is empty")
    s = samples[0]
    want_img = (3, mcfg.image_height, mcfg.image_width)
    want_gt = (mcfg.num_classes, mcfg.bev_z, mcfg.bev_x)
    if s.image.shape != want_img or s.gt.shape != want_gt:
        raise ConfigError(f"data shapes image {s.image.shape}, gt {s.gt.shape} do not match "
                          f"config {want_img}, {want_gt}")
    if mcfg.temporal_frames > 1 and len(s.frames) != mcfg.temporal_frames:
        raise ConfigError(f"config expects {mcfg.temporal_frames} frames, data has {len(s.frames)}")
    return s.intrinsics


def write_metrics(path, metrics: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for name, val in metrics.items():
            w.writerow([name, f"{val:.6f}"])


def write_loss(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, val in enumerate(losses, 1):
            w.writerow([i, repr(float(val))])


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> None:
    values = cfgmod.read_file(args.spec) if args.spec else {}
    spec = cfgmod.apply(SceneSpec(), values, source=str(args.spec))
    mcfg, _ = split_config(cfgmod.read_file(args.config), str(args.config)) if args.config else (ModelConfig(), None)
    mcfg = model_config_for(spec, mcfg)
    if args.count < 0:
        raise CommandError("--count must be non-negative")
    grids = mcfg.polar_grids(spec.camera)
    samples = dataset.generate_samples(args.seed, args.count, spec, grids)
    dtype = np.float32 if args.precision == "f32" else np.float64
    for s in samples:
        s.image, s.frames, s.gt = s.image.astype(dtype), s.frames.astype(dtype), s.gt.astype(dtype)
    dataset.write_dataset(args.out, samples, spec)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args) -> None:
    values = cfgmod.read_file(args.config) if args.config else {}
    mcfg, tcfg = split_config(values, str(args.config))
    overrides = {"precision": args.precision} if args.precision else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    mcfg = dataclasses.replace(mcfg, **overrides)
    tcfg = dataclasses.replace(tcfg, threads=args.threads)
    samples = dataset.read_dataset(args.data)
    check_data(mcfg, samples)
    model = BEVModel(mcfg)
    hist = train(model, samples, tcfg)
    out = _out_dir(args.out)
    save_checkpoint(out / CHECKPOINT, model, cfgmod.dump(tcfg, TRAIN_KEYS))
    write_loss(out / "loss.csv", hist.loss)
    metrics = evaluate(model, samples, tcfg.threshold, tcfg.batch_size, args.threads)
    write_metrics(out / "metrics.csv", metrics)
    print(f"trained {tcfg.epochs} epochs in {hist.seconds:.1f}s; mean IoU {metrics['mean']:.4f}")


def _load(args) -> BEVModel:
    model, _ = load_checkpoint(args.checkpoint)
    if args.precision and args.precision != model.cfg.precision:
        cfg = dataclasses.replace(model.cfg, precision=args.precision)
        state = model.state_dict()
        model = BEVModel(cfg)
        model.load_state_dict(state)
    return model


def cmd_eval(args) -> None:
    model = _load(args)
    samples = dataset.read_dataset(args.data)
    check_data(model.cfg, samples)
    metrics = evaluate(model, samples, threads=args.threads)
    write_metrics(_out_dir(args.out) / "metrics.csv", metrics)
    print(f"mean IoU {metrics['mean']:.4f}")


def cmd_infer(args) -> None:
    model = _load(args)
    sample = dataset.read_sample(args.sample)
    check_data(model.cfg, [sample])
    probs, mask = predict(model, [sample], threads=args.threads)
    out = _out_dir(args.out)
    names = CLASS_NAMES if len(CLASS_NAMES) == model.cfg.num_classes else [f"class{k}" for k in range(model.cfg.num_classes)]
    for name, p in zip(names, probs[0]):
        dataset.write_pgm(out / f"{name}.pgm", np.rint(p * 255))
    dataset.write_pgm(out / "mask.pgm", mask * 255)
    print(f"wrote {len(names) + 1} maps to {out}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="polarbev", description="Image to bird's-eye-view translation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", type=Path, default=None, help="scene spec (key = value)")
    p.add_argument("--config", type=Path, default=None, help="model config fixing the field of view")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-class IoU on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="probability maps for one sample")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "gen" and args.seed is None:
        args.seed = 0
    if args.threads < 1:
        print("polarbev: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"polarbev: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CommandError, GenerationError, DomainError, serialize.FormatError,
            FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"polarbev {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
