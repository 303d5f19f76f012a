"""Command-line surface: synth, train, eval, inspect-regions, visualize.

Every intentional failure raises a structured error and exits with code 1;
exit code 0 means no structured error occurred.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import GmmConfig
from .config import load_config, parse_config_text
from .dataset import decode_image, encode_png, generate_synthetic, ingest_dataset, load_split
from .errors import AgnetError, CheckpointError, ConfigError
from .keypoints import DetectorConfig
from .network import init_params
from .optim import SgdState
from .regions import build_region_set
from .training import LOG_HEADER, TrainConfig, evaluate, train
from .visualize import render_overlay


def worker_threads() -> int:
    """Honour AGNET_THREADS; unset falls back to the hardware default."""
    raw = os.environ.get("AGNET_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"AGNET_THREADS must be an integer, got {raw!r}") from exc


def _load_configs(args) -> tuple[TrainConfig, DetectorConfig, GmmConfig]:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.config:
        return load_config(args.config, overrides)
    return parse_config_text("", overrides)


def _region_json(image_path: str, kappa: int, seed: int) -> dict:
    image = decode_image(Path(image_path))
    region_set = build_region_set(image, DetectorConfig(), GmmConfig(k=kappa, seed=seed), kappa)
    gmm = None
    if region_set.gmm is not None:
        gmm = {
            "means": region_set.gmm.means.tolist(),
            "covariances": region_set.gmm.covariances.tolist(),
            "weights": region_set.gmm.weights.tolist(),
        }
    return {
        "source": region_set.source.value,
        "kappa": kappa,
        "image": {"width": image.shape[1], "height": image.shape[0]},
        "keypoints": [{"x": p.x, "y": p.y, "scale": p.scale, "response": p.response}
                      for p in region_set.keypoints],
        "gmm": gmm,
        "primary": [list(b.as_tuple()) for b in region_set.primary],
        "secondary": [list(b.as_tuple()) for b in region_set.secondary],
        "whole_image": list(region_set.whole_image.as_tuple()),
    }


def cmd_synth(args) -> int:
    manifest = generate_synthetic(args.out, classes=args.classes,
                                  per_class=args.per_class, size=args.size,
                                  seed=args.seed)
    print(f"wrote {len(manifest.train)} train / {len(manifest.test)} test images "
          f"({manifest.num_classes} classes) under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, detector_cfg, gmm_cfg = _load_configs(args)
    # CLI training always runs in float32: checkpoint payloads are float32,
    # so this is what makes save/resume exactly lossless. The float64 path
    # exists for library-level verification (gradient checks).
    cfg = dataclasses.replace(cfg, float32=True)
    manifest = ingest_dataset(args.dataset)
    items = load_split(manifest, "train")

    start_epoch = 1
    if args.resume:
        params, state, meta = load_checkpoint(args.resume)
        if meta["num_classes"] != manifest.num_classes:
            raise CheckpointError(
                f"class-count mismatch: checkpoint has {meta['num_classes']}, "
                f"dataset has {manifest.num_classes}")
        start_epoch = int(meta.get("epoch", 0)) + 1
        state.learning_rate = cfg.lr
        state.momentum = cfg.momentum
        state.decay_factor = cfg.decay_factor
        state.decay_period_epochs = cfg.decay_every
    else:
        params = init_params(num_classes=manifest.num_classes, channels=cfg.channels,
                             stages=cfg.backbone_stages, seed=cfg.seed, dtype=cfg.dtype)
        state = SgdState(learning_rate=cfg.lr, momentum=cfg.momentum,
                         decay_factor=cfg.decay_factor,
                         decay_period_epochs=cfg.decay_every)

    log_path = Path(args.log)
    fresh_log = not (args.resume and log_path.exists())
    with open(log_path, "w" if fresh_log else "a") as log:
        if fresh_log:
            log.write(LOG_HEADER + "\n")

        def on_epoch(epoch, row):
            log.write(f"{row['epoch']},{row['lr']:.10g},{row['train_loss']:.6f},"
                      f"{row['train_top1']:.6f},{row['wall_seconds']:.3f}\n")
            log.flush()

        params, rows = train(items, params, cfg, detector_cfg=detector_cfg,
                             gmm_cfg=gmm_cfg, state=state, start_epoch=start_epoch,
                             epoch_callback=on_epoch)

    final_epoch = rows[-1]["epoch"] if rows else start_epoch - 1
    metadata = {
        "num_classes": manifest.num_classes, "channels": cfg.channels,
        "backbone_stages": cfg.backbone_stages, "kappa": cfg.kappa,
        "image_size": cfg.image_size, "seed": cfg.seed, "epoch": final_epoch,
        "lr": cfg.lr, "momentum": cfg.momentum, "decay_factor": cfg.decay_factor,
        "decay_every": cfg.decay_every,
    }
    save_checkpoint(args.out, params, metadata, state=state)
    top1 = rows[-1]["train_top1"] if rows else float("nan")
    print(f"final train top-1: {top1:.4f}")
    print(f"checkpoint written to {args.out}; log at {args.log}")
    return 0


def cmd_eval(args) -> int:
    params, _, meta = load_checkpoint(args.checkpoint)
    manifest = ingest_dataset(args.dataset)
    if meta["num_classes"] != manifest.num_classes:
        raise CheckpointError(
            f"class-count mismatch: checkpoint has {meta['num_classes']}, "
            f"dataset has {manifest.num_classes}")
    cfg = TrainConfig(kappa=int(meta.get("kappa", 8)),
                      image_size=int(meta.get("image_size", 224)),
                      channels=int(meta["channels"]),
                      backbone_stages=int(meta["backbone_stages"]),
                      seed=int(meta.get("seed", 0)), float32=True)
    items = load_split(manifest, args.split)
    report = evaluate(items, params, cfg, workers=worker_threads())
    print(f"top-1: {100 * report.top1:.2f}")
    print(f"top-5: {100 * report.top5:.2f}")
    print(f"mAP:   {100 * report.mean_ap:.2f}")
    if args.out:
        payload = {
            "top1": report.top1, "top5": report.top5, "mAP": report.mean_ap,
            "per_class_ap": [None if np.isnan(a) else a for a in report.per_class_ap],
            "classes": manifest.classes,
            "confusion": report.confusion.tolist(),
        }
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
        print(f"report written to {args.out}")
    return 0


def cmd_inspect_regions(args) -> int:
    payload = _region_json(args.image, args.kappa, args.seed)
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"region JSON written to {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_visualize(args) -> int:
    image = decode_image(Path(args.image))
    region_set = build_region_set(image, DetectorConfig(),
                                  GmmConfig(k=args.kappa, seed=args.seed), args.kappa)
    canvas = render_overlay(image, region_set, selected_secondary=args.secondary)
    encode_png(Path(args.out), canvas)
    print(f"overlay written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agnet",
        description="Keypoint-driven region-attention classifier: train, "
                    "evaluate, and inspect semantic regions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="checkpoint.agnet")
    p.add_argument("--log", default="training_log.csv")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.lr=1e-3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="write the full JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-regions", help="dump the region set as JSON")
    p.add_argument("image")
    p.add_argument("--kappa", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_regions)

    p = sub.add_parser("visualize", help="render the region overlay as PNG")
    p.add_argument("image")
    p.add_argument("--kappa", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--secondary", type=int, default=0,
                   help="index of the secondary box to draw dashed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AgnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
