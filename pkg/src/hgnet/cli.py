"""Command-line entry point: generate / train / eval / render."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .dataset import DatasetFormatError, read_dataset, write_dataset
from .harness import (
    CheckpointError, IncompatibleDataError, NonFiniteError, evaluate, load_checkpoint, predict, render,
    split_validation, train,
)
from .scenegen import InvalidConfigError, simulate_scene

log = logging.getLogger("hgnet")


def cmd_generate(args):
    cfg = load_config(args.config)
    scene_cfg = cfg.scene_config()
    first = cfg.scene.seed
    samples = [simulate_scene(first + i, scene_cfg) for i in range(args.num)]
    shards = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} scenes to {args.out} ({len(shards)} shards)")


def cmd_train(args):
    cfg = load_config(args.config)
    if args.no_fgat:
        cfg.ablations.fgat_enabled = False
    if args.no_memory:
        cfg.ablations.memory_enabled = False
    samples = read_dataset(args.data)
    if args.val:
        train_set, val_set = samples, read_dataset(args.val)
    else:
        train_set, val_set = split_validation(samples, cfg.train.val_fraction)
    res = train(cfg, train_set, val_set or None, args.out)
    print(f"checkpoint: {res.checkpoint}")
    if res.history:
        print(f"final epoch loss: {res.history[-1]['total']:.6f}")


def cmd_eval(args):
    model, _, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, read_dataset(args.data))
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    out.with_suffix(".txt").write_text(report.to_text())
    print(report.to_text(), end="")


def cmd_render(args):
    model, cfg, _ = load_checkpoint(args.ckpt)
    data = args.data or cfg.paths.dataset
    if data and Path(data).exists():
        samples = read_dataset(data)
        if not 0 <= args.scene < len(samples):
            raise IndexError(f"scene {args.scene} outside dataset of {len(samples)}")
        sample = samples[args.scene]
    else:
        # no dataset on disk: regenerate the scene from its seed
        sample = simulate_scene(cfg.scene.seed + args.scene, cfg.scene_config())
    (bundle,) = predict(model, [sample])
    paths = render(sample, bundle, args.out, prefix=f"scene{args.scene:05d}")
    print(f"wrote {len(paths)} images to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="hgnet", description="Occupancy-flow prediction harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate synthetic scenes into a dataset directory")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val", help="validation dataset (default: hold out train.val_fraction)")
    t.add_argument("--no-fgat", action="store_true", help="replace FGAT with plain cross-attention")
    t.add_argument("--no-memory", action="store_true", help="disable the time-series memory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="JSON report path; a .txt twin is written alongside")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render predictions for one scene as PNGs")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--data", help="dataset holding the scene (default: paths.dataset from the config)")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, InvalidConfigError, DatasetFormatError, CheckpointError, IncompatibleDataError,
            NonFiniteError, IndexError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
