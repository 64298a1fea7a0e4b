"""Command line interface: generate | train | eval | sweep | ablate.

Exit codes: 0 on success, 2 on usage or configuration errors (including
missing or mismatched inputs), 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .config import (ConfigError, ExperimentConfig, apply_disables,
                     config_from_dict, load_config)
from .detector import ParamLayout, load_checkpoint
from .evaluation import evaluate, write_report_csv
from .scenes import DatasetParseError, load_dataset

PERTURBATION_CHOICES = ("flip-x", "flip-y", "rotation", "scaling",
                        "subsample-independence")
CONSISTENCY_CHOICES = ("center", "class", "size")


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, dataset_seed=args.seed,
                      trainer=replace(cfg.trainer, seed=args.seed))
    if getattr(args, "ratio", None) is not None:
        cfg = replace(cfg, ratio=args.ratio)
    if getattr(args, "mode", None) is not None:
        cfg = replace(cfg, mode=args.mode)
    if getattr(args, "ratios", None):
        cfg = replace(cfg, ratios=tuple(args.ratios))
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(args.seeds))
    cfg = apply_disables(cfg,
                         perturbations=getattr(args, "disable_perturbation", None) or (),
                         consistency=getattr(args, "disable_consistency", None) or ())
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    split = harness.generate_dataset(cfg, args.out)
    print(f"wrote {len(split.labeled)} train + {len(split.validation)} validation "
          f"scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    summary = harness.run_single(cfg, args.out, data_dir=args.data)
    print(f"{cfg.mode} run (ratio {cfg.ratio:g}, seed {cfg.trainer.seed}): "
          f"mAP@0.25 inductive {summary['map25_inductive']:.4f}, "
          f"transductive {summary['map25_transductive']:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    if args.config:
        cfg = load_config(args.config)
    else:
        manifest = ckpt_path.parent / "manifest.json"
        if not manifest.exists():
            raise ConfigError(f"no --config given and {manifest} not found")
        cfg = load_config(manifest)

    params, entries = load_checkpoint(ckpt_path)
    layout = ParamLayout.for_config(cfg.detector)
    if entries != layout.entries():
        raise ConfigError("checkpoint layout does not match the detector config "
                          "(class count or width differs)")
    dataset = load_dataset(args.data)
    max_class = max((b.class_id for s in dataset.labeled + dataset.unlabeled
                     + dataset.validation for b in s.boxes), default=-1)
    if max_class >= cfg.detector.class_count:
        raise ConfigError(f"dataset has class ids up to {max_class} but the "
                          f"checkpoint was trained with K={cfg.detector.class_count}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = ("inductive", "transductive") if args.mode == "both" else (args.mode,)
    for mode in modes:
        if mode == "inductive":
            scenes = dataset.validation
        else:
            split = harness.resplit(dataset, cfg.ratio, cfg.trainer.seed,
                                    cfg.detector.class_count)
            scenes = split.unlabeled
        if not scenes:
            raise ConfigError(f"no scenes available for {mode} evaluation")
        report = evaluate(params, cfg.detector, scenes, mode=mode)
        write_report_csv(report, out / f"eval_{mode}.csv")
        print(f"{mode}: mAP@0.25 {report.map[0.25]:.4f}, mAP@0.5 {report.map[0.5]:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    table = harness.sweep(cfg, args.data, args.out)
    print(f"wrote {Path(args.out) / 'sweep.csv'} ({len(table)} aggregate rows)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    grids = ("consistency", "perturbation") if args.grid == "both" else (args.grid,)
    tables = harness.ablate(cfg, args.data, args.out, grids=grids)
    for name, rows in tables.items():
        print(f"wrote {Path(args.out) / f'ablation_{name}.csv'} ({len(rows)} rows)")
    return 0


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="INI or JSON config (a run manifest also works)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the run seed")
    if data:
        p.add_argument("--data", required=True, help="dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sessforge",
        description="Mean-teacher semi-supervised 3D detection sandbox")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    _add_common(p, data=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one run")
    _add_common(p)
    p.add_argument("--ratio", type=float, help="labeled fraction of the train pool")
    p.add_argument("--mode", choices=("baseline", "sess"))
    p.add_argument("--disable-perturbation", action="append",
                   choices=PERTURBATION_CHOICES)
    p.add_argument("--disable-consistency", action="append",
                   choices=CONSISTENCY_CHOICES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("inductive", "transductive", "both"),
                   default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="label-ratio sweep over seeds and modes")
    _add_common(p)
    p.add_argument("--ratios", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="consistency and perturbation ablation grids")
    _add_common(p)
    p.add_argument("--ratio", type=float)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--grid", choices=("consistency", "perturbation", "both"),
                   default="both")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
