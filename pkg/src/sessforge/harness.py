"""Experiment orchestration: single runs, label-ratio sweeps and ablations.

Every run writes a checkpoint, a per-epoch metrics CSV and a manifest whose
JSON is itself a valid --config file, so any run is reproducible from its
manifest alone. Sweep and ablation cells are independent and may execute in
parallel worker processes; SESS_FORGE_THREADS caps the worker count.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import detector, evaluation, trainer
from .config import ExperimentConfig, apply_disables, config_to_dict
from .scenes import (DatasetSplit, generate_scenes, load_dataset, save_dataset,
                     split_dataset)

WORKERS_ENV = "SESS_FORGE_THREADS"

# Table-style ablation grids: enabled consistency terms, and perturbation
# variants as (row name, flags to disable).
CONSISTENCY_GRID = (
    ("center",),
    ("class",),
    ("size",),
    ("class", "size"),
    ("center", "size"),
    ("center", "class"),
    ("center", "class", "size"),
)
PERTURBATION_GRID = (
    ("full", ()),
    ("no-flip-x", ("flip-x",)),
    ("no-flip-y", ("flip-y",)),
    ("no-rotation", ("rotation",)),
    ("no-scaling", ("scaling",)),
    ("no-subsample-independence", ("subsample-independence",)),
    ("none", ("all",)),
)


def worker_count(n_cells: int) -> int:
    cap = os.environ.get(WORKERS_ENV)
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_cells, limit))


def generate_dataset(cfg: ExperimentConfig, out_dir) -> DatasetSplit:
    """Generate the train pool and validation scenes and save them."""
    train = generate_scenes(cfg.scene, cfg.train_scenes, cfg.dataset_seed, "train", 0)
    val = generate_scenes(cfg.scene, cfg.val_scenes, cfg.dataset_seed, "val", 1)
    split = DatasetSplit(labeled=train, unlabeled=[], validation=val,
                         seed=cfg.dataset_seed)
    save_dataset(split, out_dir, spec=cfg.scene)
    return split


def resplit(dataset: DatasetSplit, ratio: float, seed: int, class_count: int) -> DatasetSplit:
    """Re-divide the train pool into labeled/unlabeled for one run; the
    draw is keyed by the run seed so every seed resamples its own split."""
    pool = dataset.labeled + dataset.unlabeled
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    return split_dataset(pool, ratio, rng, class_count=class_count,
                         validation=dataset.validation, seed=seed)


def run_single(cfg: ExperimentConfig, out_dir, dataset: DatasetSplit | None = None,
               data_dir=None) -> dict:
    """Train one (ratio, seed, mode) cell and evaluate it both ways.

    Writes checkpoint.txt, metrics.csv, manifest.json and the evaluation
    reports under `out_dir`; returns a summary of the headline metrics.
    """
    if dataset is None:
        dataset = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.trainer.seed
    split = resplit(dataset, cfg.ratio, seed, cfg.detector.class_count)

    run_cfg = trainer.RunConfig(cfg.detector, cfg.perturb, cfg.consistency, cfg.trainer)
    state, rows = trainer.train(split, run_cfg, cfg.mode)

    layout = detector.ParamLayout.for_config(cfg.detector)
    detector.save_checkpoint(out / "checkpoint.txt", state.student, layout)
    trainer.write_metrics_csv(rows, out / "metrics.csv")
    manifest = {
        "config": config_to_dict(cfg),
        "data_dir": str(data_dir) if data_dir is not None else None,
        "dataset_seed": dataset.seed,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    eval_params = state.teacher if cfg.trainer.eval_with_teacher else state.student
    summary = {"ratio": cfg.ratio, "seed": seed, "mode": cfg.mode,
               "out_dir": str(out)}
    report = evaluation.evaluate(eval_params, cfg.detector, split.validation,
                                 mode="inductive")
    evaluation.write_report_csv(report, out / "eval_inductive.csv")
    summary["map25_inductive"] = report.map[0.25]
    summary["map50_inductive"] = report.map[0.5]
    if split.unlabeled:
        report = evaluation.evaluate(eval_params, cfg.detector, split.unlabeled,
                                     mode="transductive")
        evaluation.write_report_csv(report, out / "eval_transductive.csv")
        summary["map25_transductive"] = report.map[0.25]
        summary["map50_transductive"] = report.map[0.5]
    else:
        summary["map25_transductive"] = float("nan")
        summary["map50_transductive"] = float("nan")
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def _run_cell(args) -> dict:
    cfg, out_dir, dataset = args
    return run_single(cfg, out_dir, dataset=dataset)


def _execute(cells: list[tuple], parallel: bool = True) -> list[dict]:
    n = worker_count(len(cells))
    if not parallel or n <= 1 or len(cells) <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_cell, cells))


def _mean_std(values: list[float]) -> tuple[float, float]:
    if len(values) == 1:
        print("warning: single-seed cell, reporting std as 0", file=sys.stderr)
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


def sweep(cfg: ExperimentConfig, data_dir, out_dir,
          modes=("baseline", "sess")) -> list[dict]:
    """Train and evaluate every (ratio, seed, mode) cell; aggregate to a
    comparison table with the relative improvement of sess over baseline."""
    dataset = load_dataset(data_dir)
    out = Path(out_dir)
    cells = []
    for ratio in cfg.ratios:
        for mode in modes:
            for seed in cfg.seeds:
                cell_cfg = replace(cfg, ratio=ratio, mode=mode,
                                   trainer=replace(cfg.trainer, seed=seed))
                name = f"r{ratio:g}-{mode}-s{seed}"
                cells.append((cell_cfg, out / "runs" / name, dataset))
    results = _execute(cells)

    table = []
    for ratio in cfg.ratios:
        by_mode = {}
        for mode in modes:
            sel = [r for r in results if r["ratio"] == ratio and r["mode"] == mode]
            row = {"ratio": ratio, "mode": mode, "n_runs": len(sel)}
            for key, col in (("map25_inductive", "map25"),
                             ("map25_transductive", "tmap25"),
                             ("map50_inductive", "map50")):
                mean, std = _mean_std([r[key] for r in sel])
                row[f"{col}_mean"], row[f"{col}_std"] = mean, std
            by_mode[mode] = row
            table.append(row)
        base = by_mode.get("baseline")
        for mode in modes:
            row = by_mode[mode]
            for col in ("map25", "tmap25"):
                if base is None or base[f"{col}_mean"] <= 0:
                    row[f"{col}_improv_pct"] = float("nan")
                else:
                    row[f"{col}_improv_pct"] = ((row[f"{col}_mean"] - base[f"{col}_mean"])
                                                / base[f"{col}_mean"] * 100.0)

    out.mkdir(parents=True, exist_ok=True)
    cols = ["ratio", "mode", "n_runs", "map25_mean", "map25_std", "map25_improv_pct",
            "tmap25_mean", "tmap25_std", "tmap25_improv_pct", "map50_mean", "map50_std"]
    _write_table(out / "sweep.csv", cols, table)
    return table


def ablate(cfg: ExperimentConfig, data_dir, out_dir,
           grids=("consistency", "perturbation")) -> dict:
    """Run the consistency-loss grid (every non-empty on/off combination)
    and the leave-one-out perturbation grid, one row per variant."""
    dataset = load_dataset(data_dir)
    out = Path(out_dir)
    tables: dict = {}

    if "consistency" in grids:
        cells, meta = [], []
        for enabled in CONSISTENCY_GRID:
            disabled = tuple(t for t in ("center", "class", "size") if t not in enabled)
            for seed in cfg.seeds:
                cell_cfg = apply_disables(replace(
                    cfg, mode="sess", trainer=replace(cfg.trainer, seed=seed)),
                    consistency=disabled)
                name = "cons-" + "+".join(enabled) + f"-s{seed}"
                cells.append((cell_cfg, out / "runs" / name, dataset))
                meta.append(enabled)
        results = _execute(cells)
        rows = []
        for enabled in CONSISTENCY_GRID:
            sel = [r for r, e in zip(results, meta) if e == enabled]
            mean, std = _mean_std([r["map25_inductive"] for r in sel])
            rows.append({"center": int("center" in enabled),
                         "class": int("class" in enabled),
                         "size": int("size" in enabled),
                         "n_runs": len(sel), "map25_mean": mean, "map25_std": std})
        out.mkdir(parents=True, exist_ok=True)
        _write_table(out / "ablation_consistency.csv",
                     ["center", "class", "size", "n_runs", "map25_mean", "map25_std"], rows)
        tables["consistency"] = rows

    if "perturbation" in grids:
        cells, meta = [], []
        for variant, disabled in PERTURBATION_GRID:
            for seed in cfg.seeds:
                cell_cfg = apply_disables(replace(
                    cfg, mode="sess", trainer=replace(cfg.trainer, seed=seed)),
                    perturbations=disabled)
                cells.append((cell_cfg, out / "runs" / f"pert-{variant}-s{seed}", dataset))
                meta.append(variant)
        results = _execute(cells)
        rows = []
        for variant, disabled in PERTURBATION_GRID:
            sel = [r for r, v in zip(results, meta) if v == variant]
            mean, std = _mean_std([r["map25_inductive"] for r in sel])
            rows.append({"variant": variant, "disabled": "+".join(disabled) or "-",
                         "n_runs": len(sel), "map25_mean": mean, "map25_std": std})
        out.mkdir(parents=True, exist_ok=True)
        _write_table(out / "ablation_perturbation.csv",
                     ["variant", "disabled", "n_runs", "map25_mean", "map25_std"], rows)
        tables["perturbation"] = rows

    return tables


def _write_table(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)
