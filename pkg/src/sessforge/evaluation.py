"""Detection post-processing and metrics: NMS, greedy matching, AP/mAP.

The protocol is class-agnostic greedy NMS followed by per-class greedy
matching against ground truth at one or more IoU thresholds, with
all-point interpolated average precision. Evaluation is deterministic;
ties are always broken toward the earlier element.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detector
from .geometry import Box3D, iou3d
from .scenes import LabeledScene

DEFAULT_SCORE_FLOOR = 0.05
DEFAULT_NMS_IOU = 0.25


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    scene_id: str


@dataclass
class EvalReport:
    mode: str
    thresholds: tuple
    ap: dict            # {threshold: {class_id: ap}}
    map: dict           # {threshold: float}
    gt_counts: dict     # {class_id: int}
    det_counts: dict    # {class_id: int}
    score_floor: float
    nms_iou: float


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Class-agnostic greedy suppression. Detections are ranked by score
    (ties by original position); one is kept iff its IoU with every
    already-kept detection stays below the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = np.argsort([-d.score for d in dets], kind="stable")
    kept: list[Detection] = []
    for i in order:
        cand = dets[i]
        if all(iou3d(cand.box, k.box) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


def match_detections(dets: list[Detection], gts: list[tuple[str, Box3D]],
                     iou_threshold: float) -> np.ndarray:
    """TP/FP flags for detections already sorted by descending score.

    Within its own scene and class, each detection greedily claims the
    still-unclaimed ground truth of highest IoU, provided that IoU reaches
    the threshold; every ground truth can be claimed once.
    """
    by_key: dict[tuple, list[int]] = {}
    for j, (scene_id, box) in enumerate(gts):
        by_key.setdefault((scene_id, box.class_id), []).append(j)
    claimed = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(dets), dtype=bool)
    for i, det in enumerate(dets):
        best_j, best_iou = -1, 0.0
        for j in by_key.get((det.scene_id, det.box.class_id), ()):
            if claimed[j]:
                continue
            v = iou3d(det.box, gts[j][1])
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_threshold:
            claimed[best_j] = True
            flags[i] = True
    return flags


def average_precision(tp_flags, gt_count: int) -> float:
    """All-point interpolated AP: the area under the precision envelope
    p(r) = max precision at recall >= r. Returns 0 when gt_count is 0;
    such classes are excluded from mAP by the caller."""
    if gt_count < 0:
        raise ValueError("gt_count must be >= 0")
    if gt_count == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    recall = tp / gt_count
    precision = tp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def detect_scene(params: np.ndarray, config: detector.DetectorConfig,
                 scene: LabeledScene, score_floor: float = DEFAULT_SCORE_FLOOR,
                 nms_iou: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Forward one scene and post-process into detections."""
    props = detector.forward(params, scene.points, config)
    raw = []
    for j in range(len(props)):
        if props.objectness[j] < score_floor:
            continue
        if not (np.all(np.isfinite(props.centers[j])) and np.all(np.isfinite(props.sizes[j]))):
            continue  # a diverged run should not crash evaluation
        box = Box3D(int(np.argmax(props.class_probs[j])), props.centers[j],
                    props.sizes[j], float(props.headings[j]))
        raw.append(Detection(box=box, score=float(props.objectness[j]), scene_id=scene.scene_id))
    return nms(raw, nms_iou)


def evaluate(params: np.ndarray, config: detector.DetectorConfig,
             scenes: list[LabeledScene], thresholds=(0.25, 0.5),
             mode: str = "inductive", score_floor: float = DEFAULT_SCORE_FLOOR,
             nms_iou: float = DEFAULT_NMS_IOU) -> EvalReport:
    """Detect on every scene and compute per-class AP and mAP at each IoU
    threshold. mAP averages only classes with at least one ground truth."""
    if not scenes:
        raise ValueError("cannot evaluate an empty scene list")
    dets: list[Detection] = []
    gts: list[tuple[str, Box3D]] = []
    for scene in scenes:
        dets.extend(detect_scene(params, config, scene, score_floor, nms_iou))
        gts.extend((scene.scene_id, b) for b in scene.boxes)
    dets.sort(key=lambda d: -d.score)  # stable: scene order breaks ties

    classes = sorted({b.class_id for _, b in gts} | {d.box.class_id for d in dets}
                     | set(range(config.class_count)))
    gt_counts = {c: sum(1 for _, b in gts if b.class_id == c) for c in classes}
    det_counts = {c: sum(1 for d in dets if d.box.class_id == c) for c in classes}

    ap: dict = {}
    mean_ap: dict = {}
    for thr in thresholds:
        flags = match_detections(dets, gts, thr)
        ap[thr] = {}
        for c in classes:
            sel = [i for i, d in enumerate(dets) if d.box.class_id == c]
            ap[thr][c] = average_precision(flags[sel], gt_counts[c])
        scored = [ap[thr][c] for c in classes if gt_counts[c] > 0]
        mean_ap[thr] = float(np.mean(scored)) if scored else 0.0
    return EvalReport(mode=mode, thresholds=tuple(thresholds), ap=ap, map=mean_ap,
                      gt_counts=gt_counts, det_counts=det_counts,
                      score_floor=score_floor, nms_iou=nms_iou)


def write_report_csv(report: EvalReport, path) -> None:
    """One row per (class, threshold) plus an `mAP` summary row per threshold."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# mode={report.mode} score_floor={report.score_floor:g} "
                f"nms_iou={report.nms_iou:g}\n")
        w = csv.writer(f)
        w.writerow(["class", "iou_thresh", "ap", "gt_count", "det_count"])
        for thr in report.thresholds:
            for c in sorted(report.gt_counts):
                w.writerow([c, f"{thr:g}", f"{report.ap[thr][c]:.10g}",
                            report.gt_counts[c], report.det_counts[c]])
            w.writerow(["mAP", f"{thr:g}", f"{report.map[thr]:.10g}",
                        sum(report.gt_counts.values()), sum(report.det_counts.values())])
