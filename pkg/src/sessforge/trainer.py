"""Mean-teacher training loop: dual sub-sampling, perturbation, student
update by gradient descent, teacher update by exponential moving average.

A run has two phases. Phase one pretrains the detector on labeled scenes
only (plain supervised steps); its final weights initialize both student
and teacher. Phase two then trains the student on the supervised loss plus
the ramped consistency loss against the teacher, updating the teacher by
EMA after every optimizer step. The supervised-only baseline arm is the
same loop with no unlabeled scenes and a zero consistency weight, so the
two arms are bit-comparable.

All randomness derives from the run seed: one stream for batch draws, one
per (seed, step, slot) for each scene's sub-samples and transform, so runs
are reproducible regardless of how work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import detector
from .consistency import (ConsistencyWeights, align, center_loss, class_loss,
                          consistency_grads, size_loss)
from .detector import AdamState, DetectorConfig, OutputGrads
from .evaluation import evaluate
from .perturb import (PerturbConfig, random_subsample, sample_transform,
                      transform_box, transform_points, transform_proposals)
from .scenes import DatasetSplit, LabeledScene

METRIC_COLUMNS = ("epoch", "sup_loss", "cons_center", "cons_class", "cons_size",
                  "cons_weight", "lr", "val_map25")


@dataclass(frozen=True)
class TrainerConfig:
    labeled_batch: int = 2
    unlabeled_batch: int = 8
    epochs: int = 100
    pretrain_epochs: int = 30
    rampup_epochs: int = 30
    consistency_max: float = 10.0
    ema_alpha_rampup: float = 0.99
    ema_alpha_main: float = 0.999
    learning_rate: float = 1e-3
    lr_decay_epoch: int = 80
    lr_decay_factor: float = 0.1
    seed: int = 0
    eval_every: int = 1
    eval_with_teacher: bool = False

    def __post_init__(self):
        if self.labeled_batch < 1:
            raise ValueError("labeled_batch must be >= 1")
        if self.unlabeled_batch < 0:
            raise ValueError("unlabeled_batch must be >= 0")
        for a in (self.ema_alpha_rampup, self.ema_alpha_main):
            if not 0.0 <= a < 1.0:
                raise ValueError("EMA alpha must lie in [0, 1)")
        if self.rampup_epochs > self.epochs:
            raise ValueError("rampup_epochs cannot exceed epochs")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig
    perturb: PerturbConfig
    consistency: ConsistencyWeights
    trainer: TrainerConfig


@dataclass
class TrainState:
    student: np.ndarray
    teacher: np.ndarray
    adam: AdamState
    epoch: int = 0
    step: int = 0


def ema_update(teacher: np.ndarray, student: np.ndarray, alpha: float) -> np.ndarray:
    """Exponential moving average: new teacher = alpha*teacher + (1-alpha)*student."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    return alpha * teacher + (1.0 - alpha) * student


def rampup_weight(epoch: int, config: TrainerConfig) -> float:
    """Consistency coefficient: max * exp(-5 (1-T)^2) with T rising linearly
    from 0 to 1 over the ramp-up epochs, then held at the maximum."""
    if config.rampup_epochs <= 0:
        t = 1.0
    else:
        t = min(epoch / config.rampup_epochs, 1.0)
    return config.consistency_max * math.exp(-5.0 * (1.0 - t) ** 2)


def alpha_for_epoch(epoch: int, config: TrainerConfig) -> float:
    return config.ema_alpha_rampup if epoch < config.rampup_epochs else config.ema_alpha_main


def lr_for_epoch(epoch: int, config: TrainerConfig) -> float:
    lr = config.learning_rate
    if epoch >= config.lr_decay_epoch:
        lr *= config.lr_decay_factor
    return lr


def make_batch(split: DatasetSplit, b_l: int, b_u: int,
               rng: np.random.Generator) -> list[tuple[LabeledScene, bool]]:
    """Uniform draws with replacement: b_l labeled scenes then b_u unlabeled."""
    if b_l > 0 and not split.labeled:
        raise ValueError("labeled pool is empty")
    if b_u > 0 and not split.unlabeled:
        raise ValueError("unlabeled pool is empty")
    batch = [(split.labeled[i], True)
             for i in rng.integers(len(split.labeled), size=b_l)]
    if b_u > 0:
        batch += [(split.unlabeled[i], False)
                  for i in rng.integers(len(split.unlabeled), size=b_u)]
    return batch


def _scene_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 2, step, slot)))


def train_step(state: TrainState, batch: list[tuple[LabeledScene, bool]],
               cfg: RunConfig, weight: float, alpha: float, lr: float) -> dict:
    """One optimizer step over a batch; returns the step's loss components.

    Per scene: two independent sub-samples are drawn; the student consumes
    the transformed first one, the teacher the raw second one, and teacher
    proposals are mapped through the same transform before the consistency
    terms are computed. Ground truth follows the student's transform.
    """
    det, pconf = cfg.detector, cfg.perturb
    n_labeled = sum(1 for _, lab in batch if lab)
    grad = np.zeros_like(state.student)
    sup_losses, cons_c, cons_k, cons_s = [], [], [], []

    for slot, (scene, is_labeled) in enumerate(batch):
        rng = _scene_rng(cfg.trainer.seed, state.step, slot)
        x_s = random_subsample(scene.points, pconf.subsample_count, rng)
        if pconf.independent_subsample:
            x_t = random_subsample(scene.points, pconf.subsample_count, rng)
        else:
            x_t = x_s.copy()
        t = sample_transform(pconf, rng)

        props = detector.forward(state.student, transform_points(t, x_s), det)
        out_grads = OutputGrads.zeros(len(props), det.class_count)

        if is_labeled:
            gt = [transform_box(t, b) for b in scene.boxes]
            sup, sup_g = detector.supervised_loss(props, gt, det)
            sup_losses.append(sup)
            out_grads.add_scaled(sup_g, 1.0 / n_labeled)

        if weight > 0.0:
            t_props = transform_proposals(t, detector.forward(state.teacher, x_t, det))
            alignment = align(props, t_props)
            cons_c.append(center_loss(props, t_props, alignment))
            cons_k.append(class_loss(props, t_props, alignment))
            cons_s.append(size_loss(props, t_props, alignment))
            out_grads.add_scaled(
                consistency_grads(props, t_props, alignment, cfg.consistency),
                weight / len(batch))

        grad += detector.backward(state.student, props.cache, out_grads, det)

    state.student = detector.adam_step(state.student, grad, state.adam, lr)
    state.teacher = ema_update(state.teacher, state.student, alpha)
    state.step += 1
    return {
        "sup_loss": float(np.mean(sup_losses)) if sup_losses else 0.0,
        "cons_center": float(np.mean(cons_c)) if cons_c else 0.0,
        "cons_class": float(np.mean(cons_k)) if cons_k else 0.0,
        "cons_size": float(np.mean(cons_s)) if cons_s else 0.0,
        "cons_weight": weight,
        "lr": lr,
    }


def _steps_per_epoch(pool: int, batch: int) -> int:
    return max(1, math.ceil(pool / batch))


def train(split: DatasetSplit, cfg: RunConfig, mode: str = "sess"):
    """Full run: supervised pretraining, then the mean-teacher phase (or a
    supervised continuation for the baseline arm). Returns the final state
    and one metrics row per epoch."""
    if mode not in ("sess", "baseline"):
        raise ValueError(f"unknown mode {mode!r}")
    tc = cfg.trainer
    rng_init = np.random.default_rng(np.random.SeedSequence((tc.seed, 0)))
    student = detector.init_params(cfg.detector, rng_init)
    state = TrainState(student=student, teacher=student.copy(),
                       adam=AdamState.zeros(len(student)))
    batch_rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 1)))
    rows: list[dict] = []
    last_val = float("nan")

    def run_phase(n_epochs: int, b_u: int, consistency_on: bool):
        nonlocal last_val
        pool = len(split.labeled) + (len(split.unlabeled) if b_u > 0 else 0)
        steps = _steps_per_epoch(pool, tc.labeled_batch + b_u)
        for epoch in range(n_epochs):
            state.epoch = epoch
            weight = rampup_weight(epoch, tc) if consistency_on else 0.0
            alpha = alpha_for_epoch(epoch, tc)
            lr = lr_for_epoch(epoch, tc)
            acc: dict = {}
            for _ in range(steps):
                batch = make_batch(split, tc.labeled_batch, b_u, batch_rng)
                m = train_step(state, batch, cfg, weight, alpha, lr)
                for k, v in m.items():
                    acc[k] = acc.get(k, 0.0) + v
            row = {k: acc[k] / steps for k in acc}
            if split.validation and (epoch % tc.eval_every == 0 or epoch == n_epochs - 1):
                params = state.teacher if tc.eval_with_teacher else state.student
                report = evaluate(params, cfg.detector, split.validation,
                                  thresholds=(0.25,), mode="inductive")
                last_val = report.map[0.25]
            row["val_map25"] = last_val
            row["epoch"] = len(rows)
            rows.append(row)

    run_phase(tc.pretrain_epochs, 0, consistency_on=False)
    # both networks start the second phase from the pretrained weights
    state.teacher = state.student.copy()
    state.adam = AdamState.zeros(len(state.student))
    run_phase(tc.epochs, tc.unlabeled_batch if mode == "sess" else 0,
              consistency_on=(mode == "sess"))
    return state, rows


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.12g}"
