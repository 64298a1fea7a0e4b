"""Student/teacher proposal alignment and the three consistency losses.

Proposals are paired by nearest centers in both directions. The center loss
penalizes both directions' alignment distances; the class (KL divergence)
and size (mean squared error) losses use only the teacher-to-student
direction, the teacher acting as the target. All gradients flow into the
student outputs only; teacher outputs are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import OutputGrads, ProposalSet

PROB_FLOOR = 1e-8
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class Alignment:
    """Nearest-center index maps; not necessarily bijective."""

    teacher_to_student: np.ndarray  # for each teacher proposal, a student index
    student_to_teacher: np.ndarray  # for each student proposal, a teacher index


@dataclass(frozen=True)
class ConsistencyWeights:
    lambda_center: float = 1.0
    lambda_class: float = 2.0
    lambda_size: float = 1.0

    def __post_init__(self):
        if min(self.lambda_center, self.lambda_class, self.lambda_size) < 0:
            raise ValueError("consistency weights must be >= 0")


def align(student: ProposalSet, teacher: ProposalSet) -> Alignment | None:
    """Pair each proposal with the nearest center on the other side (lowest
    index on ties). Returns None when either side is empty; all losses are
    defined as zero in that case."""
    if len(student) == 0 or len(teacher) == 0:
        return None
    d = np.linalg.norm(student.centers[:, None, :] - teacher.centers[None, :, :], axis=2)
    return Alignment(
        teacher_to_student=np.argmin(d, axis=0),
        student_to_teacher=np.argmin(d, axis=1),
    )


def center_loss(student: ProposalSet, teacher: ProposalSet,
                alignment: Alignment | None) -> float:
    """Bidirectional sum of aligned center distances, normalized by the
    total number of proposals on both sides."""
    if alignment is None:
        return 0.0
    d_st = np.linalg.norm(
        student.centers - teacher.centers[alignment.student_to_teacher], axis=1)
    d_ts = np.linalg.norm(
        teacher.centers - student.centers[alignment.teacher_to_student], axis=1)
    return float((d_st.sum() + d_ts.sum()) / (len(student) + len(teacher)))


def _clamp_renorm(p: np.ndarray) -> np.ndarray:
    q = np.clip(p, PROB_FLOOR, 1.0)
    return q / q.sum(axis=-1, keepdims=True)


def class_loss(student: ProposalSet, teacher: ProposalSet,
               alignment: Alignment | None) -> float:
    """Mean KL divergence of the aligned student class distribution from
    each teacher distribution; both are floored and renormalized first."""
    if alignment is None:
        return 0.0
    p = _clamp_renorm(student.class_probs[alignment.teacher_to_student])
    q = _clamp_renorm(teacher.class_probs)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


def size_loss(student: ProposalSet, teacher: ProposalSet,
              alignment: Alignment | None) -> float:
    """Mean squared size error over teacher proposals, summed over the
    three size components."""
    if alignment is None:
        return 0.0
    diff = student.sizes[alignment.teacher_to_student] - teacher.sizes
    return float(np.mean(np.sum(diff * diff, axis=1)))


def consistency_grads(student: ProposalSet, teacher: ProposalSet,
                      alignment: Alignment | None,
                      weights: ConsistencyWeights) -> OutputGrads:
    """Gradients of the weighted consistency loss w.r.t. the student's
    pre-activations. Teacher quantities and alignment indices are treated
    as constants."""
    m, k = len(student), student.class_probs.shape[1]
    grads = OutputGrads.zeros(m, k)
    if alignment is None:
        return grads
    n_t = len(teacher)
    denom = m + n_t

    if weights.lambda_center > 0:
        d_c = np.zeros((m, 3))
        diff_st = student.centers - teacher.centers[alignment.student_to_teacher]
        norms = np.linalg.norm(diff_st, axis=1)
        ok = norms > _NORM_EPS
        d_c[ok] += diff_st[ok] / norms[ok, None]
        diff_ts = student.centers[alignment.teacher_to_student] - teacher.centers
        norms = np.linalg.norm(diff_ts, axis=1)
        ok = norms > _NORM_EPS
        np.add.at(d_c, alignment.teacher_to_student[ok], diff_ts[ok] / norms[ok, None])
        grads.d_center += weights.lambda_center * d_c / denom

    if weights.lambda_class > 0:
        d_z = np.zeros((m, k))
        q = _clamp_renorm(teacher.class_probs)
        for j, i in enumerate(alignment.teacher_to_student):
            p_raw = student.class_probs[i]
            p_cl = np.clip(p_raw, PROB_FLOOR, 1.0)
            p = p_cl / p_cl.sum()
            s = np.log(p) - np.log(q[j]) + 1.0
            dp_cl = (s - np.dot(p, s)) / p_cl.sum()
            v = np.where(p_raw > PROB_FLOOR, dp_cl, 0.0)
            d_z[i] += p_raw * (v - np.dot(p_raw, v))
        grads.d_class_logits += weights.lambda_class * d_z / n_t

    if weights.lambda_size > 0:
        d_d = np.zeros((m, 3))
        diff = student.sizes[alignment.teacher_to_student] - teacher.sizes
        np.add.at(d_d, alignment.teacher_to_student, 2.0 * diff)
        # sizes are exp(log-size), so the log-size gradient picks up a factor
        grads.d_log_size += weights.lambda_size * (d_d * student.sizes) / n_t

    return grads


def total_consistency(student: ProposalSet, teacher: ProposalSet,
                      weights: ConsistencyWeights):
    """Weighted sum of the three consistency losses and its gradient w.r.t.
    the student outputs."""
    alignment = align(student, teacher)
    loss = (weights.lambda_center * center_loss(student, teacher, alignment)
            + weights.lambda_class * class_loss(student, teacher, alignment)
            + weights.lambda_size * size_loss(student, teacher, alignment))
    return loss, consistency_grads(student, teacher, alignment, weights)
