"""Input perturbations: random sub-sampling plus stochastic flip/rotate/scale.

A transform is sampled once per scene and applied consistently to points,
ground-truth boxes and (transformed) teacher proposals, so that both
networks' outputs live in the same coordinate frame. Application order is
fixed: flip, then rotation about z, then uniform scale, all about the
scene-frame origin.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, rot_z, wrap_angle


@dataclass(frozen=True)
class TransformSample:
    """One realization of the stochastic transform set {flip_x, flip_y, rotation, scale}."""

    flip_x: bool
    flip_y: bool
    rotation: float
    scale: float

    @staticmethod
    def identity() -> "TransformSample":
        return TransformSample(False, False, 0.0, 1.0)


@dataclass(frozen=True)
class PerturbConfig:
    subsample_count: int = 1024
    rotation_bound: float = math.radians(30.0)
    scale_min: float = 0.85
    scale_max: float = 1.15
    # ablation switches; disabling one makes its component an exact identity
    enable_flip_x: bool = True
    enable_flip_y: bool = True
    enable_rotation: bool = True
    enable_scaling: bool = True
    # when False the teacher sees the same sub-sample as the student
    independent_subsample: bool = True

    def __post_init__(self):
        if self.subsample_count < 1:
            raise ValueError("subsample_count must be >= 1")
        if not 0.0 <= self.rotation_bound <= math.pi:
            raise ValueError("rotation_bound must lie in [0, pi]")
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")


def sample_transform(config: PerturbConfig, rng: np.random.Generator) -> TransformSample:
    """Draw one transform. Flips fire when a uniform draw exceeds 0.5;
    rotation is uniform on [-bound, +bound], scale uniform on [min, max].
    Disabled components are identities and consume no randomness.
    """
    flip_x = bool(rng.uniform() > 0.5) if config.enable_flip_x else False
    flip_y = bool(rng.uniform() > 0.5) if config.enable_flip_y else False
    omega = float(rng.uniform(-config.rotation_bound, config.rotation_bound)) if config.enable_rotation else 0.0
    scale = float(rng.uniform(config.scale_min, config.scale_max)) if config.enable_scaling else 1.0
    return TransformSample(flip_x, flip_y, omega, scale)


def random_subsample(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m points: without replacement when m <= n, with replacement otherwise."""
    if m < 1:
        raise ValueError("subsample size must be >= 1")
    n = len(points)
    idx = rng.choice(n, size=m, replace=m > n)
    return points[idx]


def transform_points(t: TransformSample, points: np.ndarray) -> np.ndarray:
    out = np.array(points, dtype=np.float64)
    if t.flip_x:
        out[:, 0] = -out[:, 0]
    if t.flip_y:
        out[:, 1] = -out[:, 1]
    if t.rotation != 0.0:
        out = out @ rot_z(t.rotation).T
    return out * t.scale


def inverse_transform_points(t: TransformSample, points: np.ndarray) -> np.ndarray:
    """Undo `transform_points`: unscale, unrotate, then undo the flips."""
    out = np.asarray(points, dtype=np.float64) / t.scale
    if t.rotation != 0.0:
        out = out @ rot_z(-t.rotation).T
    out = np.array(out)
    if t.flip_y:
        out[:, 1] = -out[:, 1]
    if t.flip_x:
        out[:, 0] = -out[:, 0]
    return out


def _transform_heading(t: TransformSample, heading: float) -> float:
    if t.flip_x:
        heading = math.pi - heading
    if t.flip_y:
        heading = -heading
    return wrap_angle(heading + t.rotation)


def transform_box(t: TransformSample, box: Box3D) -> Box3D:
    """Transform a box so its corner set equals the transformed corner set."""
    center = transform_points(t, box.center[None, :])[0]
    return Box3D(
        class_id=box.class_id,
        center=center,
        size=box.size * t.scale,
        heading=_transform_heading(t, box.heading),
    )


def transform_proposals(t: TransformSample, props):
    """Transform a ProposalSet geometrically; class probabilities and
    objectness are untouched. Any backprop cache is dropped."""
    centers = transform_points(t, props.centers)
    headings = np.array([_transform_heading(t, h) for h in props.headings])
    return dataclasses.replace(
        props,
        centers=centers,
        sizes=props.sizes * t.scale,
        headings=headings,
        cache=None,
    )
