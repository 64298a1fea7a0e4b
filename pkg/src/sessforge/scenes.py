"""Synthetic room scenes: boxes on a floor, surface-sampled points, splits.

Every scene is a set of surface-sampled object points plus floor clutter.
Coordinates are quantized to the dataset storage precision (9 significant
digits) at generation time so that saving and re-loading a dataset is
bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, contains_points, rot_z

_MIN_POINTS_PER_BOX = 8

DEFAULT_CLASS_SIZES = (
    (0.55, 0.45, 0.30),
    (0.45, 0.50, 0.55),
    (0.55, 0.50, 0.80),
    (0.45, 0.55, 1.05),
)


class PlacementError(RuntimeError):
    """Object placement failed; the scene spec is too dense."""


class DatasetParseError(ValueError):
    """A dataset file is malformed; carries file and line context."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class SceneSpec:
    class_count: int = 4
    class_size_means: tuple = DEFAULT_CLASS_SIZES
    size_spread: float = 0.10
    objects_min: int = 2
    objects_max: int = 4
    room_extent: float = 3.2
    points_per_object_min: int = 250
    points_per_object_max: int = 400
    clutter_points: int = 384
    margin: float = 0.10
    random_heading: bool = False
    half_surface_occlusion: bool = False

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if len(self.class_size_means) != self.class_count:
            raise ValueError("need one canonical size per class")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("invalid objects_per_scene range")
        if not 0.0 <= self.size_spread < 1.0:
            raise ValueError("size_spread must lie in [0, 1)")
        if any(min(s) <= 0 for s in self.class_size_means):
            raise ValueError("class sizes must be positive")


@dataclass
class LabeledScene:
    scene_id: str
    points: np.ndarray
    boxes: list[Box3D]


@dataclass
class DatasetSplit:
    labeled: list[LabeledScene]
    unlabeled: list[LabeledScene]
    validation: list[LabeledScene]
    seed: int


_q9 = np.frompyfunc(lambda v: float(f"{v:.9g}"), 1, 1)


def _quantize(arr: np.ndarray) -> np.ndarray:
    """Round to the 9-significant-digit storage precision."""
    return _q9(np.asarray(arr, dtype=np.float64)).astype(np.float64)


def _sample_box_surface(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    l, w, h = box.size
    # faces ordered bottom, top, -y, +y, -x, +x; the bottom rests on the
    # floor and is never observed by a scan, so it gets no samples
    areas = np.array([0.0, l * w, l * h, l * h, w * h, w * h])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for f, (au, av, fixed, sign) in enumerate((
            (0, 1, 2, -1.0), (0, 1, 2, 1.0),
            (0, 2, 1, -1.0), (0, 2, 1, 1.0),
            (1, 2, 0, -1.0), (1, 2, 0, 1.0))):
        sel = faces == f
        local[sel, au] = u[sel] * box.size[au]
        local[sel, av] = v[sel] * box.size[av]
        local[sel, fixed] = sign * box.size[fixed] / 2.0
    return local @ rot_z(box.heading).T + box.center


def generate_scene(spec: SceneSpec, rng: np.random.Generator,
                   scene_id: str = "scene") -> LabeledScene:
    """Place objects by rejection sampling and sample their surfaces.

    Raises PlacementError when an object cannot be placed without violating
    the non-overlap margin after 1000 attempts.
    """
    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    boxes: list[Box3D] = []
    radii: list[float] = []
    half_room = spec.room_extent / 2.0
    for _ in range(n_objects):
        placed = False
        for _ in range(1000):
            class_id = int(rng.integers(spec.class_count))
            mean = np.asarray(spec.class_size_means[class_id])
            size = mean * rng.uniform(1.0 - spec.size_spread, 1.0 + spec.size_spread, size=3)
            heading = float(rng.uniform(-math.pi, math.pi)) if spec.random_heading else 0.0
            r_bev = math.hypot(size[0], size[1]) / 2.0
            reach = half_room - r_bev
            if reach <= 0:
                continue
            cx, cy = rng.uniform(-reach, reach, size=2)
            # conservative circle test: implies the BEV footprint gap >= margin
            if all(math.hypot(cx - b.center[0], cy - b.center[1]) >= r_bev + r + spec.margin
                   for b, r in zip(boxes, radii)):
                boxes.append(Box3D(class_id, np.array([cx, cy, size[2] / 2.0]), size, heading))
                radii.append(r_bev)
                placed = True
                break
        if not placed:
            raise PlacementError(
                f"could not place object {len(boxes) + 1}/{n_objects} within 1000 tries")

    chunks = []
    for box in boxes:
        count = int(rng.integers(spec.points_per_object_min, spec.points_per_object_max + 1))
        for _ in range(100):
            pts = _sample_box_surface(box, count, rng)
            if spec.half_surface_occlusion:
                local_x = ((pts - box.center) @ rot_z(box.heading))[:, 0]
                pts = pts[local_x >= 0.0]
            if len(pts) >= _MIN_POINTS_PER_BOX:
                break
        else:
            raise PlacementError(f"box in scene {scene_id} kept fewer than "
                                 f"{_MIN_POINTS_PER_BOX} surface points")
        chunks.append(pts)
    if spec.clutter_points > 0:
        floor = np.zeros((spec.clutter_points, 3))
        floor[:, :2] = rng.uniform(-half_room, half_room, size=(spec.clutter_points, 2))
        chunks.append(floor)
    points = _quantize(np.concatenate(chunks, axis=0))
    boxes = [Box3D(b.class_id, _quantize(b.center), _quantize(b.size),
                   float(f"{b.heading:.9g}")) for b in boxes]
    return LabeledScene(scene_id=scene_id, points=points, boxes=boxes)


def generate_scenes(spec: SceneSpec, count: int, seed: int, prefix: str,
                    stream: int) -> list[LabeledScene]:
    """Generate `count` scenes, each from its own RNG stream keyed by
    (seed, stream, index), so generation order never matters."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, stream, i)))
        out.append(generate_scene(spec, rng, scene_id=f"{prefix}-{i:04d}"))
    return out


def scene_classes(scene: LabeledScene) -> set[int]:
    return {b.class_id for b in scene.boxes}


def split_dataset(scenes: list[LabeledScene], labeled_ratio: float,
                  rng: np.random.Generator, class_count: int | None = None,
                  validation: list[LabeledScene] | None = None,
                  seed: int = 0) -> DatasetSplit:
    """Draw ceil(ratio * N) scenes as the labeled set, redrawing the whole
    set until every class is covered; the rest become unlabeled."""
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError("labeled_ratio must lie in (0, 1]")
    if class_count is None:
        wanted = set().union(*(scene_classes(s) for s in scenes))
    else:
        wanted = set(range(class_count))
    n = len(scenes)
    n_labeled = math.ceil(labeled_ratio * n)
    for _ in range(10_000):
        picked = rng.choice(n, size=n_labeled, replace=False)
        covered = set().union(*(scene_classes(scenes[i]) for i in picked))
        if covered >= wanted:
            mask = np.zeros(n, dtype=bool)
            mask[picked] = True
            return DatasetSplit(
                labeled=[scenes[i] for i in sorted(picked)],
                unlabeled=[s for i, s in enumerate(scenes) if not mask[i]],
                validation=list(validation or []),
                seed=seed,
            )
    raise RuntimeError("no labeled draw covered all classes after 10000 redraws")


def _write_scene(f, scene: LabeledScene) -> None:
    f.write(f"scene {scene.scene_id} {len(scene.points)} {len(scene.boxes)}\n")
    for x, y, z in scene.points:
        f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    for b in scene.boxes:
        c, s = b.center, b.size
        f.write(f"{b.class_id} {c[0]:.9g} {c[1]:.9g} {c[2]:.9g} "
                f"{s[0]:.9g} {s[1]:.9g} {s[2]:.9g} {b.heading:.9g}\n")


def save_dataset(split: DatasetSplit, path, spec: SceneSpec | None = None) -> None:
    """One directory per split part, one text record per scene, plus a
    manifest with membership and the generator seed."""
    root = Path(path)
    manifest = {"seed": split.seed, "splits": {}}
    if spec is not None:
        manifest["spec"] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in vars(spec).items()}
    for name in ("labeled", "unlabeled", "validation"):
        scenes = getattr(split, name)
        manifest["splits"][name] = [s.scene_id for s in scenes]
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for scene in scenes:
            with open(d / f"{scene.scene_id}.txt", "w", encoding="utf-8") as f:
                _write_scene(f, scene)
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_scene(path) -> LabeledScene:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetParseError(path, 1, "empty scene file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "scene":
        raise DatasetParseError(path, 1, f"bad scene header: {lines[0]!r}")
    try:
        n_points, n_boxes = int(head[2]), int(head[3])
    except ValueError:
        raise DatasetParseError(path, 1, f"bad scene counts: {lines[0]!r}") from None
    if len(lines) < 1 + n_points + n_boxes:
        raise DatasetParseError(path, len(lines) + 1,
                                f"truncated: expected {n_points} points and {n_boxes} boxes")
    points = np.empty((n_points, 3))
    for i in range(n_points):
        parts = lines[1 + i].split()
        if len(parts) != 3:
            raise DatasetParseError(path, 2 + i, f"expected 3 point fields, got {len(parts)}")
        try:
            points[i] = [float(p) for p in parts]
        except ValueError:
            raise DatasetParseError(path, 2 + i, f"bad point value in {lines[1 + i]!r}") from None
    boxes = []
    for i in range(n_boxes):
        line_no = 1 + n_points + i
        parts = lines[line_no].split()
        if len(parts) != 8:
            raise DatasetParseError(path, line_no + 1,
                                    f"expected 8 box fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[1:]]
            boxes.append(Box3D(int(parts[0]), np.array(vals[0:3]), np.array(vals[3:6]), vals[6]))
        except ValueError as exc:
            raise DatasetParseError(path, line_no + 1, f"bad box record: {exc}") from None
    return LabeledScene(scene_id=head[1], points=points, boxes=boxes)


def load_dataset(path) -> DatasetSplit:
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetParseError(manifest_path, 1, "missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetParseError(manifest_path, exc.lineno, exc.msg) from None
    parts = {}
    for name in ("labeled", "unlabeled", "validation"):
        ids = manifest.get("splits", {}).get(name, [])
        parts[name] = [_load_scene(root / name / f"{sid}.txt") for sid in ids]
    return DatasetSplit(seed=int(manifest.get("seed", 0)), **parts)


def count_points_in_box(scene: LabeledScene, box: Box3D) -> int:
    # storage quantization can push a surface point an ulp past a face plane
    return int(np.count_nonzero(contains_points(box, scene.points, atol=1e-7)))
