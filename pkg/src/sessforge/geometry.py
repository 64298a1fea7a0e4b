"""Oriented 3D boxes: corners, volume, containment and exact IoU.

Boxes are upright: the only rotation is a heading angle about the z axis.
BEV (bird's eye view) intersection of two heading-rotated rectangles is
computed exactly by Sutherland-Hodgman convex polygon clipping, so the
3D IoU here is exact for this box family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# BEV polygon areas below this are treated as empty intersections; shoelace
# sign noise on touching edges stays below it.
AREA_EPS = 1e-12


def wrap_angle(theta: float) -> float:
    """Normalize an angle to [-pi, pi)."""
    return float((theta + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class Box3D:
    """Upright oriented box: class id, center (m), size l/w/h (m), heading (rad).

    ``l`` spans the local x axis, ``w`` the local y axis, ``h`` the z axis.
    The heading rotates the local frame about z. Stored heading is always
    normalized to [-pi, pi).
    """

    class_id: int
    center: np.ndarray
    size: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        size = np.asarray(self.size, dtype=np.float64)
        if center.shape != (3,) or size.shape != (3,):
            raise ValueError("center and size must be 3-vectors")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise ValueError("box coordinates must be finite")
        if np.any(size <= 0):
            raise ValueError(f"box size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])


def validate_point_cloud(points: np.ndarray) -> np.ndarray:
    """Check and return a point cloud as a float64 (n, 3) array, n >= 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"point cloud must have shape (n, 3) with n >= 1, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def rot_z(theta: float) -> np.ndarray:
    """Rotation matrix about the upright (z) axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box: Box3D) -> np.ndarray:
    """Eight corners, (8, 3): bottom face CCW (seen from +z), then top face CCW.

    Corner 0 is the (+l/2, +w/2) corner in the box frame; corners 4..7 repeat
    the same x/y order on the top face.
    """
    dx, dy, dz = box.size / 2.0
    xy = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
    corners = np.empty((8, 3))
    corners[:4, :2] = xy
    corners[:4, 2] = -dz
    corners[4:, :2] = xy
    corners[4:, 2] = dz
    return corners @ rot_z(box.heading).T + box.center


def box_volume(box: Box3D) -> float:
    return box.volume


def contains_points(box: Box3D, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box (boundary inclusive).

    `atol` loosens the face planes; useful when points were sampled on the
    surface and then rounded.
    """
    local = (np.asarray(points, dtype=np.float64) - box.center) @ rot_z(box.heading)
    return np.all(np.abs(local) <= box.size / 2.0 + atol, axis=1)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (m, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`.

    Returns the intersection polygon vertices, possibly empty. Both inputs
    are (m, 2) arrays; `clip` must be convex and counter-clockwise.
    """
    output = [subject[i] for i in range(len(subject))]
    a = clip[-1]
    for b in clip:
        if not output:
            break
        edge = b - a
        inp = output
        output = []
        s = inp[-1]
        s_in = edge[0] * (s[1] - a[1]) - edge[1] * (s[0] - a[0]) >= 0.0
        for e in inp:
            e_in = edge[0] * (e[1] - a[1]) - edge[1] * (e[0] - a[0]) >= 0.0
            if e_in != s_in:
                # segment crosses the clip line: intersect s->e with a->b
                d = e - s
                denom = edge[0] * d[1] - edge[1] * d[0]
                t = (edge[0] * (a[1] - s[1]) - edge[1] * (a[0] - s[0])) / denom
                output.append(s + t * d)
            if e_in:
                output.append(e)
            s, s_in = e, e_in
        a = b
    return np.asarray(output).reshape(-1, 2)


def _bev_polygon(box: Box3D) -> np.ndarray:
    # bottom-face corners are CCW seen from +z, so their xy is a CCW rectangle
    return box_corners(box)[:4, :2]


def iou3d(a: Box3D, b: Box3D) -> float:
    """Exact 3D IoU of two upright oriented boxes; 0 when disjoint."""
    za0, za1 = a.center[2] - a.size[2] / 2.0, a.center[2] + a.size[2] / 2.0
    zb0, zb1 = b.center[2] - b.size[2] / 2.0, b.center[2] + b.size[2] / 2.0
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    dx, dy = a.center[0] - b.center[0], a.center[1] - b.center[1]
    reach = (math.hypot(a.size[0], a.size[1]) + math.hypot(b.size[0], b.size[1])) / 2.0
    if dx * dx + dy * dy >= reach * reach:
        return 0.0
    if a.heading == 0.0 and b.heading == 0.0:
        # axis-aligned footprints: plain rectangle overlap
        ix = (min(a.center[0] + a.size[0] / 2.0, b.center[0] + b.size[0] / 2.0)
              - max(a.center[0] - a.size[0] / 2.0, b.center[0] - b.size[0] / 2.0))
        iy = (min(a.center[1] + a.size[1] / 2.0, b.center[1] + b.size[1] / 2.0)
              - max(a.center[1] - a.size[1] / 2.0, b.center[1] - b.size[1] / 2.0))
        area = max(ix, 0.0) * max(iy, 0.0)
    else:
        area = polygon_area(clip_convex_polygon(_bev_polygon(a), _bev_polygon(b)))
    if area < AREA_EPS:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    return inter / union
