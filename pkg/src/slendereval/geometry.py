"""Planar geometry kernel: convex hulls, minimum-area rectangles, slenderness,
box overlap measures, and the min-max pseudo box.

Conventions: the coordinate frame is the image pixel plane (x right, y down);
"counter-clockwise" means positive signed area under the shoelace formula.
All values are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "DegeneratePolygonError",
    "Point",
    "Polygon",
    "AABox",
    "OrientedBox",
    "SlendernessBin",
    "AspectGroup",
    "SLENDERNESS_CUTS",
    "DEFAULT_ASPECT_CUTS",
    "convex_hull",
    "min_area_rect",
    "slenderness",
    "classify_slenderness",
    "classify_aspect",
    "iou",
    "giou",
    "iou_matrix",
    "pseudo_box",
    "signed_area",
    "rotate_points",
]

_HALF_PI = 0.5 * math.pi


class GeometryError(ValueError):
    """Invalid geometric input."""


class DegeneratePolygonError(GeometryError):
    """Degenerate polygon: all points collinear or coincident, so it has no
    area and no minimum-area rectangle."""


class Point(NamedTuple):
    x: float
    y: float


def signed_area(vertices) -> float:
    """Shoelace signed area; positive for counter-clockwise vertex order."""
    pts = np.asarray(vertices, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def rotate_points(points, angle: float, about=(0.0, 0.0)) -> np.ndarray:
    """Rotate an (N, 2) point array by `angle` radians around `about`."""
    pts = np.asarray(points, dtype=float) - np.asarray(about, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.asarray(about, dtype=float)


class Polygon:
    """Simple polygon given by ordered vertices (either winding).

    Requires >= 3 vertices, finite coordinates, no two consecutive identical
    vertices, and nonzero signed area.
    """

    __slots__ = ("pts",)

    def __init__(self, vertices):
        pts = np.asarray(vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise GeometryError("polygon needs at least 3 (x, y) vertices")
        if not np.isfinite(pts).all():
            raise GeometryError("polygon vertices must be finite")
        if np.all(pts == np.roll(pts, -1, axis=0), axis=1).any():
            raise GeometryError("polygon has consecutive identical vertices")
        if signed_area(pts) == 0.0:
            raise DegeneratePolygonError("degenerate polygon: zero signed area")
        pts.setflags(write=False)
        self.pts = pts

    @property
    def vertices(self) -> list[Point]:
        return [Point(float(x), float(y)) for x, y in self.pts]

    @property
    def area(self) -> float:
        return abs(signed_area(self.pts))

    def __len__(self) -> int:
        return len(self.pts)

    def __repr__(self) -> str:
        return f"Polygon({self.pts.tolist()!r})"


@dataclass(frozen=True)
class AABox:
    """Axis-aligned box in (left, top, width, height) form, the COCO bbox
    layout. Zero-extent boxes are representable (see `degenerate`); negative
    extents are rejected."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise GeometryError("box coordinates must be finite")
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"box extents must be non-negative, got {self.w}x{self.h}")

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def degenerate(self) -> bool:
        return self.w == 0.0 or self.h == 0.0

    def aspect_ratio(self) -> float:
        """Width over height of the axis-aligned box. This is the biased
        slenderness proxy: it mistakes oriented slender objects for regular
        ones, which is why `slenderness` works on the oriented box instead."""
        if self.w <= 0 or self.h <= 0:
            raise GeometryError("aspect ratio undefined for zero-extent box")
        return self.w / self.h

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle. The stored angle is normalized to [0, pi/2) by
    swapping width/height when needed; slenderness is orientation-free, so the
    normalization is presentation-only."""

    center: Point
    w: float
    h: float
    angle: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"oriented box sides must be positive, got {self.w}x{self.h}")
        a = self.angle % math.pi
        w, h = self.w, self.h
        if a >= _HALF_PI:
            a -= _HALF_PI
            w, h = h, w
        a = max(a, 0.0)
        object.__setattr__(self, "angle", a)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "center", Point(float(self.center[0]), float(self.center[1])))

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """Corner coordinates, (4, 2), counter-clockwise from the corner at
        (-w/2, -h/2) in box frame."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = 0.5 * self.w, 0.5 * self.h
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center)


class SlendernessBin(IntEnum):
    """Slenderness bins, ordered from most slender to regular."""

    XS = 0
    S = 1
    R = 2


class AspectGroup(IntEnum):
    """Aspect-ratio groups of the axis-aligned box, from extra tall to extra
    wide."""

    XT = 0
    T = 1
    M = 2
    W = 3
    XW = 4


# Bin cut points: below the first cut is XS, below the second is S, the rest
# is R. Boundaries are left-closed (s == 1/5 -> S, s == 1/3 -> R).
SLENDERNESS_CUTS = (1.0 / 5.0, 1.0 / 3.0)

# Aspect group cuts (r <= c0 -> XT, r <= c1 -> T, r < c2 -> M, r < c3 -> W,
# else XW), symmetric with the slenderness cuts.
DEFAULT_ASPECT_CUTS = (1.0 / 5.0, 1.0 / 3.0, 3.0, 5.0)


def _as_point_array(obj) -> np.ndarray:
    if isinstance(obj, Polygon):
        return obj.pts
    pts = np.asarray(obj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("expected an (N, 2) point array or Polygon")
    if not np.isfinite(pts).all():
        raise GeometryError("points must be finite")
    return pts


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _hull_points(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull. Returns vertices in counter-clockwise
    order starting at the lexicographically smallest point; collinear and
    interior points are dropped."""
    pts = np.unique(pts, axis=0)  # sorts lexicographically
    if len(pts) < 3:
        raise DegeneratePolygonError("degenerate polygon: fewer than 3 distinct points")

    def half(points):
        out: list[np.ndarray] = []
        for p in points:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegeneratePolygonError("degenerate polygon: all points collinear")
    return np.array(hull)


def convex_hull(poly) -> Polygon:
    """Convex hull of a Polygon or raw (N, 2) point array, counter-clockwise.

    Raises DegeneratePolygonError when all points are collinear.
    """
    return Polygon(_hull_points(_as_point_array(poly)))


def min_area_rect(poly) -> OrientedBox:
    """Minimum-area rectangle covering a Polygon or raw (N, 2) point array.

    Rotating-calipers construction: the optimal rectangle has one side
    collinear with a hull edge, so only hull edge directions are searched.

    Tie handling: the minimum is not always unique (for an acute triangle
    every edge-flush rectangle has the same area), and float noise must not
    pick different shapes for rotated copies of one polygon. Among candidates
    within 1e-9 relative of the minimal area the thinnest rectangle wins (a
    rotation-invariant key); remaining ties go to the smallest angle.
    """
    hull = _hull_points(_as_point_array(poly))
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), _HALF_PI)
    angles = angles[angles < _HALF_PI]  # guard against float wrap at the modulus
    angles = np.unique(angles)

    cos, sin = np.cos(angles), np.sin(angles)
    u = hull @ np.vstack([cos, sin])  # (N, A) projections along each edge direction
    v = hull @ np.vstack([-sin, cos])
    u_min, u_max = u.min(axis=0), u.max(axis=0)
    v_min, v_max = v.min(axis=0), v.max(axis=0)
    widths = u_max - u_min
    heights = v_max - v_min
    areas = widths * heights

    near = np.flatnonzero(areas <= areas.min() * (1.0 + 1e-9))
    min_side = np.minimum(widths[near], heights[near])
    k = int(near[np.lexsort((angles[near], min_side))[0]])
    cu = 0.5 * (u_min[k] + u_max[k])
    cv = 0.5 * (v_min[k] + v_max[k])
    center = Point(cu * cos[k] - cv * sin[k], cu * sin[k] + cv * cos[k])
    return OrientedBox(center, float(widths[k]), float(heights[k]), float(angles[k]))


def slenderness(ob: OrientedBox) -> float:
    """Slenderness of an oriented box: shorter side over longer side, in
    (0, 1]. 1 means square; values near 0 mean needle-like."""
    return min(ob.w, ob.h) / max(ob.w, ob.h)


def classify_slenderness(s: float) -> SlendernessBin:
    """Map a slenderness value to its bin: XS below 1/5, S in [1/5, 1/3),
    R at or above 1/3."""
    if not (0.0 < s <= 1.0):
        raise GeometryError(f"slenderness must lie in (0, 1], got {s}")
    if s < SLENDERNESS_CUTS[0]:
        return SlendernessBin.XS
    if s < SLENDERNESS_CUTS[1]:
        return SlendernessBin.S
    return SlendernessBin.R


def classify_aspect(r_b: float, cuts: Sequence[float] = DEFAULT_ASPECT_CUTS) -> AspectGroup:
    """Map a width/height ratio to its aspect group.

    Default cuts: r <= 1/5 XT, (1/5, 1/3] T, (1/3, 3) M, [3, 5) W, >= 5 XW.
    """
    if not (r_b > 0):
        raise GeometryError(f"aspect ratio must be positive, got {r_b}")
    c0, c1, c2, c3 = cuts
    if r_b <= c0:
        return AspectGroup.XT
    if r_b <= c1:
        return AspectGroup.T
    if r_b < c2:
        return AspectGroup.M
    if r_b < c3:
        return AspectGroup.W
    return AspectGroup.XW


def iou(a: AABox, b: AABox) -> float:
    """Intersection over union of two axis-aligned boxes, in [0, 1]."""
    iw = min(a.right, b.right) - max(a.x, b.x)
    ih = min(a.bottom, b.bottom) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    # inter <= union mathematically; the clamp only absorbs rounding noise
    return min(inter / union, 1.0) if union > 0 else 0.0


def giou(a: AABox, b: AABox) -> float:
    """Generalized IoU: IoU minus the fraction of the enclosing box not
    covered by the union. Ranges over [-1, 1] and equals IoU whenever the
    enclosing box coincides with the union."""
    iw = min(a.right, b.right) - max(a.x, b.x)
    ih = min(a.bottom, b.bottom) - max(a.y, b.y)
    inter = iw * ih if (iw > 0 and ih > 0) else 0.0
    union = a.area + b.area - inter
    hull = (max(a.right, b.right) - min(a.x, b.x)) * (max(a.bottom, b.bottom) - min(a.y, b.y))
    if hull <= 0:
        return 0.0
    base = min(inter / union, 1.0) if union > 0 else 0.0
    return base - max((hull - union) / hull, 0.0)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU of two box sets in (x, y, w, h) rows; returns (N, M)."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + b[:, 2] * b[:, 3] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.minimum(out, 1.0)


def pseudo_box(points) -> AABox:
    """Tightest axis-aligned box over a point set (coordinate min-max).

    A single point yields a zero-extent box; check `AABox.degenerate`.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise GeometryError("pseudo_box needs at least one point")
    if not np.isfinite(pts).all():
        raise GeometryError("points must be finite")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return AABox(float(x0), float(y0), float(x1 - x0), float(y1 - y0))
