"""Geometric simulation of label-assignment strategies, center/slenderness
priors, and the per-bin diagnosis report.

No training is involved: anchors and grid locations are laid out exactly as a
multi-level detector would, and each strategy's positive samples are computed
from geometry alone. Comparing positives-per-object across slenderness bins
exposes why IoU-matched anchors starve slender objects while center-based
assignment does not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import geometry, util
from .cocoio import Annotation, Dataset, NotAnnotatedError
from .geometry import AABox, SlendernessBin

__all__ = [
    "DegenerateBoxError",
    "AnchorGridConfig",
    "GridLocation",
    "BorderDistances",
    "Assignment",
    "AssignmentReport",
    "STRATEGIES",
    "build_grid",
    "build_anchors",
    "assign_iou",
    "assign_inbox",
    "assign_nearest_center",
    "centerness",
    "slender_centerness",
    "diagnose",
]

NEGATIVE = -1
IGNORE = -2

STRATEGIES = ("iou", "inbox", "nearest_center")


class DegenerateBoxError(ValueError):
    """Degenerate box: border distances collapse and the center prior is
    undefined."""


@dataclass(frozen=True)
class AnchorGridConfig:
    """Multi-level anchor grid. Ratios are height/width; each anchor's area
    is (base_size_factor * stride * scale)^2. Defaults follow the standard
    5-level, 3-scale, 3-ratio layout."""

    strides: tuple[int, ...] = (8, 16, 32, 64, 128)
    scales: tuple[float, ...] = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    base_size_factor: float = 4.0

    def __post_init__(self):
        if not self.strides or any(s <= 0 for s in self.strides):
            raise ValueError("strides must be positive")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be positive")
        if self.base_size_factor <= 0:
            raise ValueError("base_size_factor must be positive")


@dataclass(frozen=True)
class GridLocation:
    """One feature-map cell center: (stride/2 + i*stride, stride/2 + j*stride)."""

    x: float
    y: float
    level: int
    stride: int


def build_grid(cfg: AnchorGridConfig, image_w: int, image_h: int) -> list[GridLocation]:
    """Cell centers of every pyramid level covering the image, ordered by
    level, then row, then column. List index is the location id."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    out: list[GridLocation] = []
    for level, stride in enumerate(cfg.strides):
        nx = math.ceil(image_w / stride)
        ny = math.ceil(image_h / stride)
        half = stride / 2.0
        for j in range(ny):
            for i in range(nx):
                out.append(GridLocation(half + i * stride, half + j * stride, level, stride))
    return out


def build_anchors(
    cfg: AnchorGridConfig, image_w: int, image_h: int
) -> list[tuple[GridLocation, AABox]]:
    """All anchors over the image: per cell, one anchor per (scale, ratio),
    centered at the cell. Ordered by level, row, column, scale, ratio; list
    index is the anchor id. Anchors are not clipped to the image."""
    out: list[tuple[GridLocation, AABox]] = []
    for level, stride in enumerate(cfg.strides):
        nx = math.ceil(image_w / stride)
        ny = math.ceil(image_h / stride)
        half = stride / 2.0
        sizes = []
        for scale in cfg.scales:
            base = cfg.base_size_factor * stride * scale
            for ratio in cfg.ratios:
                # w*h = base^2 and h/w = ratio
                w = base / math.sqrt(ratio)
                h = base * math.sqrt(ratio)
                sizes.append((w, h))
        for j in range(ny):
            for i in range(nx):
                loc = GridLocation(half + i * stride, half + j * stride, level, stride)
                for w, h in sizes:
                    out.append((loc, AABox(loc.x - w / 2.0, loc.y - h / 2.0, w, h)))
    return out


@dataclass(frozen=True, eq=False)
class Assignment:
    """Labels per anchor/location (ground-truth id when positive, NEGATIVE,
    or IGNORE) plus the positive unit ids per ground truth. `displaced` lists
    ground truths whose nearest-center location was claimed by a smaller
    object (they still record that location as their positive)."""

    strategy: str
    labels: np.ndarray
    positives: Mapping[int, tuple[int, ...]]
    displaced: tuple[int, ...] = ()

    def positive_count(self, gt_id: int) -> int:
        return len(self.positives.get(gt_id, ()))


def _gt_arrays(gts: Sequence[Annotation]) -> tuple[list[Annotation], np.ndarray]:
    ordered = sorted(gts, key=lambda g: g.id)
    boxes = np.array([g.bbox.as_xywh() for g in ordered], dtype=float).reshape(-1, 4)
    return ordered, boxes


def assign_iou(
    anchors: Sequence[tuple[GridLocation, AABox]],
    gts: Sequence[Annotation],
    pos_thr: float = 0.5,
    neg_thr: float = 0.4,
    force_match: bool = False,
) -> Assignment:
    """Anchor labels by max-IoU matching: positive at or above `pos_thr`
    (assigned to the argmax ground truth, ties to the lower id), negative
    below `neg_thr`, ignore between. With `force_match`, each ground truth
    additionally claims its single best anchor even below `pos_thr`; it is
    off by default so the raw anchor-shape mismatch stays visible."""
    if not (0.0 < neg_thr <= pos_thr < 1.0):
        raise ValueError("need 0 < neg_thr <= pos_thr < 1")
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int64)
    ordered, gt_boxes = _gt_arrays(gts)
    if ordered and anchors:
        anchor_boxes = np.array([a.as_xywh() for _, a in anchors], dtype=float)
        matrix = geometry.iou_matrix(anchor_boxes, gt_boxes)
        best = matrix.max(axis=1)
        best_j = matrix.argmax(axis=1)  # first max = lowest gt id
        pos = best >= pos_thr
        gt_ids = np.array([g.id for g in ordered], dtype=np.int64)
        labels[pos] = gt_ids[best_j[pos]]
        labels[(~pos) & (best >= neg_thr)] = IGNORE
        if force_match:
            for j, gt in enumerate(ordered):
                labels[int(matrix[:, j].argmax())] = gt.id
    positives = {
        g.id: tuple(int(i) for i in np.flatnonzero(labels == g.id)) for g in ordered
    }
    return Assignment("iou", labels, positives)


def assign_inbox(
    locations: Sequence[GridLocation],
    gts: Sequence[Annotation],
) -> Assignment:
    """FCOS-style assignment: a location is positive for the ground truth
    whose box strictly contains it (border points stay negative). When
    several boxes contain a location, the smallest area wins, then the lower
    id."""
    labels = np.full(len(locations), NEGATIVE, dtype=np.int64)
    xy = np.array([(loc.x, loc.y) for loc in locations], dtype=float).reshape(-1, 2)
    ordered = sorted(gts, key=lambda g: (g.bbox.area, g.id))
    for gt in ordered:
        box = gt.bbox
        inside = (
            (xy[:, 0] > box.x) & (xy[:, 0] < box.right)
            & (xy[:, 1] > box.y) & (xy[:, 1] < box.bottom)
        )
        free = inside & (labels == NEGATIVE)
        labels[free] = gt.id
    positives = {
        g.id: tuple(int(i) for i in np.flatnonzero(labels == g.id)) for g in gts
    }
    return Assignment("inbox", labels, positives)


def _nearest_level(area: float, strides: Sequence[int], base_size_factor: float) -> int:
    """Level whose base anchor size best matches sqrt(area); ties go to the
    finer level."""
    target = math.sqrt(max(area, 0.0))
    best, best_gap = 0, float("inf")
    for level, stride in enumerate(strides):
        gap = abs(target - base_size_factor * stride)
        if gap < best_gap:
            best, best_gap = level, gap
    return best


def assign_nearest_center(
    locations: Sequence[GridLocation],
    gts: Sequence[Annotation],
    base_size_factor: float = 4.0,
) -> Assignment:
    """RepPoints-style assignment: each ground truth gets exactly one
    positive, the location nearest its box center on the level whose base
    size best matches the box scale. Distance ties go to the lower (y, x).

    When two ground truths pick the same location, the location's label
    carries the smaller-area one (then lower id); the others keep the
    location in their positives but are reported as displaced.
    """
    labels = np.full(len(locations), NEGATIVE, dtype=np.int64)
    strides = sorted({loc.stride for loc in locations})
    by_level: dict[int, list[int]] = {}
    for i, loc in enumerate(locations):
        by_level.setdefault(loc.stride, []).append(i)

    chosen: dict[int, int] = {}  # gt id -> location id
    for gt in sorted(gts, key=lambda g: g.id):
        stride = strides[_nearest_level(gt.bbox.area, strides, base_size_factor)]
        ids = by_level.get(stride, [])
        if not ids:
            continue
        cx = gt.bbox.x + gt.bbox.w / 2.0
        cy = gt.bbox.y + gt.bbox.h / 2.0
        best_i, best_key = -1, None
        for i in ids:
            loc = locations[i]
            key = ((loc.x - cx) ** 2 + (loc.y - cy) ** 2, loc.y, loc.x)
            if best_key is None or key < best_key:
                best_i, best_key = i, key
        chosen[gt.id] = best_i

    by_gt_id = {g.id: g for g in gts}
    claims: dict[int, list[int]] = {}
    for gt_id, loc_id in chosen.items():
        claims.setdefault(loc_id, []).append(gt_id)
    displaced: list[int] = []
    for loc_id, gt_ids in claims.items():
        winner = min(gt_ids, key=lambda gid: (by_gt_id[gid].bbox.area, gid))
        labels[loc_id] = winner
        displaced.extend(gid for gid in gt_ids if gid != winner)

    positives = {
        g.id: ((chosen[g.id],) if g.id in chosen else ()) for g in gts
    }
    return Assignment("nearest_center", labels, positives, tuple(sorted(displaced)))


@dataclass(frozen=True)
class BorderDistances:
    """Distances from a location to the four borders of its box; all
    non-negative, zero exactly on a border."""

    left: float
    right: float
    top: float
    bottom: float

    def __post_init__(self):
        for v in (self.left, self.right, self.top, self.bottom):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"border distances must be finite and >= 0, got {v}")

    @classmethod
    def from_location(cls, x: float, y: float, box: AABox) -> "BorderDistances":
        return cls(x - box.x, box.right - x, y - box.y, box.bottom - y)

    def ratio_product(self) -> float:
        """(min(left,right)/max(left,right)) * (min(top,bottom)/max(top,bottom))."""
        mx_lr = max(self.left, self.right)
        mx_tb = max(self.top, self.bottom)
        if mx_lr == 0.0 or mx_tb == 0.0:
            raise DegenerateBoxError("zero-extent box: centerness undefined")
        return (min(self.left, self.right) / mx_lr) * (min(self.top, self.bottom) / mx_tb)


def centerness(d: BorderDistances) -> float:
    """Center prior: square root of the border-distance ratio product. 1 at
    the exact center, 0 on any border."""
    return math.sqrt(d.ratio_product())


def slender_centerness(d: BorderDistances, s: float) -> float:
    """Slenderness prior: the ratio product raised to the object's
    slenderness instead of 1/2. Identical to `centerness` at s = 1/2; for
    more slender objects (smaller s) the score decays more slowly, keeping
    off-center locations on long thin objects trainable."""
    if not (0.0 < s <= 1.0):
        raise ValueError(f"slenderness must lie in (0, 1], got {s}")
    return d.ratio_product() ** s


@dataclass(frozen=True)
class CellStats:
    """Positive-sample statistics for one (strategy, bin) cell."""

    count: int
    mean_positives: float
    zero_positive_fraction: float
    histogram: Mapping[int, int]


@dataclass(eq=False)
class AssignmentReport:
    """Per-strategy, per-slenderness-bin positive-sample statistics."""

    cells: dict[tuple[str, str], CellStats]
    displaced: dict[str, int] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def zero_fraction(self, strategy: str, b: SlendernessBin) -> float | None:
        cell = self.cells.get((strategy, b.name))
        return None if cell is None else cell.zero_positive_fraction

    def mean_positives(self, strategy: str, b: SlendernessBin) -> float | None:
        cell = self.cells.get((strategy, b.name))
        return None if cell is None else cell.mean_positives

    def to_dict(self) -> dict[str, Any]:
        strategies: dict[str, Any] = {}
        for (strategy, bin_name), cell in sorted(self.cells.items()):
            strategies.setdefault(strategy, {})[bin_name] = {
                "count": cell.count,
                "mean_positives": cell.mean_positives,
                "zero_positive_fraction": cell.zero_positive_fraction,
                "histogram": {str(k): v for k, v in sorted(cell.histogram.items())},
            }
        out: dict[str, Any] = {"strategies": strategies}
        if self.displaced:
            out["displaced"] = dict(sorted(self.displaced.items()))
        if self.meta:
            out["meta"] = self.meta
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["strategy,bin,mean_positives,zero_positive_fraction,count"]
        for (strategy, bin_name), cell in sorted(
            self.cells.items(), key=lambda kv: (SlendernessBin[kv[0][1]], kv[0][0])
        ):
            lines.append(
                f"{strategy},{bin_name},{cell.mean_positives!r},"
                f"{cell.zero_positive_fraction!r},{cell.count}"
            )
        return "\n".join(lines) + "\n"

    def svg_zero_fraction(self, strategy: str) -> str:
        values = [self.zero_fraction(strategy, b) for b in SlendernessBin]
        return util.svg_bar_chart(
            [b.name for b in SlendernessBin],
            values,
            title=f"zero-positive fraction ({strategy})",
        )


def _run_strategy(
    strategy: str,
    anchors: Sequence[tuple[GridLocation, AABox]],
    locations: Sequence[GridLocation],
    gts: Sequence[Annotation],
    cfg: AnchorGridConfig,
    pos_thr: float,
    neg_thr: float,
    force_match: bool,
) -> Assignment:
    if strategy == "iou":
        return assign_iou(anchors, gts, pos_thr, neg_thr, force_match)
    if strategy == "inbox":
        return assign_inbox(locations, gts)
    if strategy == "nearest_center":
        return assign_nearest_center(locations, gts, cfg.base_size_factor)
    raise ValueError(f"unknown strategy {strategy!r}; known: {', '.join(STRATEGIES)}")


def diagnose(
    ds: Dataset,
    strategies: Sequence[str] = STRATEGIES,
    cfg: AnchorGridConfig = AnchorGridConfig(),
    *,
    pos_thr: float = 0.5,
    neg_thr: float = 0.4,
    force_match: bool = False,
    threads: int = 1,
) -> AssignmentReport:
    """Run each strategy over every image and aggregate positives-per-object
    by slenderness bin.

    The interesting read-out is the zero-positive fraction: objects that no
    anchor or location claims are invisible to training. Slender bins sit
    far above regular ones under IoU assignment and at zero under
    nearest-center assignment.
    """
    if not ds.is_annotated:
        raise NotAnnotatedError("diagnose needs slenderness: run annotate_slenderness first")
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; known: {', '.join(STRATEGIES)}")

    ds.annotations_by_image  # materialize the index before worker threads share it
    needs_anchors = "iou" in strategies
    needs_grid = any(s in strategies for s in ("inbox", "nearest_center"))
    anchor_cache: dict[tuple[int, int], list[tuple[GridLocation, AABox]]] = {}
    grid_cache: dict[tuple[int, int], list[GridLocation]] = {}
    for img in ds.images:
        size = (img.width, img.height)
        if needs_anchors and size not in anchor_cache:
            anchor_cache[size] = build_anchors(cfg, *size)
        if needs_grid and size not in grid_cache:
            grid_cache[size] = build_grid(cfg, *size)

    def run_image(img) -> tuple[dict[tuple[str, str], list[int]], dict[str, int]]:
        gts = [a for a in ds.annotations_by_image[img.id] if not a.iscrowd and a.bin is not None]
        counts: dict[tuple[str, str], list[int]] = {}
        displaced: dict[str, int] = {}
        if not gts:
            return counts, displaced
        size = (img.width, img.height)
        anchors = anchor_cache.get(size, [])
        grid = grid_cache.get(size, [])
        for strategy in strategies:
            assignment = _run_strategy(
                strategy, anchors, grid, gts, cfg, pos_thr, neg_thr, force_match
            )
            for gt in gts:
                counts.setdefault((strategy, gt.bin.name), []).append(
                    assignment.positive_count(gt.id)
                )
            if assignment.displaced:
                displaced[strategy] = displaced.get(strategy, 0) + len(assignment.displaced)
        return counts, displaced

    images = sorted(ds.images, key=lambda im: im.id)
    merged: dict[tuple[str, str], list[int]] = {}
    displaced_total: dict[str, int] = {}
    for counts, displaced in util.parallel_map(run_image, images, threads):
        for key, values in counts.items():
            merged.setdefault(key, []).extend(values)
        for strategy, n in displaced.items():
            displaced_total[strategy] = displaced_total.get(strategy, 0) + n

    cells: dict[tuple[str, str], CellStats] = {}
    for key in sorted(merged):
        values = merged[key]
        histogram: dict[int, int] = {}
        for v in values:
            histogram[v] = histogram.get(v, 0) + 1
        cells[key] = CellStats(
            count=len(values),
            mean_positives=sum(values) / len(values),
            zero_positive_fraction=sum(1 for v in values if v == 0) / len(values),
            histogram=histogram,
        )
    return AssignmentReport(cells, displaced_total)
