"""Detection matching, AP/AR aggregation, slenderness-stratified recall, and
non-maximum suppression.

Protocol notes. Matching is greedy per (image, category): detections in
descending score order each claim the still-unmatched, non-ignored ground
truth with the highest IoU at or above the threshold. Crowd and
out-of-stratum ground truth act as ignore regions: a detection whose only
qualifying overlap is with an ignore region is neither a true nor a false
positive. AP uses 101-point interpolation with a monotone precision
envelope. Recall denominators count non-ignored ground truth only, and the
detections entering the protocol are capped per image (not per category) at
`max_dets` by descending score.

All tie-breaks are pinned for determinism: score ties by ascending detection
id, IoU ties by ascending ground-truth id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import geometry, util
from .cocoio import Annotation, Dataset, Detection, DetectionSet, NotAnnotatedError
from .geometry import AspectGroup, SlendernessBin

__all__ = [
    "SlendernessAPError",
    "EvalConfig",
    "ThresholdMatch",
    "MatchResult",
    "EvalReport",
    "DEFAULT_IOU_THRESHOLDS",
    "COCO_AREA_RANGES",
    "match_detections",
    "average_precision",
    "average_recall",
    "evaluate",
    "nms",
]

# Canonical decimal thresholds 0.50, 0.55, ..., 0.95.
DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# COCO pixel-area cuts, half-open ranges [lo, hi).
COCO_AREA_RANGES = (
    ("small", 0.0, 32.0**2),
    ("medium", 32.0**2, 96.0**2),
    ("large", 96.0**2, float("inf")),
)

STRATUM_KINDS = ("slenderness_bin", "aspect_group", "area_range", "category")

_RECALL_GRID = tuple(k / 100 for k in range(101))


class SlendernessAPError(ValueError):
    """Raised when AP stratified by slenderness bin is requested. A false
    positive matches no ground truth, so it has no slenderness and per-bin
    precision is undefined; per-bin AR is the supported metric."""


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol parameters.

    `strata` selects which stratified sections the report carries;
    `ap_strata` selects where AP (not just AR) is computed. Requesting
    "slenderness_bin" in `ap_strata` is refused by `evaluate`.
    """

    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    max_dets: int = 100
    strata: frozenset[str] = frozenset(STRATUM_KINDS)
    ap_strata: frozenset[str] = frozenset({"category", "aspect_group"})
    area_ranges: tuple[tuple[str, float, float], ...] = COCO_AREA_RANGES
    aspect_cuts: tuple[float, float, float, float] = geometry.DEFAULT_ASPECT_CUTS

    def __post_init__(self):
        if not self.iou_thresholds:
            raise ValueError("need at least one IoU threshold")
        prev = 0.0
        for t in self.iou_thresholds:
            if not (0.0 < t <= 1.0) or t <= prev:
                raise ValueError("iou_thresholds must be strictly increasing within (0, 1]")
            prev = t
        if self.max_dets < 1:
            raise ValueError("max_dets must be >= 1")
        unknown = set(self.strata) - set(STRATUM_KINDS)
        if unknown:
            raise ValueError(f"unknown strata {sorted(unknown)}")
        unknown = set(self.ap_strata) - set(STRATUM_KINDS)
        if unknown:
            raise ValueError(f"unknown ap_strata {sorted(unknown)}")
        for name, lo, hi in self.area_ranges:
            if not lo < hi:
                raise ValueError(f"area range {name!r}: need lo < hi")


@dataclass(frozen=True, eq=False)
class ThresholdMatch:
    """Matching outcome at one IoU threshold. `detections` holds
    (detection_id, matched_gt_id or None, score) for every detection that is
    a true or false positive; detections absorbed by ignore regions are
    listed separately and count as neither."""

    detections: tuple[tuple[int, int | None, float], ...]
    unmatched_gt_ids: tuple[int, ...]
    ignored_gt_ids: tuple[int, ...]
    ignored_det_ids: tuple[int, ...]

    @property
    def num_matched(self) -> int:
        return sum(1 for _, gt, _ in self.detections if gt is not None)


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Greedy matching of one image+category across all thresholds."""

    image_id: int
    category_id: int
    thresholds: tuple[float, ...]
    num_gt: int  # non-ignored ground truth
    by_threshold: Mapping[float, ThresholdMatch]


def match_detections(
    gts: Sequence[Annotation],
    dts: Sequence[Detection],
    cfg: EvalConfig = EvalConfig(),
    *,
    ignore_gt_ids: frozenset[int] | set[int] = frozenset(),
) -> MatchResult:
    """Match one image+category's detections to its ground truth.

    Callers are responsible for the per-image `max_dets` cap before calling.
    Crowd annotations and ids in `ignore_gt_ids` are ignore regions.
    """
    gts = sorted(gts, key=lambda a: a.id)
    dts = sorted(dts, key=lambda d: (-d.score, d.id))
    image_id = gts[0].image_id if gts else (dts[0].image_id if dts else -1)
    category_id = gts[0].category_id if gts else (dts[0].category_id if dts else -1)

    ignore = np.array([g.iscrowd or g.id in ignore_gt_ids for g in gts], dtype=bool)
    num_gt = int((~ignore).sum())
    if gts and dts:
        matrix = geometry.iou_matrix(
            [d.box.as_xywh() for d in dts], [g.bbox.as_xywh() for g in gts]
        )
    else:
        matrix = np.zeros((len(dts), len(gts)))

    by_threshold: dict[float, ThresholdMatch] = {}
    for thr in cfg.iou_thresholds:
        claimed = np.zeros(len(gts), dtype=bool)
        entries: list[tuple[int, int | None, float]] = []
        ignored_dets: list[int] = []
        for di, det in enumerate(dts):
            row = matrix[di]
            avail = (~ignore) & (~claimed) & (row >= thr)
            if avail.any():
                # argmax scans in ascending gt-id order, so IoU ties go to
                # the lower gt id
                j = int(np.argmax(np.where(avail, row, -1.0)))
                claimed[j] = True
                entries.append((det.id, gts[j].id, det.score))
            elif bool((ignore & (row >= thr)).any()):
                ignored_dets.append(det.id)
            else:
                entries.append((det.id, None, det.score))
        unmatched = tuple(g.id for j, g in enumerate(gts) if not ignore[j] and not claimed[j])
        by_threshold[thr] = ThresholdMatch(
            detections=tuple(entries),
            unmatched_gt_ids=unmatched,
            ignored_gt_ids=tuple(g.id for j, g in enumerate(gts) if ignore[j]),
            ignored_det_ids=tuple(ignored_dets),
        )
    return MatchResult(image_id, category_id, tuple(cfg.iou_thresholds), num_gt, by_threshold)


def _pooled_entries(matches: Sequence[MatchResult], threshold: float):
    """Detections of one category pooled over images in global score order:
    descending score, then ascending image id, then ascending detection id."""
    pooled = [
        (det_id, gt_id, score, m.image_id)
        for m in matches
        for det_id, gt_id, score in m.by_threshold[threshold].detections
    ]
    pooled.sort(key=lambda e: (-e[2], e[3], e[0]))
    return pooled


def average_precision(matches: Sequence[MatchResult], threshold: float) -> float | None:
    """101-point interpolated AP for one category at one threshold, over
    match results aggregated across images.

    Returns None when the category has no (non-ignored) ground truth; 0.0
    when it has ground truth but no true positive.
    """
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        return None
    pooled = _pooled_entries(matches, threshold)
    if not pooled:
        return 0.0
    tp = np.array([gt_id is not None for _, gt_id, _, _ in pooled], dtype=float)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # Monotone envelope: best precision at this recall or beyond.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.sum() / len(_RECALL_GRID))


def average_recall(matches: Sequence[MatchResult], cfg: EvalConfig) -> float | None:
    """Mean over IoU thresholds of (matched gt / total non-ignored gt) for
    one category's aggregated matches. None when the category has no gt."""
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        return None
    recalls = []
    for thr in cfg.iou_thresholds:
        matched = sum(m.num_gt - len(m.by_threshold[thr].unmatched_gt_ids) for m in matches)
        recalls.append(matched / num_gt)
    return sum(recalls) / len(recalls)


def _recall_at(matches: Sequence[MatchResult], thr: float) -> float | None:
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        return None
    matched = sum(m.num_gt - len(m.by_threshold[thr].unmatched_gt_ids) for m in matches)
    return matched / num_gt


def _mean(values: Iterable[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else None


@dataclass(eq=False)
class EvalReport:
    """AP/AR aggregates, overall and per stratum.

    `strata` maps stratum kind -> stratum name -> metrics dict with keys
    "AR", optionally "AP", "num_gt", and "AR_per_threshold".
    """

    iou_thresholds: tuple[float, ...]
    max_dets: int
    mAP: float | None
    mAR: float | None
    ap_per_threshold: dict[float, float | None]
    ar_per_threshold: dict[float, float | None]
    strata: dict[str, dict[str, dict[str, Any]]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "protocol": {
                "iou_thresholds": list(self.iou_thresholds),
                "max_dets": self.max_dets,
            },
            "overall": {
                "mAP": self.mAP,
                "mAR": self.mAR,
                "AP_per_threshold": {repr(t): v for t, v in self.ap_per_threshold.items()},
                "AR_per_threshold": {repr(t): v for t, v in self.ar_per_threshold.items()},
            },
            "strata": self.strata,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalReport":
        overall = d["overall"]
        return cls(
            iou_thresholds=tuple(d["protocol"]["iou_thresholds"]),
            max_dets=int(d["protocol"]["max_dets"]),
            mAP=overall["mAP"],
            mAR=overall["mAR"],
            ap_per_threshold={float(k): v for k, v in overall["AP_per_threshold"].items()},
            ar_per_threshold={float(k): v for k, v in overall["AR_per_threshold"].items()},
            strata={k: dict(v) for k, v in d.get("strata", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list[tuple[str, str, str]]:
        """Flat `stratum,metric,value` rows; absent metrics serialize empty."""

        def fmt(v) -> str:
            return "" if v is None else repr(v)

        rows = [("overall", "mAP", fmt(self.mAP)), ("overall", "mAR", fmt(self.mAR))]
        for t in self.iou_thresholds:
            rows.append(("overall", f"AP@{t!r}", fmt(self.ap_per_threshold.get(t))))
        for t in self.iou_thresholds:
            rows.append(("overall", f"AR@{t!r}", fmt(self.ar_per_threshold.get(t))))
        for kind in sorted(self.strata):
            for name in self.strata[kind]:
                metrics = self.strata[kind][name]
                for metric in sorted(metrics):
                    value = metrics[metric]
                    if isinstance(value, dict):
                        for sub in sorted(value):
                            rows.append((f"{kind}:{name}", f"{metric}@{sub}", fmt(value[sub])))
                    else:
                        rows.append((f"{kind}:{name}", metric, fmt(value)))
        return rows

    def to_csv(self) -> str:
        lines = ["stratum,metric,value"]
        lines += [",".join(row) for row in self.csv_rows()]
        return "\n".join(lines) + "\n"

    def svg_slenderness_ar(self) -> str:
        """Bar chart of per-bin AR (the slender-vs-regular gap at a glance)."""
        bins = self.strata.get("slenderness_bin", {})
        labels = [b.name for b in SlendernessBin]
        values = [bins.get(b.name, {}).get("AR") for b in SlendernessBin]
        return util.svg_bar_chart(labels, values, title="AR by slenderness bin")


def _gt_aspect_group(ann: Annotation, cuts) -> AspectGroup | None:
    if ann.bbox.w <= 0 or ann.bbox.h <= 0:
        return None
    return geometry.classify_aspect(ann.bbox.w / ann.bbox.h, cuts)


def _det_aspect_group(det: Detection, cuts) -> AspectGroup | None:
    if det.box.w <= 0 or det.box.h <= 0:
        return None
    return geometry.classify_aspect(det.box.w / det.box.h, cuts)


def evaluate(
    ds: Dataset,
    dt: DetectionSet,
    cfg: EvalConfig = EvalConfig(),
    threads: int = 1,
) -> EvalReport:
    """Run the full protocol: overall mAP/mAR plus the configured strata.

    Slenderness strata report AR only (AP is refused: false positives carry
    no slenderness). Aspect-group strata may carry AP because a detection's
    own box ratio is well-defined; for those strata detections outside the
    group are excluded and out-of-group ground truth is ignored. Area-range
    strata ignore out-of-range ground truth.

    Deterministic and independent of image processing order / thread count.
    """
    if "slenderness_bin" in cfg.ap_strata:
        raise SlendernessAPError(
            "AP per slenderness bin is refused: false positives match no ground "
            "truth, so their slenderness is undefined; request AR instead"
        )
    if not ds.is_annotated:
        raise NotAnnotatedError("evaluate needs slenderness: run annotate_slenderness first")

    # Per-image cap across categories, by descending score then id.
    capped: dict[int, list[Detection]] = {}
    for image_id, dets in dt.by_image.items():
        capped[image_id] = sorted(dets, key=lambda d: (-d.score, d.id))[: cfg.max_dets]

    # Stratum definitions: (kind, name, gt_ignored?, det_kept?).
    specs: list[tuple[str, str, Any, Any]] = [
        ("overall", "", lambda ann: False, lambda det: True)
    ]
    if "slenderness_bin" in cfg.strata:
        for b in SlendernessBin:
            specs.append(
                ("slenderness_bin", b.name,
                 lambda ann, b=b: ann.bin != b, lambda det: True)
            )
    if "aspect_group" in cfg.strata:
        for g in AspectGroup:
            specs.append(
                ("aspect_group", g.name,
                 lambda ann, g=g: _gt_aspect_group(ann, cfg.aspect_cuts) != g,
                 lambda det, g=g: _det_aspect_group(det, cfg.aspect_cuts) == g)
            )
    if "area_range" in cfg.strata:
        for name, lo, hi in cfg.area_ranges:
            specs.append(
                ("area_range", name,
                 lambda ann, lo=lo, hi=hi: not (lo <= ann.area < hi), lambda det: True)
            )

    cat_ids = [c.id for c in sorted(ds.categories, key=lambda c: c.id)]
    ds.annotations_by_image  # materialize the index before worker threads share it

    def eval_image(image):
        out = {}
        gts_by_cat: dict[int, list[Annotation]] = {}
        for ann in ds.annotations_by_image[image.id]:
            gts_by_cat.setdefault(ann.category_id, []).append(ann)
        dts_by_cat: dict[int, list[Detection]] = {}
        for det in capped.get(image.id, []):
            dts_by_cat.setdefault(det.category_id, []).append(det)
        for cat_id in cat_ids:
            gts = gts_by_cat.get(cat_id, [])
            dts = dts_by_cat.get(cat_id, [])
            if not gts and not dts:
                continue
            for kind, name, gt_ignored, det_kept in specs:
                ignore_ids = frozenset(g.id for g in gts if not g.iscrowd and gt_ignored(g))
                kept_dts = [d for d in dts if det_kept(d)]
                if not gts and not kept_dts:
                    continue
                out[(kind, name, cat_id)] = match_detections(
                    gts, kept_dts, cfg, ignore_gt_ids=ignore_ids
                )
        return out

    images = sorted(ds.images, key=lambda im: im.id)
    per_image = util.parallel_map(eval_image, images, threads)
    grouped: dict[tuple[str, str, int], list[MatchResult]] = {}
    for result in per_image:  # image-id order; reductions below are order-free anyway
        for key, match in result.items():
            grouped.setdefault(key, []).append(match)

    def matches_for(kind: str, name: str, cat_id: int) -> list[MatchResult]:
        return grouped.get((kind, name, cat_id), [])

    # Overall (also feeds the per-category stratum).
    ap_by_cat_thr: dict[int, dict[float, float | None]] = {}
    ar_by_cat: dict[int, float | None] = {}
    recall_by_cat_thr: dict[int, dict[float, float | None]] = {}
    for cat_id in cat_ids:
        ms = matches_for("overall", "", cat_id)
        ap_by_cat_thr[cat_id] = {t: average_precision(ms, t) for t in cfg.iou_thresholds}
        ar_by_cat[cat_id] = average_recall(ms, cfg)
        recall_by_cat_thr[cat_id] = {t: _recall_at(ms, t) for t in cfg.iou_thresholds}

    cat_ap = {c: _mean(ap_by_cat_thr[c].values()) for c in cat_ids}
    mAP = _mean(cat_ap.values())
    mAR = _mean(ar_by_cat.values())
    ap_per_threshold = {
        t: _mean(ap_by_cat_thr[c][t] for c in cat_ids) for t in cfg.iou_thresholds
    }
    ar_per_threshold = {
        t: _mean(recall_by_cat_thr[c][t] for c in cat_ids) for t in cfg.iou_thresholds
    }

    strata: dict[str, dict[str, dict[str, Any]]] = {}
    if "category" in cfg.strata:
        names = {c.id: c.name for c in ds.categories}
        section = {}
        for cat_id in cat_ids:
            ms = matches_for("overall", "", cat_id)
            entry: dict[str, Any] = {
                "AR": ar_by_cat[cat_id],
                "num_gt": sum(m.num_gt for m in ms),
            }
            if "category" in cfg.ap_strata:
                entry["AP"] = cat_ap[cat_id]
            section[names[cat_id]] = entry
        strata["category"] = section

    for kind, name, _, _ in specs:
        if kind == "overall" or kind == "category":
            continue
        per_cat_ar = []
        per_cat_ap = []
        recall_curves: dict[float, list[float | None]] = {t: [] for t in cfg.iou_thresholds}
        total_gt = 0
        for cat_id in cat_ids:
            ms = matches_for(kind, name, cat_id)
            total_gt += sum(m.num_gt for m in ms)
            per_cat_ar.append(average_recall(ms, cfg))
            if kind in cfg.ap_strata:
                per_cat_ap.append(
                    _mean(average_precision(ms, t) for t in cfg.iou_thresholds)
                )
            for t in cfg.iou_thresholds:
                recall_curves[t].append(_recall_at(ms, t))
        entry = {
            "AR": _mean(per_cat_ar),
            "num_gt": total_gt,
            "AR_per_threshold": {repr(t): _mean(recall_curves[t]) for t in cfg.iou_thresholds},
        }
        if kind in cfg.ap_strata:
            entry["AP"] = _mean(per_cat_ap)
        strata.setdefault(kind, {})[name] = entry

    return EvalReport(
        iou_thresholds=tuple(cfg.iou_thresholds),
        max_dets=cfg.max_dets,
        mAP=mAP,
        mAR=mAR,
        ap_per_threshold=ap_per_threshold,
        ar_per_threshold=ar_per_threshold,
        strata=strata,
    )


def nms(
    dts: Sequence[Detection],
    iou_thr: float,
    class_agnostic: bool = False,
) -> list[Detection]:
    """Greedy non-maximum suppression over one image's detections.

    Keeps the highest-scoring box and suppresses others overlapping it with
    IoU strictly above `iou_thr`. Class-wise mode (the default) partitions by
    predicted category first, so duplicates with conflicting classes survive.
    Ties break by (score desc, id asc); survivors return in that order.
    """
    if not (0.0 < iou_thr < 1.0):
        raise ValueError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    groups: dict[Any, list[Detection]] = {}
    for det in dts:
        groups.setdefault(None if class_agnostic else det.category_id, []).append(det)

    survivors: list[Detection] = []
    for key in sorted(groups, key=lambda k: (k is not None, k)):
        dets = sorted(groups[key], key=lambda d: (-d.score, d.id))
        boxes = np.array([d.box.as_xywh() for d in dets], dtype=float)
        alive = np.ones(len(dets), dtype=bool)
        for i in range(len(dets)):
            if not alive[i]:
                continue
            survivors.append(dets[i])
            rest = alive.copy()
            rest[: i + 1] = False
            if rest.any():
                overlaps = geometry.iou_matrix(boxes[i : i + 1], boxes[rest])[0]
                alive[np.flatnonzero(rest)[overlaps > iou_thr]] = False
    survivors.sort(key=lambda d: (-d.score, d.id))
    return survivors
