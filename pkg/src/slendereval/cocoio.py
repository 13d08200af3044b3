"""COCO-format ingestion, slenderness annotation, bias-neutralizing dataset
mixing, sampling weights, and distribution reports.

Ground truth follows the COCO instances schema (images / annotations /
categories with polygon segmentation); detections follow the COCO results
schema (a flat JSON array of image_id / category_id / bbox / score).
Datasets are treated as immutable: every operation returns a new Dataset.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import IO, Any, Iterable, Mapping, Sequence

import numpy as np

from . import geometry
from .geometry import AABox, SlendernessBin
from .util import parallel_map

__all__ = [
    "DatasetError",
    "ParseError",
    "IntegrityError",
    "NotAnnotatedError",
    "ImageRecord",
    "Category",
    "Annotation",
    "Dataset",
    "Detection",
    "DetectionSet",
    "MixConfig",
    "SampleRates",
    "DistributionReport",
    "load_ground_truth",
    "load_detections",
    "annotate_slenderness",
    "mix_datasets",
    "sampling_weights",
    "distribution_report",
    "dataset_to_coco",
    "dump_ground_truth",
    "detections_to_coco",
    "write_slenderness_csv",
    "write_weights_csv",
]


class DatasetError(ValueError):
    """Problem with an annotation or results document."""


class ParseError(DatasetError):
    """The document is not valid JSON."""


class IntegrityError(DatasetError):
    """The document parses but violates referential integrity or the schema."""


class NotAnnotatedError(DatasetError):
    """The operation needs per-object slenderness; run annotate_slenderness
    on the dataset first."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str
    source: str = "base"  # "base" or "extra" (mixed-in provenance)


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True, eq=False)
class Annotation:
    """One ground-truth object. `segmentation` holds the polygon parts as
    read-only (N, 2) float arrays; multi-part objects keep every part.

    After annotate_slenderness, non-crowd annotations carry `s`, `bin`, and
    `s_source` ("polygon" when derived from the boundary's minimum-area
    rectangle, "bbox" for the axis-aligned fallback, "skipped" when the
    boundary was degenerate and no slenderness could be measured).
    """

    id: int
    image_id: int
    category_id: int
    bbox: AABox
    segmentation: tuple[np.ndarray, ...] = ()
    area: float = 0.0
    iscrowd: bool = False
    s: float | None = None
    bin: SlendernessBin | None = None
    s_source: str | None = None

    def __post_init__(self):
        if self.s is not None:
            if self.bin is None or self.bin != geometry.classify_slenderness(self.s):
                raise IntegrityError(
                    f"annotation {self.id}: bin {self.bin} inconsistent with s={self.s}"
                )


@dataclass(eq=False)
class Dataset:
    """Images, annotations and categories with verified referential
    integrity. Treat as immutable after construction."""

    images: list[ImageRecord]
    annotations: list[Annotation]
    categories: list[Category]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._check_integrity()

    def _check_integrity(self) -> None:
        image_ids = [img.id for img in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise IntegrityError("duplicate image ids")
        for img in self.images:
            if img.width <= 0 or img.height <= 0:
                raise IntegrityError(f"image {img.id}: non-positive dimensions")
        cat_ids = [c.id for c in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise IntegrityError("duplicate category ids")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise IntegrityError("duplicate category names")
        ann_ids = [a.id for a in self.annotations]
        if len(set(ann_ids)) != len(ann_ids):
            raise IntegrityError("duplicate annotation ids")
        img_set, cat_set = set(image_ids), set(cat_ids)
        bad_img = sorted({a.image_id for a in self.annotations if a.image_id not in img_set})
        bad_cat = sorted({a.category_id for a in self.annotations if a.category_id not in cat_set})
        if bad_img or bad_cat:
            problems = []
            if bad_img:
                problems.append(f"unknown image ids {bad_img}")
            if bad_cat:
                problems.append(f"unknown category ids {bad_cat}")
            raise IntegrityError("dangling annotation references: " + "; ".join(problems))

    @cached_property
    def image_by_id(self) -> dict[int, ImageRecord]:
        return {img.id: img for img in self.images}

    @cached_property
    def category_by_id(self) -> dict[int, Category]:
        return {c.id: c for c in self.categories}

    @cached_property
    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    @property
    def is_annotated(self) -> bool:
        """True when every non-crowd annotation has been through
        annotate_slenderness (including ones it had to skip)."""
        return all(
            ann.s is not None or ann.s_source == "skipped"
            for ann in self.annotations
            if not ann.iscrowd
        )


@dataclass(frozen=True)
class Detection:
    id: int
    image_id: int
    category_id: int
    box: AABox
    score: float


@dataclass(eq=False)
class DetectionSet:
    """Scored, classified box predictions grouped per image."""

    detections: list[Detection]
    warnings: list[str] = field(default_factory=list)

    @cached_property
    def by_image(self) -> dict[int, list[Detection]]:
        out: dict[int, list[Detection]] = {}
        for det in self.detections:
            out.setdefault(det.image_id, []).append(det)
        return out

    def __len__(self) -> int:
        return len(self.detections)


@dataclass(frozen=True)
class MixConfig:
    """Controls mixing of an extra dataset into a base one. Images from the
    extra set qualify when they contain at least one object at least as
    slender as `filter_bin`; categories are aligned by exact name."""

    filter_bin: SlendernessBin = SlendernessBin.XS
    category_policy: str = "intersect_by_name"
    id_offset: int | None = None  # None: next power of ten above every base id

    def __post_init__(self):
        if self.category_policy != "intersect_by_name":
            raise ValueError(f"unknown category policy {self.category_policy!r}")


@dataclass(frozen=True)
class SampleRates:
    """Per-bin oversampling rates; 1 means no oversampling."""

    rate_xs: float = 1.0
    rate_s: float = 1.0
    rate_r: float = 1.0

    def __post_init__(self):
        for name in ("rate_xs", "rate_s", "rate_r"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1 (oversampling only)")

    def for_bin(self, b: SlendernessBin) -> float:
        return (self.rate_xs, self.rate_s, self.rate_r)[int(b)]


def _read_bytes(src) -> bytes:
    if isinstance(src, (bytes, bytearray)):
        return bytes(src)
    if isinstance(src, (str, Path)):
        return Path(src).read_bytes()
    data = src.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def _parse_json(raw: bytes):
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON at byte offset {e.pos}: {e.msg}") from None


def _parse_bbox(value, where: str) -> AABox:
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise IntegrityError(f"{where}: bbox must be [x, y, w, h]")
    x, y, w, h = (float(v) for v in value)
    if w < 0 or h < 0:
        raise IntegrityError(f"{where}: negative bbox extent {w}x{h}")
    return AABox(x, y, w, h)


def _parse_segmentation(value, where: str, warnings: list[str]) -> tuple[np.ndarray, ...]:
    if value is None:
        return ()
    if isinstance(value, dict):
        # Run-length masks are out of scope; polygon borders only.
        warnings.append(f"{where}: non-polygon segmentation ignored")
        return ()
    if not isinstance(value, list):
        raise IntegrityError(f"{where}: segmentation must be a list of flat polygons")
    parts = []
    for part in value:
        if not isinstance(part, list):
            raise IntegrityError(f"{where}: segmentation part must be a flat coordinate list")
        if len(part) % 2 != 0:
            raise IntegrityError(f"{where}: odd-length segmentation part")
        if not part:
            continue
        pts = np.asarray(part, dtype=float).reshape(-1, 2)
        if not np.isfinite(pts).all():
            raise IntegrityError(f"{where}: non-finite segmentation coordinates")
        pts.setflags(write=False)
        parts.append(pts)
    return tuple(parts)


def load_ground_truth(src) -> Dataset:
    """Load a COCO-format annotation document (path, bytes, or file object).

    Crowd annotations are retained but flagged; they are excluded from
    slenderness statistics and act as ignore regions during matching.
    Out-of-bounds boxes produce warnings, not errors.
    """
    doc = _parse_json(_read_bytes(src))
    if not isinstance(doc, dict):
        raise IntegrityError("annotation document must be a JSON object")
    warnings: list[str] = []

    categories = [
        Category(int(c["id"]), str(c["name"])) for c in doc.get("categories", [])
    ]
    images = []
    for rec in doc.get("images", []):
        images.append(
            ImageRecord(
                id=int(rec["id"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                file_name=str(rec.get("file_name", "")),
                source=str(rec.get("source", "base")),
            )
        )
    image_dims = {img.id: (img.width, img.height) for img in images}

    annotations = []
    for rec in doc.get("annotations", []):
        ann_id = int(rec["id"])
        where = f"annotation {ann_id}"
        bbox = _parse_bbox(rec.get("bbox"), where)
        if bbox.degenerate:
            warnings.append(f"{where}: zero-extent bbox")
        seg = _parse_segmentation(rec.get("segmentation"), where, warnings)
        dims = image_dims.get(int(rec["image_id"]))
        if dims is not None:
            w, h = dims
            if bbox.x < 0 or bbox.y < 0 or bbox.right > w or bbox.bottom > h:
                warnings.append(f"{where}: bbox extends outside image bounds")
        s = rec.get("slenderness")
        if s is None:
            s_bin = None
        elif "slenderness_bin" in rec:
            try:
                s_bin = SlendernessBin[rec["slenderness_bin"]]
            except KeyError:
                raise IntegrityError(
                    f"{where}: unknown slenderness bin {rec['slenderness_bin']!r}"
                ) from None
        else:
            s_bin = geometry.classify_slenderness(float(s))
        annotations.append(
            Annotation(
                id=ann_id,
                image_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                bbox=bbox,
                segmentation=seg,
                area=float(rec.get("area", bbox.area)),
                iscrowd=bool(rec.get("iscrowd", 0)),
                s=None if s is None else float(s),
                bin=s_bin,
                s_source=rec.get("slenderness_source"),
            )
        )
    return Dataset(images, annotations, categories, warnings)


def load_detections(src, ds: Dataset) -> DetectionSet:
    """Load a COCO results document and validate it against `ds`.

    Detection ids are assigned by file order. Scores outside [0, 1] produce
    warnings; unknown image or category ids are integrity errors.
    """
    doc = _parse_json(_read_bytes(src))
    if not isinstance(doc, list):
        raise IntegrityError("results document must be a JSON array")
    warnings: list[str] = []
    image_ids = set(ds.image_by_id)
    cat_ids = set(ds.category_by_id)

    detections = []
    bad_img, bad_cat = set(), set()
    for i, rec in enumerate(doc):
        image_id = int(rec["image_id"])
        category_id = int(rec["category_id"])
        if image_id not in image_ids:
            bad_img.add(image_id)
            continue
        if category_id not in cat_ids:
            bad_cat.add(category_id)
            continue
        box = _parse_bbox(rec.get("bbox"), f"detection {i}")
        score = float(rec["score"])
        if not (0.0 <= score <= 1.0):
            warnings.append(f"detection {i}: score {score} outside [0, 1]")
        if box.degenerate:
            warnings.append(f"detection {i}: zero-extent box")
        detections.append(Detection(i, image_id, category_id, box, score))
    if bad_img or bad_cat:
        problems = []
        if bad_img:
            problems.append(f"unknown image ids {sorted(bad_img)}")
        if bad_cat:
            problems.append(f"unknown category ids {sorted(bad_cat)}")
        raise IntegrityError("detections reference " + "; ".join(problems))
    return DetectionSet(detections, warnings)


def _measure_annotation(ann: Annotation) -> Annotation:
    if ann.iscrowd:
        return ann
    if ann.segmentation:
        points = np.vstack(ann.segmentation)
        try:
            rect = geometry.min_area_rect(points)
        except geometry.DegeneratePolygonError:
            return replace(ann, s=None, bin=None, s_source="skipped")
        s = geometry.slenderness(rect)
        return replace(ann, s=s, bin=geometry.classify_slenderness(s), s_source="polygon")
    w, h = ann.bbox.w, ann.bbox.h
    if w <= 0 or h <= 0:
        return replace(ann, s=None, bin=None, s_source="skipped")
    s = min(w, h) / max(w, h)
    return replace(ann, s=s, bin=geometry.classify_slenderness(s), s_source="bbox")


def annotate_slenderness(ds: Dataset, threads: int = 1) -> Dataset:
    """Attach slenderness to every non-crowd annotation.

    Polygon boundaries are measured through the minimum-area rectangle of the
    union of all part vertices; annotations without usable polygons fall back
    to the axis-aligned bbox ratio and are flagged (`s_source="bbox"`).
    Degenerate boundaries are skipped, not fatal. Idempotent: values are
    recomputed from the raw boundary each call.
    """
    annotated = parallel_map(_measure_annotation, ds.annotations, threads)
    warnings = list(ds.warnings)
    for before, after in zip(ds.annotations, annotated):
        if after.s_source == "skipped" and before.s_source != "skipped":
            warnings.append(f"annotation {after.id}: degenerate boundary, slenderness skipped")
    return Dataset(list(ds.images), annotated, list(ds.categories), warnings)


def _require_annotated(ds: Dataset, what: str) -> None:
    if not ds.is_annotated:
        raise NotAnnotatedError(f"{what} needs slenderness: run annotate_slenderness first")


def _default_id_offset(ds: Dataset) -> int:
    top = max(
        [img.id for img in ds.images] + [a.id for a in ds.annotations], default=0
    )
    return 10 ** len(str(max(top, 1)))


def mix_datasets(base: Dataset, extra: Dataset, cfg: MixConfig = MixConfig()) -> Dataset:
    """Mix qualifying images of `extra` into `base`.

    An extra image qualifies when it contains at least one non-crowd object
    whose bin is at most `cfg.filter_bin` (XS is the most slender) in a
    category that exists in `base` by exact name. Annotations of categories
    absent from `base` are dropped; extra ids are shifted by the id offset
    and remapped onto base category ids.
    """
    _require_annotated(base, "mix_datasets")
    _require_annotated(extra, "mix_datasets")

    offset = cfg.id_offset if cfg.id_offset is not None else _default_id_offset(base)
    max_base_id = max(
        [img.id for img in base.images] + [a.id for a in base.annotations], default=0
    )
    if offset <= max_base_id:
        raise IntegrityError(f"id_offset {offset} must exceed every base id (max {max_base_id})")

    base_cat_by_name = {c.name: c for c in base.categories}
    extra_cats = extra.category_by_id

    kept_anns_by_image: dict[int, list[Annotation]] = {}
    qualifying_images: list[ImageRecord] = []
    for img in extra.images:
        kept = [
            ann
            for ann in extra.annotations_by_image[img.id]
            if extra_cats[ann.category_id].name in base_cat_by_name
        ]
        qualifies = any(
            not ann.iscrowd and ann.bin is not None and ann.bin <= cfg.filter_bin
            for ann in kept
        )
        if qualifies:
            qualifying_images.append(img)
            kept_anns_by_image[img.id] = kept

    new_images = [
        replace(img, id=img.id + offset, source="extra") for img in qualifying_images
    ]
    new_anns = [
        replace(
            ann,
            id=ann.id + offset,
            image_id=ann.image_id + offset,
            category_id=base_cat_by_name[extra_cats[ann.category_id].name].id,
        )
        for img in qualifying_images
        for ann in kept_anns_by_image[img.id]
    ]

    image_ids = [img.id for img in base.images] + [img.id for img in new_images]
    ann_ids = [a.id for a in base.annotations] + [a.id for a in new_anns]
    if len(set(image_ids)) != len(image_ids) or len(set(ann_ids)) != len(ann_ids):
        raise IntegrityError("id collision after applying id_offset")

    return Dataset(
        list(base.images) + new_images,
        list(base.annotations) + new_anns,
        list(base.categories),
        list(base.warnings),
    )


def sampling_weights(ds: Dataset, rates: SampleRates) -> dict[int, float]:
    """Per-image sampling weight: the maximum bin rate over the image's
    non-crowd annotations; 1 for images with none. Image-level max is the
    documented aggregation rule (images are the sampling unit)."""
    _require_annotated(ds, "sampling_weights")
    out: dict[int, float] = {}
    for img in ds.images:
        anns = ds.annotations_by_image[img.id]
        out[img.id] = max(
            (rates.for_bin(a.bin) for a in anns if not a.iscrowd and a.bin is not None),
            default=1.0,
        )
    return out


@dataclass(frozen=True)
class DistributionReport:
    """Counts and percentages of objects per slenderness bin. Percentages are
    over measured (non-crowd, non-skipped) annotations; crowd and skipped
    counts are reported separately so both views are available."""

    counts: dict[SlendernessBin, int]
    percentages: dict[SlendernessBin, float]
    n_measured: int
    n_crowd: int
    n_skipped: int
    by_source: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "counts": {b.name: self.counts[b] for b in SlendernessBin},
            "percentages": {b.name: self.percentages[b] for b in SlendernessBin},
            "n_measured": self.n_measured,
            "n_crowd": self.n_crowd,
            "n_skipped": self.n_skipped,
            "by_source": dict(sorted(self.by_source.items())),
        }


def distribution_report(ds: Dataset) -> DistributionReport:
    """Histogram of slenderness bins over the dataset's measured objects."""
    _require_annotated(ds, "distribution_report")
    counts = {b: 0 for b in SlendernessBin}
    by_source: dict[str, int] = {}
    n_crowd = n_skipped = 0
    for ann in ds.annotations:
        if ann.iscrowd:
            n_crowd += 1
            continue
        if ann.bin is None:
            n_skipped += 1
            continue
        counts[ann.bin] += 1
        by_source[ann.s_source or "unknown"] = by_source.get(ann.s_source or "unknown", 0) + 1
    total = sum(counts.values())
    percentages = {
        b: (100.0 * counts[b] / total if total else 0.0) for b in SlendernessBin
    }
    return DistributionReport(counts, percentages, total, n_crowd, n_skipped, by_source)


def dataset_to_coco(ds: Dataset) -> dict[str, Any]:
    """Serialize back to a COCO-compatible dict. Slenderness fields, when
    present, ride along as extension keys; `source` is written only for
    mixed-in images."""
    images = []
    for img in ds.images:
        rec: dict[str, Any] = {
            "id": img.id,
            "width": img.width,
            "height": img.height,
            "file_name": img.file_name,
        }
        if img.source != "base":
            rec["source"] = img.source
        images.append(rec)
    annotations = []
    for ann in ds.annotations:
        rec = {
            "id": ann.id,
            "image_id": ann.image_id,
            "category_id": ann.category_id,
            "bbox": list(ann.bbox.as_xywh()),
            "segmentation": [part.reshape(-1).tolist() for part in ann.segmentation],
            "area": ann.area,
            "iscrowd": int(ann.iscrowd),
        }
        if ann.s is not None:
            rec["slenderness"] = ann.s
            rec["slenderness_bin"] = ann.bin.name
            rec["slenderness_source"] = ann.s_source
        elif ann.s_source == "skipped":
            rec["slenderness_source"] = "skipped"
        annotations.append(rec)
    categories = [{"id": c.id, "name": c.name} for c in ds.categories]
    return {"images": images, "annotations": annotations, "categories": categories}


def dump_ground_truth(ds: Dataset) -> str:
    return json.dumps(dataset_to_coco(ds), indent=2, sort_keys=True) + "\n"


def detections_to_coco(detections: Sequence[Detection]) -> list[dict[str, Any]]:
    return [
        {
            "image_id": det.image_id,
            "category_id": det.category_id,
            "bbox": list(det.box.as_xywh()),
            "score": det.score,
        }
        for det in detections
    ]


def write_slenderness_csv(ds: Dataset) -> str:
    """Sidecar CSV `annotation_id,s,bin,source`, one row per measured
    non-crowd annotation, ordered by annotation id."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["annotation_id", "s", "bin", "source"])
    for ann in sorted(ds.annotations, key=lambda a: a.id):
        if ann.iscrowd or ann.s is None:
            continue
        writer.writerow([ann.id, repr(ann.s), ann.bin.name, ann.s_source])
    return buf.getvalue()


def write_weights_csv(weights: Mapping[int, float]) -> str:
    """Weight table CSV `image_id,weight`, ordered by image id."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "weight"])
    for image_id in sorted(weights):
        writer.writerow([image_id, repr(float(weights[image_id]))])
    return buf.getvalue()
