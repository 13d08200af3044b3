"""Shared builders for COCO-style fixtures and seeded random instances."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for `oracles`

from slendereval import annotate_slenderness, load_detections, load_ground_truth


def coco_doc(images, annotations, categories):
    return {"images": images, "annotations": annotations, "categories": categories}


def image_rec(image_id, width=200, height=200, file_name=None):
    return {
        "id": image_id,
        "width": width,
        "height": height,
        "file_name": file_name or f"{image_id:06d}.png",
    }


def ann_rec(ann_id, image_id, category_id, bbox, segmentation=None, iscrowd=0, area=None):
    x, y, w, h = bbox
    if segmentation is None:
        segmentation = [[x, y, x + w, y, x + w, y + h, x, y + h]]
    return {
        "id": ann_id,
        "image_id": image_id,
        "category_id": category_id,
        "bbox": list(bbox),
        "segmentation": segmentation,
        "area": w * h if area is None else area,
        "iscrowd": iscrowd,
    }


def dataset_from(doc):
    return load_ground_truth(json.dumps(doc).encode())


def annotated_dataset_from(doc, threads=1):
    return annotate_slenderness(dataset_from(doc), threads)


def detections_from(records, ds):
    return load_detections(json.dumps(records).encode(), ds)


def random_convex_polygon(rng, min_vertices=3, max_vertices=50):
    """Random convex polygon: points on a random rotated ellipse at sorted,
    well-separated angles."""
    n = int(rng.integers(min_vertices, max_vertices + 1))
    while True:
        theta = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
        gaps = np.diff(np.concatenate([theta, [theta[0] + 2.0 * np.pi]]))
        if np.all(gaps > 1e-3):
            break
    a, b = rng.uniform(2.0, 100.0, 2)
    tilt = rng.uniform(0.0, np.pi)
    cx, cy = rng.uniform(-50.0, 50.0, 2)
    x = a * np.cos(theta)
    y = b * np.sin(theta)
    c, s = np.cos(tilt), np.sin(tilt)
    return np.column_stack([cx + x * c - y * s, cy + x * s + y * c])


def random_star_polygon(rng, min_vertices=4, max_vertices=20):
    """Random simple (star-shaped, possibly non-convex) polygon."""
    n = int(rng.integers(min_vertices, max_vertices + 1))
    theta = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    theta += np.linspace(0.0, 1e-6 * n, n)  # break exact duplicates
    radius = rng.uniform(1.0, 50.0, n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])


def random_toy_instance(rng, max_images=5, max_categories=3, max_dets_per_image=10):
    """Random evaluation instance as plain data + COCO documents.

    Integer box coordinates and decimal-quantized scores make IoU and score
    ties common, so the pinned tie-break rules actually get exercised.
    """
    n_images = int(rng.integers(1, max_images + 1))
    n_cats = int(rng.integers(1, max_categories + 1))
    images = [image_rec(i + 1, 120, 120) for i in range(n_images)]
    categories = [{"id": c + 1, "name": f"cat{c + 1}"} for c in range(n_cats)]

    gts, anns = [], []
    ann_id = 0
    for img in images:
        for _ in range(int(rng.integers(0, 6))):
            ann_id += 1
            bbox = (
                float(rng.integers(0, 90)),
                float(rng.integers(0, 90)),
                float(rng.integers(1, 31)),
                float(rng.integers(1, 31)),
            )
            iscrowd = int(rng.random() < 0.15)
            gts.append(
                {
                    "id": ann_id,
                    "image_id": img["id"],
                    "category_id": int(rng.integers(1, n_cats + 1)),
                    "bbox": bbox,
                    "iscrowd": iscrowd,
                }
            )
            anns.append(
                ann_rec(
                    ann_id,
                    img["id"],
                    gts[-1]["category_id"],
                    bbox,
                    segmentation=[],
                    iscrowd=iscrowd,
                )
            )

    dets, det_records = [], []
    det_id = 0
    for img in images:
        for _ in range(int(rng.integers(0, max_dets_per_image + 1))):
            bbox = (
                float(rng.integers(0, 90)),
                float(rng.integers(0, 90)),
                float(rng.integers(1, 31)),
                float(rng.integers(1, 31)),
            )
            score = float(rng.integers(1, 11)) / 10.0
            cat = int(rng.integers(1, n_cats + 1))
            dets.append(
                {
                    "id": det_id,
                    "image_id": img["id"],
                    "category_id": cat,
                    "bbox": bbox,
                    "score": score,
                }
            )
            det_records.append(
                {"image_id": img["id"], "category_id": cat, "bbox": list(bbox), "score": score}
            )
            det_id += 1

    doc = coco_doc(images, anns, categories)
    return {
        "doc": doc,
        "det_records": det_records,
        "images": images,
        "category_ids": [c["id"] for c in categories],
        "gts": gts,
        "dets": dets,
    }


@pytest.fixture
def tiny_gt_doc():
    return coco_doc(
        [image_rec(1)],
        [
            ann_rec(1, 1, 1, (10, 10, 40, 8)),
            ann_rec(2, 1, 1, (100, 100, 30, 30), segmentation=[]),
        ],
        [{"id": 1, "name": "thing"}],
    )
