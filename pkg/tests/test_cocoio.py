import json

import numpy as np
import pytest

from slendereval import cocoio
from slendereval.cocoio import (
    IntegrityError,
    MixConfig,
    NotAnnotatedError,
    ParseError,
    SampleRates,
)
from slendereval.geometry import SlendernessBin

from conftest import ann_rec, annotated_dataset_from, coco_doc, dataset_from, detections_from, image_rec


class TestLoadGroundTruth:
    def test_minimal_document(self):
        ds = dataset_from(
            coco_doc([image_rec(1)], [ann_rec(1, 1, 1, (5, 5, 20, 10))], [{"id": 1, "name": "a"}])
        )
        assert (len(ds.images), len(ds.annotations), len(ds.categories)) == (1, 1, 1)

    def test_malformed_json_reports_offset(self):
        with pytest.raises(ParseError, match="byte offset"):
            cocoio.load_ground_truth(b'{"images": [,]}')

    def test_dangling_image_id_named(self):
        doc = coco_doc([image_rec(1)], [ann_rec(9, 7, 1, (0, 0, 5, 5))], [{"id": 1, "name": "a"}])
        with pytest.raises(IntegrityError, match=r"image ids \[7\]"):
            dataset_from(doc)

    def test_dangling_category_id(self):
        doc = coco_doc([image_rec(1)], [ann_rec(9, 1, 3, (0, 0, 5, 5))], [{"id": 1, "name": "a"}])
        with pytest.raises(IntegrityError, match=r"category ids \[3\]"):
            dataset_from(doc)

    def test_duplicate_category_names(self):
        doc = coco_doc([image_rec(1)], [], [{"id": 1, "name": "a"}, {"id": 2, "name": "a"}])
        with pytest.raises(IntegrityError, match="duplicate category names"):
            dataset_from(doc)

    def test_out_of_bounds_bbox_warns(self):
        doc = coco_doc(
            [image_rec(1, 50, 50)], [ann_rec(1, 1, 1, (40, 40, 30, 5))], [{"id": 1, "name": "a"}]
        )
        ds = dataset_from(doc)
        assert any("outside image bounds" in w for w in ds.warnings)

    def test_crowd_retained_and_flagged(self):
        doc = coco_doc(
            [image_rec(1)], [ann_rec(1, 1, 1, (0, 0, 5, 5), iscrowd=1)], [{"id": 1, "name": "a"}]
        )
        ds = dataset_from(doc)
        assert ds.annotations[0].iscrowd

    def test_rle_segmentation_ignored_with_warning(self):
        doc = coco_doc(
            [image_rec(1)],
            [
                {
                    "id": 1,
                    "image_id": 1,
                    "category_id": 1,
                    "bbox": [0, 0, 5, 5],
                    "segmentation": {"counts": "abc", "size": [50, 50]},
                    "area": 25,
                    "iscrowd": 1,
                }
            ],
            [{"id": 1, "name": "a"}],
        )
        ds = dataset_from(doc)
        assert ds.annotations[0].segmentation == ()
        assert any("non-polygon segmentation" in w for w in ds.warnings)

    def test_odd_length_segmentation_rejected(self):
        doc = coco_doc(
            [image_rec(1)],
            [ann_rec(1, 1, 1, (0, 0, 5, 5), segmentation=[[0, 0, 5, 0, 5]])],
            [{"id": 1, "name": "a"}],
        )
        with pytest.raises(IntegrityError, match="odd-length"):
            dataset_from(doc)


class TestLoadDetections:
    def setup_method(self):
        self.ds = dataset_from(
            coco_doc([image_rec(1)], [ann_rec(1, 1, 1, (0, 0, 10, 10))], [{"id": 1, "name": "a"}])
        )

    def test_empty_list(self):
        assert len(detections_from([], self.ds)) == 0

    def test_grouped_by_image(self):
        dt = detections_from(
            [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}], self.ds
        )
        assert len(dt.by_image[1]) == 1

    def test_unknown_category_rejected(self):
        with pytest.raises(IntegrityError, match=r"category ids \[9\]"):
            detections_from(
                [{"image_id": 1, "category_id": 9, "bbox": [0, 0, 5, 5], "score": 0.5}], self.ds
            )

    def test_unknown_image_rejected(self):
        with pytest.raises(IntegrityError, match=r"image ids \[4\]"):
            detections_from(
                [{"image_id": 4, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5}], self.ds
            )

    def test_score_outside_unit_interval_warns(self):
        dt = detections_from(
            [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 1.5}], self.ds
        )
        assert any("outside" in w for w in dt.warnings)

    def test_must_be_array(self):
        with pytest.raises(IntegrityError, match="JSON array"):
            cocoio.load_detections(b"{}", self.ds)


class TestAnnotateSlenderness:
    def test_polygon_derived_boundary_rule(self, tiny_gt_doc):
        ds = annotated_dataset_from(tiny_gt_doc)
        rect_ann = ds.annotations[0]  # 40x8 rectangle polygon: s = 0.2, on the XS/S boundary
        assert rect_ann.s == 0.2
        assert rect_ann.bin is SlendernessBin.S
        assert rect_ann.s_source == "polygon"

    def test_bbox_fallback_flagged(self, tiny_gt_doc):
        ds = annotated_dataset_from(tiny_gt_doc)
        square_ann = ds.annotations[1]  # 30x30 bbox, no segmentation
        assert square_ann.s == 1.0
        assert square_ann.bin is SlendernessBin.R
        assert square_ann.s_source == "bbox"

    def test_degenerate_polygon_skipped_not_fatal(self):
        doc = coco_doc(
            [image_rec(1)],
            [ann_rec(1, 1, 1, (0, 0, 10, 10), segmentation=[[0, 0, 5, 5, 10, 10]])],
            [{"id": 1, "name": "a"}],
        )
        ds = cocoio.annotate_slenderness(dataset_from(doc))
        ann = ds.annotations[0]
        assert ann.s is None and ann.bin is None and ann.s_source == "skipped"
        assert any("skipped" in w for w in ds.warnings)
        assert ds.is_annotated

    def test_crowd_untouched(self):
        doc = coco_doc(
            [image_rec(1)], [ann_rec(1, 1, 1, (0, 0, 30, 5), iscrowd=1)], [{"id": 1, "name": "a"}]
        )
        ds = cocoio.annotate_slenderness(dataset_from(doc))
        assert ds.annotations[0].s is None

    def test_multipart_union(self):
        # two horizontally adjacent thin parts forming one 40x4 bar
        doc = coco_doc(
            [image_rec(1)],
            [
                ann_rec(
                    1, 1, 1, (0, 0, 40, 4),
                    segmentation=[[0, 0, 20, 0, 20, 4, 0, 4], [20, 0, 40, 0, 40, 4, 20, 4]],
                )
            ],
            [{"id": 1, "name": "a"}],
        )
        ds = cocoio.annotate_slenderness(dataset_from(doc))
        assert ds.annotations[0].s == pytest.approx(0.1)
        assert ds.annotations[0].bin is SlendernessBin.XS

    def test_idempotent(self, tiny_gt_doc):
        once = annotated_dataset_from(tiny_gt_doc)
        twice = cocoio.annotate_slenderness(once)
        for a, b in zip(once.annotations, twice.annotations):
            assert (a.s, a.bin, a.s_source) == (b.s, b.bin, b.s_source)

    def test_thread_count_does_not_change_results(self, tiny_gt_doc):
        one = annotated_dataset_from(tiny_gt_doc, threads=1)
        many = annotated_dataset_from(tiny_gt_doc, threads=8)
        for a, b in zip(one.annotations, many.annotations):
            assert (a.id, a.s, a.bin, a.s_source) == (b.id, b.s, b.bin, b.s_source)


def _mix_fixtures():
    base = annotated_dataset_from(
        coco_doc(
            [image_rec(1), image_rec(2)],
            [ann_rec(1, 1, 1, (0, 0, 30, 30)), ann_rec(2, 2, 2, (0, 0, 50, 4))],
            [{"id": 1, "name": "person"}, {"id": 2, "name": "ski"}],
        )
    )
    extra = annotated_dataset_from(
        coco_doc(
            [image_rec(10), image_rec(11)],
            [
                ann_rec(20, 10, 5, (0, 0, 100, 4)),   # XS, category name matches base
                ann_rec(21, 10, 6, (0, 0, 20, 20)),   # R, category absent from base
                ann_rec(22, 11, 6, (0, 0, 80, 3)),    # XS but category absent from base
            ],
            [{"id": 5, "name": "ski"}, {"id": 6, "name": "Sneakers"}],
        )
    )
    return base, extra


class TestMixDatasets:
    def test_only_qualifying_images_added(self):
        base, extra = _mix_fixtures()
        mixed = cocoio.mix_datasets(base, extra, MixConfig(id_offset=1000))
        assert len(mixed.images) == len(base.images) + 1
        added = [img for img in mixed.images if img.source == "extra"]
        assert [img.id for img in added] == [1010]

    def test_unmatched_category_annotations_dropped(self):
        base, extra = _mix_fixtures()
        mixed = cocoio.mix_datasets(base, extra, MixConfig(id_offset=1000))
        new_anns = [a for a in mixed.annotations if a.id >= 1000]
        assert [a.id for a in new_anns] == [1020]
        assert mixed.category_by_id[new_anns[0].category_id].name == "ski"

    def test_filter_bin_widens(self):
        base, extra = _mix_fixtures()
        # with S filter, image 11's Sneakers bar still fails the name match
        mixed = cocoio.mix_datasets(base, extra, MixConfig(filter_bin=SlendernessBin.S, id_offset=1000))
        assert len(mixed.images) == 3

    def test_id_offset_must_clear_base_ids(self):
        base, extra = _mix_fixtures()
        with pytest.raises(IntegrityError, match="id_offset"):
            cocoio.mix_datasets(base, extra, MixConfig(id_offset=2))

    def test_auto_offset_power_of_ten(self):
        base, extra = _mix_fixtures()
        mixed = cocoio.mix_datasets(base, extra)
        assert any(img.id == 20 for img in mixed.images)  # 10 + offset 10

    def test_requires_annotated_inputs(self):
        base, _ = _mix_fixtures()
        raw = dataset_from(
            coco_doc([image_rec(10)], [ann_rec(20, 10, 5, (0, 0, 100, 4))], [{"id": 5, "name": "ski"}])
        )
        with pytest.raises(NotAnnotatedError, match="annotate_slenderness"):
            cocoio.mix_datasets(base, raw)

    def test_counts_add_up(self):
        base, extra = _mix_fixtures()
        mixed = cocoio.mix_datasets(base, extra, MixConfig(id_offset=1000))
        qualifying = 1
        assert len(mixed.images) == len(base.images) + qualifying
        # integrity is re-verified by the Dataset constructor
        assert mixed.is_annotated


class TestSamplingWeights:
    def _ds(self):
        return annotated_dataset_from(
            coco_doc(
                [image_rec(1), image_rec(2), image_rec(3)],
                [
                    ann_rec(1, 1, 1, (0, 0, 30, 30)),  # R
                    ann_rec(2, 2, 1, (0, 0, 100, 4)),  # XS
                    ann_rec(3, 2, 1, (0, 0, 20, 20)),  # R
                ],
                [{"id": 1, "name": "a"}],
            )
        )

    def test_image_level_max_rule(self):
        weights = cocoio.sampling_weights(self._ds(), SampleRates(10, 5, 1))
        assert weights == {1: 1.0, 2: 10.0, 3: 1.0}

    def test_unit_rates_are_identity(self):
        weights = cocoio.sampling_weights(self._ds(), SampleRates(1, 1, 1))
        assert set(weights.values()) == {1.0}

    def test_monotone_in_rates(self):
        ds = self._ds()
        low = cocoio.sampling_weights(ds, SampleRates(3, 2, 1))
        high = cocoio.sampling_weights(ds, SampleRates(10, 2, 1))
        assert all(high[i] >= low[i] for i in low)

    def test_rates_below_one_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            SampleRates(0.5, 1, 1)


class TestDistributionReport:
    def test_three_bins(self):
        doc = coco_doc(
            [image_rec(1)],
            [
                ann_rec(1, 1, 1, (0, 0, 100, 10)),  # s=0.1 XS
                ann_rec(2, 1, 1, (0, 0, 40, 10)),   # s=0.25 S
                ann_rec(3, 1, 1, (0, 0, 10, 9)),    # s=0.9 R
            ],
            [{"id": 1, "name": "a"}],
        )
        report = cocoio.distribution_report(annotated_dataset_from(doc))
        assert [report.counts[b] for b in SlendernessBin] == [1, 1, 1]
        assert sum(report.percentages.values()) == pytest.approx(100.0)

    def test_empty_dataset(self):
        ds = annotated_dataset_from(coco_doc([], [], []))
        report = cocoio.distribution_report(ds)
        assert all(v == 0 for v in report.counts.values())
        assert report.n_measured == 0

    def test_crowd_excluded_but_counted(self):
        doc = coco_doc(
            [image_rec(1)],
            [ann_rec(1, 1, 1, (0, 0, 10, 10)), ann_rec(2, 1, 1, (0, 0, 10, 10), iscrowd=1)],
            [{"id": 1, "name": "a"}],
        )
        report = cocoio.distribution_report(annotated_dataset_from(doc))
        assert report.n_measured == 1
        assert report.n_crowd == 1


class TestSerialization:
    def test_round_trip_preserves_semantics(self, tiny_gt_doc):
        ds = annotated_dataset_from(tiny_gt_doc)
        reloaded = cocoio.load_ground_truth(cocoio.dump_ground_truth(ds).encode())
        assert [img.id for img in reloaded.images] == [img.id for img in ds.images]
        assert [c.name for c in reloaded.categories] == [c.name for c in ds.categories]
        for a, b in zip(ds.annotations, reloaded.annotations):
            assert (a.id, a.image_id, a.category_id) == (b.id, b.image_id, b.category_id)
            assert a.bbox == b.bbox
            assert len(a.segmentation) == len(b.segmentation)
            for pa, pb in zip(a.segmentation, b.segmentation):
                assert np.array_equal(pa, pb)
            assert (a.s, a.bin, a.s_source) == (b.s, b.bin, b.s_source)

    def test_sidecar_csv_schema(self, tiny_gt_doc):
        ds = annotated_dataset_from(tiny_gt_doc)
        lines = cocoio.write_slenderness_csv(ds).splitlines()
        assert lines[0] == "annotation_id,s,bin,source"
        assert lines[1] == "1,0.2,S,polygon"
        assert lines[2] == "2,1.0,R,bbox"

    def test_weights_csv_schema(self):
        text = cocoio.write_weights_csv({2: 10.0, 1: 1.0})
        assert text.splitlines() == ["image_id,weight", "1,1.0", "2,10.0"]
