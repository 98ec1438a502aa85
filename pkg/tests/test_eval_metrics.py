import itertools

import numpy as np
import pytest

from error_handlers import ValidationError
from eval_metrics import (MembershipMatrix, evaluate, label_report, match_segments, p_coverage,
                          res_error, seg_iou, type_iou)
from hybrid_segmentation import SegmentRecord, Segmentation
from primitives import Plane, Sphere, TypeLabel
from synthetic_shapes import two_planes


def test_identical_labels_score_one():
    labels = np.array([0, 0, 1, 1, 2])
    assert seg_iou(labels, labels) == 1.0


def test_score_ignores_label_names():
    assert seg_iou(np.array([5, 5, 9, 9]), np.array([1, 1, 0, 0])) == 1.0


def test_split_segment_scores_half():
    assert seg_iou(np.array([0, 0, 1, 1]), np.zeros(4, dtype=int)) == pytest.approx(0.5)


def test_unmatched_ground_truth_counts_zero():
    # one predicted segment can cover only one of two ground-truth segments
    assert seg_iou(np.zeros(4, dtype=int), np.array([0, 0, 1, 1])) == pytest.approx(0.25)


def test_matching_is_optimal(rng):
    pred = rng.integers(0, 4, size=40)
    gt = rng.integers(0, 3, size=40)
    iou = MembershipMatrix.from_labels(pred).iou(MembershipMatrix.from_labels(gt))
    k_pred, k_gt = iou.shape
    best = max(sum(iou[p[g], g] for g in range(k_gt))
               for p in itertools.permutations(range(k_pred), k_gt))
    assert seg_iou(pred, gt) == pytest.approx(best / k_gt)


def test_membership_has_one_segment_per_point():
    m = MembershipMatrix.from_labels([2, 0, 2, 7])
    assert m.matrix.shape == (4, 3)
    np.testing.assert_array_equal(m.matrix.sum(axis=1), 1)
    np.testing.assert_array_equal(m.segment_ids, [0, 2, 7])


def test_length_mismatch():
    with pytest.raises(ValidationError):
        seg_iou(np.zeros(3, dtype=int), np.zeros(4, dtype=int))


def test_type_agreement():
    matching = match_segments(np.array([0, 0, 1, 1]), np.array([1, 1, 0, 0]))
    assert type_iou(["plane", "sphere"], ["sphere", "plane"], matching) == 1.0
    assert type_iou(["plane", "plane"], ["sphere", "plane"], matching) == 0.5


def test_type_agreement_skips_disjoint_pairs():
    # three segments each side; one pair is forced to match at IoU 0
    matching = match_segments(np.array([0, 1, 2, 2, 2]), np.array([0, 0, 0, 1, 2]))
    assert sum(iou == 0 for iou in matching.ious) == 1
    assert type_iou(["plane"] * 3, ["plane", "sphere", "sphere"], matching) == 0.5


def test_coverage():
    points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.005], [0.0, 0.0, 1.0]])
    plane = Plane([0.0, 0.0, 1.0], 0.0)
    assert p_coverage(points, [plane], epsilon=0.01) == pytest.approx(2 / 3)
    assert p_coverage(points, [], epsilon=0.01) == 0.0
    with pytest.raises(ValidationError):
        p_coverage(points, [plane], epsilon=0.0)


def test_res_error_sum_and_mean():
    sphere = Sphere([0.0, 0.0, 0.0], 1.0)
    samples = [np.array([[2.0, 0.0, 0.0]]), np.array([[0.0, 1.5, 0.0], [0.0, 0.0, 1.0]])]
    total, mean = res_error([sphere, sphere], samples)
    assert total == pytest.approx(1.25)
    assert mean == pytest.approx(0.625)
    assert res_error([None], [samples[0]]) == (0.0, 0.0)


def test_evaluate_perfect_segmentation():
    scene = two_planes()
    records = [SegmentRecord(TypeLabel.PLANE, p, 400, 0.0) for p in scene.primitives]
    pred = Segmentation(labels=scene.cloud.labels.copy(), segments=records)
    report = evaluate(scene.cloud, pred, scene.cloud.labels, gt_types=["plane", "plane"])
    assert report["seg_iou"] == 1.0
    assert report["type_iou"] == 1.0
    assert report["p_coverage"] == 1.0
    assert report["res_error"] == pytest.approx(0.0, abs=1e-12)
    assert report["K_pred"] == report["K_gt"] == 2


def test_label_report():
    report = label_report(np.array([0, 1, 1]), np.array([0, 1, 1]))
    assert report["seg_iou"] == 1.0
    assert report["res_error"] is None
    assert report["K_pred"] == 2
