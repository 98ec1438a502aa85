import numpy as np
import pytest

from error_handlers import ValidationError
from hybrid_segmentation import (Feature, FeatureSet, descriptor_features, feature_entropy,
                                 mean_shift, median_nonzero_distance, pullpush_quality,
                                 read_segmentation, segment, weights_from_entropies)
from primitives import TypeLabel
from synthetic_shapes import plane_grid, two_planes


def test_weights_have_unit_norm_and_favor_low_entropy():
    w = weights_from_entropies([1.0, 2.0, 4.0])
    assert np.sum(w ** 2) == pytest.approx(1.0)
    assert w[0] > w[1] > w[2]
    np.testing.assert_allclose(w / w[0], [1.0, 0.5, 0.25])


def test_small_entropies_are_shifted():
    w = weights_from_entropies([0.05, 1.0])
    np.testing.assert_allclose(w / w[0], [1.0, 1.0 / 1.95])


def test_entropy_of_constant_feature():
    n = 50
    h = feature_entropy(np.zeros(n), sigma=1.0)
    p = 1.0 / np.sqrt(2.0 * np.pi)
    assert h == pytest.approx(-n * p * np.log(p))


def test_entropy_needs_two_rows():
    with pytest.raises(ValidationError):
        feature_entropy(np.zeros(1), sigma=1.0)


def test_median_nonzero_distance_ignores_duplicates():
    values = np.array([0.0, 0.0, 0.0, 2.0])
    assert median_nonzero_distance(values) == 2.0
    assert median_nonzero_distance(np.ones(5)) == 0.0


def test_expanded_drops_constant_columns():
    values = np.column_stack([np.ones(10), np.arange(10.0)])
    expanded = FeatureSet([Feature("d", values, per_column=True),
                           Feature("c", np.full(10, 3.0))]).expanded()
    assert expanded.names == ["d[1]"]


def test_feature_set_rejects_mismatched_rows():
    with pytest.raises(ValidationError):
        FeatureSet([Feature("a", np.arange(3.0)), Feature("b", np.arange(4.0))])


def test_mean_shift_finds_two_blobs(rng):
    a = rng.normal(0.0, 0.05, size=(60, 2))
    b = rng.normal(0.0, 0.05, size=(40, 2)) + [5.0, 5.0]
    modes, labels = mean_shift(np.vstack([a, b]), bandwidth=0.5)
    assert len(modes) == 2
    np.testing.assert_array_equal(labels, [0] * 60 + [1] * 40)
    np.testing.assert_allclose(modes[1], b.mean(axis=0), atol=0.05)


def test_mean_shift_single_point():
    modes, labels = mean_shift(np.array([[1.0, 2.0]]), bandwidth=1.0)
    np.testing.assert_array_equal(labels, [0])
    np.testing.assert_allclose(modes, [[1.0, 2.0]])


def test_mean_shift_rejects_bad_bandwidth():
    with pytest.raises(ValidationError):
        mean_shift(np.zeros((3, 2)), bandwidth=0.0)


def test_push_of_close_means():
    d = np.array([0.0, 0.0, 0.5, 0.5])
    pull, push = pullpush_quality(d, np.array([0, 0, 1, 1]), delta1=0.5, delta2=1.5)
    assert pull == 0.0
    assert push == pytest.approx(1.0)


def test_pull_of_spread_segment():
    d = np.array([-1.0, 1.0, 10.0, 10.0])
    pull, push = pullpush_quality(d, np.array([0, 0, 1, 1]), delta1=0.5, delta2=1.5)
    assert pull == pytest.approx(0.25)
    assert push == 0.0


def test_single_segment_has_no_push():
    _, push = pullpush_quality(np.zeros((5, 2)), np.zeros(5, dtype=int))
    assert push == 0.0


def test_segment_two_planes_by_height():
    scene = two_planes()
    cloud = scene.cloud
    features = FeatureSet([Feature("height", cloud.positions[:, 2])])
    result = segment(cloud, features, per_point_types=["plane"] * len(cloud))
    assert result.n_segments == 2
    np.testing.assert_array_equal(result.labels, cloud.labels)
    offsets = sorted(s.params.offset for s in result.segments)
    np.testing.assert_allclose(offsets, [0.0, 0.5], atol=1e-12)
    assert result.weights == {"height": pytest.approx(1.0)}


def test_segment_weights_use_each_feature_bandwidth():
    cloud = two_planes().cloud
    height, across = cloud.positions[:, 2], cloud.positions[:, 0]
    features = FeatureSet([Feature("height", height, sigma=0.05), Feature("across", across, sigma=0.3)])
    result = segment(cloud, features, per_point_types=["plane"] * len(cloud), merge_tol=None)
    expected = weights_from_entropies([feature_entropy(height, 0.05), feature_entropy(across, 0.3)])
    assert list(result.weights) == ["height", "across"]
    np.testing.assert_allclose([result.weights["height"], result.weights["across"]], expected, rtol=1e-12)


def test_coplanar_segments_are_merged():
    cloud = plane_grid().cloud
    side = (cloud.positions[:, 0] >= 0.5).astype(float)
    features = FeatureSet([Feature("side", side)])
    kept = segment(cloud, features, per_point_types=["plane"] * len(cloud), merge_tol=None)
    merged = segment(cloud, features, per_point_types=["plane"] * len(cloud), merge_tol=0.01)
    assert kept.n_segments == 2
    assert merged.n_segments == 1
    assert merged.segments[0].count == len(cloud)


def test_small_clusters_fold_into_neighbors():
    cloud = plane_grid().cloud
    flag = np.zeros(len(cloud))
    flag[:5] = 1.0
    result = segment(cloud, FeatureSet([Feature("flag", flag)]), min_size=20, merge_tol=None,
                     types=[TypeLabel.PLANE])
    assert result.n_segments == 1
    assert result.segments[0].type is TypeLabel.PLANE


def test_constant_features_give_one_segment():
    cloud = plane_grid().cloud
    result = segment(cloud, descriptor_features({"d": np.ones((len(cloud), 2))}),
                     types=[TypeLabel.PLANE])
    assert result.n_segments == 1
    assert result.weights == {}


def test_segmentation_files_read_back(tmp_path):
    cloud = two_planes().cloud
    result = segment(cloud, FeatureSet([Feature("height", cloud.positions[:, 2])]),
                     per_point_types=["plane"] * len(cloud))
    labels_path, _ = result.write(tmp_path)
    again = read_segmentation(labels_path)
    np.testing.assert_array_equal(again.labels, result.labels)
    assert [s.type for s in again.segments] == [TypeLabel.PLANE, TypeLabel.PLANE]
    assert again.segments[1].params.offset == pytest.approx(result.segments[1].params.offset)


def test_read_segmentation_needs_sidecar(tmp_path):
    path = tmp_path / "pred.labels"
    path.write_text("0\n1\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="sidecar"):
        read_segmentation(path)
