import numpy as np
import pytest

from error_handlers import SpectralRankError, ValidationError
from point_cloud import PointCloud
from primitives import Plane, TypeLabel
from spectral_embedding import (AdjacencyMatrix, binary_weight_model, consistency_matrix,
                                davis_kahan_check, leading_eigs, select_dimension,
                                smoothness_matrix, top_eigenpairs)
from synthetic_shapes import two_planes


@pytest.fixture
def planes():
    return two_planes()


def test_consistency_matrix_is_a_symmetric_affinity(planes):
    a = consistency_matrix(planes.cloud, planes.per_point(), sigmas={TypeLabel.PLANE: 0.1})
    m = a.to_dense()
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    assert m.min() >= 0.0 and m.max() <= 1.0
    assert m[0, 1] == pytest.approx(1.0)
    assert m[0, 799] == pytest.approx(np.exp(-0.25 / 0.02))


def test_other_hypotheses_carry_no_weight(planes):
    per_point = planes.per_point()
    per_point[0] = (TypeLabel.OTHER, None)
    m = consistency_matrix(planes.cloud, per_point, sigmas={TypeLabel.PLANE: 0.1}).to_dense()
    # point 1 lies on point 0's plane, but only point 1's hypothesis contributes
    assert m[0, 1] == pytest.approx(0.5)


def test_invalid_hypothesis_rejected(planes):
    per_point = planes.per_point()
    per_point[3] = (TypeLabel.SPHERE, per_point[3][1])
    with pytest.raises(ValidationError):
        consistency_matrix(planes.cloud, per_point)


def test_consistency_descriptors_separate_planes(planes):
    a = consistency_matrix(planes.cloud, planes.per_point(), sigmas={TypeLabel.PLANE: 0.1})
    u = leading_eigs(a, 2).descriptors
    labels = planes.cloud.labels
    centers = np.vstack([u[labels == k].mean(axis=0) for k in (0, 1)])
    spread = max(np.linalg.norm(u[labels == k] - centers[k], axis=1).max() for k in (0, 1))
    assert np.linalg.norm(centers[0] - centers[1]) > 5 * max(spread, 1e-12)


def test_sparse_path_truncates_rows(planes):
    a = consistency_matrix(planes.cloud, planes.per_point(), sigmas={TypeLabel.PLANE: 0.1},
                           dense_limit=100, row_keep=32)
    assert a.is_sparse and a.truncated
    m = a.to_dense()
    np.testing.assert_allclose(m, m.T)
    np.testing.assert_array_equal(np.diag(m), 1.0)
    assert np.all((m > 0).sum(axis=1) >= 32)


def test_sparse_rows_keep_their_largest_entries(planes, rng):
    # per-point heights make the strongest partners unrelated to spatial proximity
    cloud = planes.cloud
    per_point = [(TypeLabel.PLANE, Plane([0.0, 0.0, 1.0], float(c))) for c in rng.uniform(-0.2, 0.7, len(cloud))]
    dense = consistency_matrix(cloud, per_point, sigmas={TypeLabel.PLANE: 0.1}).to_dense()
    sparse = consistency_matrix(cloud, per_point, sigmas={TypeLabel.PLANE: 0.1},
                                dense_limit=100, row_keep=16).to_dense()
    stored = sparse > 0
    np.testing.assert_array_equal(sparse[stored], dense[stored])
    off = ~np.eye(len(cloud), dtype=bool)
    for i in range(len(cloud)):
        top_dense = np.sort(dense[i][off[i]])[::-1][:16]
        top_sparse = np.sort(sparse[i][off[i]])[::-1][:16]
        np.testing.assert_array_equal(top_sparse, top_dense)


def test_smoothness_matrix(planes):
    a = smoothness_matrix(planes.cloud, k=10)
    m = a.to_dense()
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(np.diag(m), 0.0)
    labels = planes.cloud.labels
    assert not np.any(m[np.ix_(labels == 0, labels == 1)])
    # parallel normals give unit weights on every edge
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_smoothness_needs_normals(planes):
    with pytest.raises(ValidationError):
        smoothness_matrix(PointCloud(planes.cloud.positions))


def test_smoothness_components_are_orthogonal(planes):
    a = smoothness_matrix(planes.cloud, k=10)
    u = leading_eigs(a, 2).descriptors
    labels = planes.cloud.labels
    # identical components share the top eigenvalue; their rows span orthogonal directions
    np.testing.assert_allclose(u[labels == 0] @ u[labels == 1].T, 0.0, atol=1e-8)
    assert np.linalg.norm(u, axis=1).min() > 0


def test_descriptor_scaling():
    m = np.diag([4.0, 1.0, 0.5])
    desc = leading_eigs(AdjacencyMatrix(m, kind="test"), 2)
    np.testing.assert_allclose(desc.eigenvalues, [4.0, 1.0])
    np.testing.assert_allclose(np.abs(desc.descriptors[:2, :2]), [[1.0, 0.0], [0.0, 2.0]])


def test_eigenvectors_are_sign_canonical(rng):
    x = rng.normal(size=(30, 30))
    _, v = top_eigenpairs(AdjacencyMatrix(x + x.T, kind="test"), 4)
    rows = np.argmax(np.abs(v), axis=0)
    assert np.all(v[rows, np.arange(4)] > 0)


def test_rank_deficient_dimension_raises():
    with pytest.raises(SpectralRankError):
        leading_eigs(AdjacencyMatrix(np.ones((5, 5)), kind="test"), 2)


def test_eigengap_selection():
    assert select_dimension(np.array([10.0, 9.0, 1.0, 0.5])) == 2
    assert select_dimension(np.array([5.0, 5.0, 5.0, 0.0, 0.0])) == 3
    assert select_dimension(np.array([0.0, 0.0])) == 1


def test_eigengap_picks_block_count():
    a, _, _ = binary_weight_model(120, 3, 0.0, seed=1)
    assert leading_eigs(AdjacencyMatrix(a, kind="consistency")).dim == 3


def test_binary_weight_model_structure():
    a, a_good, labels = binary_weight_model(100, 4, 0.2, seed=3)
    np.testing.assert_array_equal(a, a.T)
    np.testing.assert_array_equal(np.diag(a), 1.0)
    assert not np.any(a_good[labels[:, None] != labels[None, :]])
    assert set(np.unique(a)) <= {0.0, 0.5, 1.0}


def test_davis_kahan_without_outliers():
    a, a_good, _ = binary_weight_model(80, 4, 0.0, seed=0)
    report = davis_kahan_check(a_good, a - a_good, 4)
    assert report.perturbation_norm == 0.0
    assert report.lhs < 1e-8
    assert report.holds


@pytest.mark.parametrize("rate", [0.05, 0.1, 0.2])
def test_davis_kahan_bound_holds(rate):
    for seed in range(5):
        a, a_good, _ = binary_weight_model(200, 4, rate, seed=seed)
        report = davis_kahan_check(a_good, a - a_good, 4)
        assert report.holds, report.to_dict()
        assert report.gap > 0


def test_davis_kahan_rejects_asymmetric_perturbation():
    e = np.zeros((4, 4))
    e[0, 1] = 1.0
    with pytest.raises(ValidationError):
        davis_kahan_check(np.eye(4), e, 2)
