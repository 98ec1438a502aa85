import numpy as np
import pytest

from error_handlers import InsufficientNeighborhoodError, ValidationError
from local_features import (LocalCovariance, Neighborhood, estimate_normals, feature_field,
                            local_covariance, surface_variation)
from neighbor_index import build_index
from point_cloud import PointCloud
from synthetic_shapes import fibonacci_sphere, plane_grid


def covariance_with(eigenvalues):
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    return LocalCovariance(center=np.zeros(3), radius=1.0, matrix=np.diag(eigenvalues),
                           eigenvalues=eigenvalues, eigenvectors=np.eye(3), n_neighbors=10)


def test_variation_of_known_spectrum():
    assert surface_variation(covariance_with([1.0, 2.0, 5.0])) == pytest.approx(0.125)
    assert surface_variation(covariance_with([1.0, 1.0, 1.0])) == pytest.approx(1 / 3)


def test_all_zero_covariance_is_degenerate():
    cov = covariance_with([0.0, 0.0, 0.0])
    assert cov.is_degenerate
    assert surface_variation(cov) == 0.0


def test_plane_normals_point_up():
    cloud = PointCloud(plane_grid().cloud.positions)
    field = estimate_normals(cloud, build_index(cloud), Neighborhood.nearest(10))
    np.testing.assert_allclose(field.normals, np.tile([0.0, 0.0, 1.0], (len(cloud), 1)), atol=1e-12)
    np.testing.assert_allclose(field.variations, 0.0, atol=1e-12)
    assert not field.degenerate.any()


def test_sphere_normals_are_radial_and_consistent():
    cloud = PointCloud(fibonacci_sphere(2000).cloud.positions)
    field = estimate_normals(cloud, build_index(cloud), Neighborhood.nearest(16))
    dots = np.sum(field.normals * cloud.positions, axis=1)
    # lowest-index point sits at the north pole, so orientation is outward
    assert dots.min() > 0.99


def test_default_field_uses_adaptive_balls():
    cloud = PointCloud(fibonacci_sphere(2000).cloud.positions)
    field = feature_field(cloud, build_index(cloud))
    assert field.neighborhood.describe() == {"mode": "adaptive", "radius": None, "k": 128}
    dots = np.sum(field.normals * cloud.positions, axis=1)
    assert np.mean(dots > np.cos(np.radians(3.0))) >= 0.99


def test_variations_stay_in_range(rng):
    cloud = PointCloud(rng.uniform(-1, 1, size=(500, 3)))
    field = feature_field(cloud, build_index(cloud), neighborhood=Neighborhood.ball(0.3, fallback_k=16))
    assert np.all(field.variations >= 0.0)
    assert np.all(field.variations <= 1 / 3 + 1e-12)
    np.testing.assert_allclose(np.linalg.norm(field.normals, axis=1), 1.0, atol=1e-12)


def test_isotropic_cloud_variation_near_one_third(rng):
    cloud = PointCloud(rng.normal(size=(4000, 3)))
    # covariance is taken about the center point, so pick one near the centroid
    center = int(np.argmin(np.linalg.norm(cloud.positions, axis=1)))
    cov = local_covariance(cloud, build_index(cloud), center, Neighborhood.nearest(4000))
    assert surface_variation(cov) == pytest.approx(1 / 3, abs=0.03)


def test_workers_do_not_change_normals(rng):
    cloud = PointCloud(fibonacci_sphere(600).cloud.positions)
    index = build_index(cloud)
    one = estimate_normals(cloud, index, Neighborhood.nearest(12), workers=1)
    many = estimate_normals(cloud, index, Neighborhood.nearest(12), workers=4)
    np.testing.assert_array_equal(one.normals, many.normals)


def test_tiny_radius_without_fallback_raises():
    cloud = PointCloud(plane_grid().cloud.positions)
    index = build_index(cloud)
    with pytest.raises(InsufficientNeighborhoodError) as info:
        local_covariance(cloud, index, 5, Neighborhood.ball(0.01))
    assert info.value.details["point_id"] == 5
    assert info.value.exit_code == 4


def test_radius_falls_back_to_knn():
    cloud = PointCloud(plane_grid().cloud.positions)
    field = feature_field(cloud, build_index(cloud), neighborhood=Neighborhood.ball(0.01, fallback_k=8))
    np.testing.assert_allclose(np.abs(field.normals[:, 2]), 1.0, atol=1e-12)


def test_neighborhood_validation():
    with pytest.raises(ValidationError):
        Neighborhood(mode="sphere", radius=1.0)
    with pytest.raises(ValidationError):
        Neighborhood.ball(0.0)
    with pytest.raises(ValidationError):
        Neighborhood.nearest(0)
