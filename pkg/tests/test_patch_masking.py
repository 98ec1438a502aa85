import numpy as np
import pytest

from error_handlers import ValidationError
from neighbor_index import build_index
from patch_masking import (build_patches, farthest_point_sample, feature_reconstruction_loss,
                           mask_count, select_mask, split_points)
from point_cloud import PointCloud
from synthetic_shapes import fibonacci_sphere


@pytest.fixture
def ball():
    return PointCloud(fibonacci_sphere(1024).cloud.positions)


def test_mask_count():
    assert mask_count(128, 0.6) == 77
    assert mask_count(10, 0.5) == 5
    assert mask_count(10, 0.99) == 9


def test_fps_picks_the_far_point():
    cloud = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0], [2.0, 0, 0]]))
    np.testing.assert_array_equal(farthest_point_sample(cloud, 2, start=0), [0, 2])
    np.testing.assert_array_equal(farthest_point_sample(cloud, 3, start=0), [0, 2, 3])


def test_fps_centers_are_distinct_and_seeded(ball):
    a = farthest_point_sample(ball, 64, seed=5)
    assert len(np.unique(a)) == 64
    np.testing.assert_array_equal(a, farthest_point_sample(ball, 64, seed=5))


def test_fps_with_coincident_points_takes_every_index():
    cloud = PointCloud(np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]]))
    np.testing.assert_array_equal(farthest_point_sample(cloud, 3, start=0), [0, 2, 1])
    doubled = PointCloud(np.repeat(np.eye(3), 2, axis=0))
    assert sorted(farthest_point_sample(doubled, 6, seed=1)) == list(range(6))


def test_fps_count_bounds(ball):
    with pytest.raises(ValidationError):
        farthest_point_sample(ball, 0)
    with pytest.raises(ValidationError):
        farthest_point_sample(ball, 2000)


def test_patches_are_center_neighborhoods(ball):
    centers = farthest_point_sample(ball, 128, seed=0)
    patches = build_patches(ball, build_index(ball), centers, k=32)
    assert patches.members.shape == (128, 32)
    # the nearest member of each patch is its center
    np.testing.assert_array_equal(patches.members[:, 0], centers)
    assert not patches.duplicated


def test_masking_splits_patches(ball):
    centers = farthest_point_sample(ball, 128, seed=0)
    mask = select_mask(build_patches(ball, build_index(ball), centers, k=32), 0.6, seed=1)
    assert mask.n_masked == 77
    assert mask.n_visible == 51
    record = mask.to_dict()
    assert len(record["masked_ids"]) == 77 and record["K"] == 128


def test_removed_points_lie_only_in_masked_patches(ball):
    centers = farthest_point_sample(ball, 128, seed=0)
    mask = select_mask(build_patches(ball, build_index(ball), centers, k=32), 0.6, seed=1)
    removed, visible = split_points(mask, len(ball))
    assert len(removed) + len(visible) == len(ball)
    kept_members = set(mask.patches.members[~mask.masked].ravel().tolist())
    assert not kept_members & set(removed.tolist())
    assert set(removed.tolist()) <= set(mask.patches.members[mask.masked].ravel().tolist())


def test_small_cloud_repeats_members():
    cloud = PointCloud(np.eye(3))
    patches = build_patches(cloud, build_index(cloud), np.array([0, 1]), k=5)
    assert patches.duplicated
    assert patches.members.shape == (2, 5)
    assert set(patches.members[0].tolist()) == {0, 1, 2}


def test_single_patch_cannot_be_masked():
    cloud = PointCloud(np.eye(3))
    patches = build_patches(cloud, build_index(cloud), np.array([0]), k=2)
    with pytest.raises(ValidationError):
        select_mask(patches, 0.5)


def test_feature_reconstruction_loss():
    normals = np.tile([0.0, 0.0, 1.0], (4, 1))
    flipped = -normals
    assert feature_reconstruction_loss(normals, normals, np.zeros(4), np.zeros(4)) == 0.0
    assert feature_reconstruction_loss(flipped, normals, np.full(4, 0.1), np.zeros(4)) == (
        pytest.approx(4.1))
