import numpy as np
import pytest

from cloud_io import (file_digest, load_cloud, read_fmat, read_labels, save_cloud, write_fmat,
                      write_labels)
from error_handlers import CloudParseError, DegenerateInputError, ValidationError
from point_cloud import PointCloud, cloud_diameter, normalize_cloud, subset


def test_load_xyz_without_normals(write_text):
    cloud = load_cloud(write_text("a.xyz", "0 0 0\n1 0 0\n"))
    assert len(cloud) == 2
    assert not cloud.has_normals
    np.testing.assert_array_equal(cloud.positions[1], [1.0, 0.0, 0.0])


def test_load_xyz_renormalizes_normals(write_text):
    cloud = load_cloud(write_text("n.xyz", "0 0 0 0 0 2\n"))
    np.testing.assert_allclose(cloud.normals[0], [0.0, 0.0, 1.0])


def test_load_xyz_accepts_commas_and_comments(write_text):
    cloud = load_cloud(write_text("c.xyz", "# header\n0,0,0\n1.5, 2, 3\n"))
    np.testing.assert_array_equal(cloud.positions, [[0, 0, 0], [1.5, 2, 3]])


def test_empty_file_has_zero_points(write_text):
    with pytest.raises(CloudParseError, match="zero points"):
        load_cloud(write_text("empty.xyz", ""))


def test_parse_error_reports_line(write_text):
    with pytest.raises(CloudParseError) as info:
        load_cloud(write_text("bad.xyz", "0 0 0\n1 x 0\n"))
    assert info.value.details["line"] == 2
    assert info.value.exit_code == 2


def test_non_finite_value_rejected(write_text):
    with pytest.raises(CloudParseError):
        load_cloud(write_text("inf.xyz", "0 0 inf\n"))


def test_missing_file_is_validation_error(tmp_path):
    with pytest.raises(ValidationError):
        load_cloud(tmp_path / "absent.xyz")


def test_xyz_round_trip_is_exact(tmp_path, rng):
    normals = rng.normal(size=(50, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(rng.normal(size=(50, 3)), normals=normals)
    again = load_cloud(save_cloud(cloud, tmp_path / "c.xyz"))
    np.testing.assert_array_equal(again.positions, cloud.positions)
    np.testing.assert_allclose(again.normals, cloud.normals, atol=1e-15)


def test_binary_ply_keeps_labels_and_attributes(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)), labels=np.arange(20) % 3,
                       attributes={"variation": rng.uniform(0, 1 / 3, 20)})
    again = load_cloud(save_cloud(cloud, tmp_path / "c.ply", binary=True))
    np.testing.assert_array_equal(again.positions, cloud.positions)
    np.testing.assert_array_equal(again.labels, cloud.labels)
    np.testing.assert_array_equal(again.attributes["variation"], cloud.attributes["variation"])


def test_ascii_ply_reads_normals(write_text):
    text = ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
            "property float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n"
            "0 0 0 0 0 3\n1 0 0 0 1 0\n")
    cloud = load_cloud(write_text("a.ply", text))
    np.testing.assert_allclose(cloud.normals, [[0, 0, 1], [0, 1, 0]])


def test_fmat_layout(tmp_path):
    m = np.arange(6, dtype=np.float64).reshape(2, 3)
    path = write_fmat(tmp_path / "m.fmat", m)
    blob = path.read_bytes()
    assert blob[:4] == b"FMAT"
    assert int.from_bytes(blob[4:8], "little") == 2
    assert int.from_bytes(blob[8:12], "little") == 3
    np.testing.assert_array_equal(read_fmat(path), m)


def test_fmat_bad_magic(tmp_path):
    path = tmp_path / "bad.fmat"
    path.write_bytes(b"FMAX" + bytes(8))
    with pytest.raises(CloudParseError, match="magic"):
        read_fmat(path)


def test_labels_file(tmp_path, write_text):
    path = write_labels(tmp_path / "l.labels", np.array([2, 0, 1]))
    np.testing.assert_array_equal(read_labels(path), [2, 0, 1])
    with pytest.raises(CloudParseError):
        read_labels(write_text("bad.labels", "1\n1.5\n"))


def test_file_digest_is_sha256(write_text):
    assert file_digest(write_text("d.txt", "")) == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


def test_normalize_two_points():
    cloud = normalize_cloud(PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]])))
    np.testing.assert_allclose(cloud.positions, [[-0.5, 0, 0], [0.5, 0, 0]], atol=1e-12)


def test_normalize_is_idempotent(rng):
    once = normalize_cloud(PointCloud(rng.normal(size=(200, 3)) * 5 + 3))
    twice = normalize_cloud(once)
    np.testing.assert_allclose(once.positions.mean(axis=0), 0.0, atol=1e-9)
    assert cloud_diameter(once.positions) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(twice.positions, once.positions, atol=1e-9)


def test_normalize_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        normalize_cloud(PointCloud(np.zeros((1, 3))))
    with pytest.raises(DegenerateInputError, match="coincident"):
        normalize_cloud(PointCloud(np.ones((4, 3))))


def test_cloud_validation():
    with pytest.raises(ValidationError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValidationError, match="unit"):
        PointCloud(np.zeros((1, 3)), normals=np.array([[0.0, 0.0, 2.0]]))
    cloud = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        cloud.positions[0, 0] = 1.0


def test_subset_keeps_arrays_aligned(rng):
    cloud = PointCloud(rng.normal(size=(5, 3)), labels=np.arange(5),
                       attributes={"v": np.arange(5) * 0.1})
    part = subset(cloud, [4, 1])
    np.testing.assert_array_equal(part.labels, [4, 1])
    np.testing.assert_allclose(part.attributes["v"], [0.4, 0.1])
