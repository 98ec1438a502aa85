import numpy as np
import pytest

from error_handlers import ValidationError
from primitives import (Cone, Cylinder, Plane, Sphere, TypeLabel, distance, from_dict,
                        packed_type, residual_error, unpack)


def test_plane_distance_and_canonical_form():
    plane = Plane([0.0, 0.0, -1.0], -2.0)
    np.testing.assert_array_equal(plane.normal, [0.0, 0.0, 1.0])
    assert plane.offset == 2.0
    assert distance([5.0, -3.0, 0.0], plane) == pytest.approx(2.0)


def test_sphere_distance():
    sphere = Sphere([1.0, 0.0, 0.0], 2.0)
    assert distance([1.0, 0.0, 0.0], sphere) == pytest.approx(2.0)
    assert distance([4.0, 0.0, 0.0], sphere) == pytest.approx(1.0)


def test_cylinder_ignores_axial_offset():
    cyl = Cylinder([0.0, 0.0, -1.0], [0.0, 0.0, 0.0], 1.0)
    np.testing.assert_array_equal(cyl.axis, [0.0, 0.0, 1.0])
    d = distance(np.array([[3.0, 0.0, 0.0], [3.0, 0.0, 100.0], [0.0, 0.5, 7.0]]), cyl)
    np.testing.assert_allclose(d, [2.0, 2.0, 0.5])


def test_cone_distance():
    cone = Cone([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], np.pi / 4)
    assert distance([1.0, 0.0, 1.0], cone) == pytest.approx(0.0, abs=1e-12)
    assert distance([1.0, 0.0, 0.0], cone) == pytest.approx(np.sqrt(0.5))
    # behind the apex the nearest surface point is the apex itself
    assert distance([0.0, 0.0, -1.0], cone) == pytest.approx(1.0)
    assert distance([0.0, 0.0, 0.0], cone) == 0.0


def test_missing_primitive_is_infinitely_far():
    assert distance([0.0, 0.0, 0.0], None) == np.inf


def test_residual_error_is_mean_distance():
    plane = Plane([0.0, 0.0, 1.0], 0.0)
    samples = np.array([[0.0, 0.0, 0.1], [0.0, 0.0, -0.3]])
    assert residual_error(plane, samples) == pytest.approx(0.2)
    with pytest.raises(ValidationError):
        residual_error(plane, np.empty((0, 3)))


def test_parameter_validation():
    with pytest.raises(ValidationError):
        Plane([0.0, 0.0, 2.0], 0.0)
    with pytest.raises(ValidationError):
        Sphere([0.0, 0.0, 0.0], -1.0)
    with pytest.raises(ValidationError):
        Cone([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], np.pi / 2)


def test_packed_layout():
    vec = Cylinder([0.0, 1.0, 0.0], [1.0, 2.0, 3.0], 0.5).pack()
    assert vec.shape == (22,)
    np.testing.assert_array_equal(vec[8:15], [0.0, 1.0, 0.0, 1.0, 2.0, 3.0, 0.5])
    assert packed_type(vec) is TypeLabel.CYLINDER
    assert unpack(vec).radius == 0.5
    assert packed_type(np.zeros(22)) is TypeLabel.OTHER


def test_type_label_parsing():
    assert TypeLabel.parse("Cylinder") is TypeLabel.CYLINDER
    assert TypeLabel.parse(3) is TypeLabel.CONE
    assert TypeLabel.SPHERE.code == 1
    with pytest.raises(ValidationError):
        TypeLabel.parse("torus")
    for code in (-1, 5, np.int64(9)):
        with pytest.raises(ValidationError):
            TypeLabel.parse(code)


def test_from_dict_requires_every_parameter():
    sphere = from_dict({"type": "sphere", "center": [0, 0, 1], "radius": 2})
    assert sphere.radius == 2.0
    with pytest.raises(ValidationError):
        from_dict({"type": "cone", "apex": [0, 0, 0]})
    with pytest.raises(ValidationError):
        from_dict({"type": "other"})
