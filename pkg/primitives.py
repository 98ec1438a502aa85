"""
Primitive parameter records and point-to-primitive distances.

Packed interchange layout (22 floats, unused slots zero):

    [0:3]  plane normal     [3]  plane offset
    [4:7]  sphere center    [7]  sphere radius
    [8:11] cylinder axis    [11:14] cylinder axis point    [14] cylinder radius
    [15:18] cone apex       [18:21] cone axis              [21] cone half-angle
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Union

import numpy as np

from error_handlers import ValidationError

UNIT_TOL = 1e-9
PACKED_WIDTH = 22


class TypeLabel(Enum):
    """Primitive types; OTHER is accepted on input but never fitted."""
    PLANE = "plane"
    SPHERE = "sphere"
    CYLINDER = "cylinder"
    CONE = "cone"
    OTHER = "other"

    @classmethod
    def parse(cls, value: Union[str, int, "TypeLabel"]) -> "TypeLabel":
        if isinstance(value, TypeLabel):
            return value
        if isinstance(value, (int, np.integer)):
            members = list(cls)
            if not 0 <= int(value) < len(members):
                raise ValidationError(f"primitive type code {int(value)} out of range", field="type")
            return members[int(value)]
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValidationError(f"unknown primitive type '{value}'", field="type")

    @property
    def code(self) -> int:
        return list(TypeLabel).index(self)


FITTABLE_TYPES = (TypeLabel.PLANE, TypeLabel.SPHERE, TypeLabel.CYLINDER, TypeLabel.CONE)


def _vec3(value, name: str) -> np.ndarray:
    vec = np.asarray(value, dtype=np.float64).reshape(-1)
    if vec.shape != (3,) or not np.all(np.isfinite(vec)):
        raise ValidationError(f"{name} must be a finite 3-vector", field=name)
    return vec


def _unit(value, name: str) -> np.ndarray:
    vec = _vec3(value, name)
    if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOL:
        raise ValidationError(f"{name} must be unit length", field=name)
    return vec


def canonical_axis(axis: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive."""
    axis = np.asarray(axis, dtype=np.float64)
    return axis if axis[int(np.argmax(np.abs(axis)))] >= 0 else -axis


def _norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


@dataclass(frozen=True)
class Plane:
    """Points p with p.n = d; stored with d >= 0."""
    normal: np.ndarray
    offset: float

    type = TypeLabel.PLANE

    def __post_init__(self):
        n = _unit(self.normal, "normal")
        d = float(self.offset)
        if not np.isfinite(d):
            raise ValidationError("plane offset must be finite", field="offset")
        if d < 0 or (d == 0 and not np.array_equal(n, canonical_axis(n))):
            n, d = -n, -d
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", d + 0.0)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(points, dtype=np.float64) @ self.normal - self.offset)

    def pack(self) -> np.ndarray:
        vec = np.zeros(PACKED_WIDTH)
        vec[0:3], vec[3] = self.normal, self.offset
        return vec

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type.value, "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    type = TypeLabel.SPHERE

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValidationError("sphere radius must be positive", field="radius")
        object.__setattr__(self, "radius", float(self.radius))

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(_norms(np.asarray(points, dtype=np.float64) - self.center) - self.radius)

    def pack(self) -> np.ndarray:
        vec = np.zeros(PACKED_WIDTH)
        vec[4:7], vec[7] = self.center, self.radius
        return vec

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type.value, "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Cylinder:
    """Infinite cylinder around the line center + t * axis."""
    axis: np.ndarray
    center: np.ndarray
    radius: float

    type = TypeLabel.CYLINDER

    def __post_init__(self):
        object.__setattr__(self, "axis", canonical_axis(_unit(self.axis, "axis")))
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValidationError("cylinder radius must be positive", field="radius")
        object.__setattr__(self, "radius", float(self.radius))

    def distance(self, points: np.ndarray) -> np.ndarray:
        v = np.asarray(points, dtype=np.float64) - self.center
        radial = v - np.multiply.outer(v @ self.axis, self.axis)
        return np.abs(_norms(radial) - self.radius)

    def pack(self) -> np.ndarray:
        vec = np.zeros(PACKED_WIDTH)
        vec[8:11], vec[11:14], vec[14] = self.axis, self.center, self.radius
        return vec

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type.value, "axis": self.axis.tolist(),
                "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Cone:
    """Single-nappe cone: apex, unit axis into the opening, half-angle in (0, pi/2)."""
    apex: np.ndarray
    axis: np.ndarray
    half_angle: float

    type = TypeLabel.CONE

    def __post_init__(self):
        object.__setattr__(self, "apex", _vec3(self.apex, "apex"))
        object.__setattr__(self, "axis", _unit(self.axis, "axis"))
        theta = float(self.half_angle)
        if not (0.0 < theta < np.pi / 2):
            raise ValidationError("cone half-angle must lie in (0, pi/2)", field="half_angle")
        object.__setattr__(self, "half_angle", theta)

    def distance(self, points: np.ndarray) -> np.ndarray:
        v = np.asarray(points, dtype=np.float64) - self.apex
        length = _norms(v)
        safe = np.where(length > 0, length, 1.0)
        cos_phi = np.clip((v @ self.axis) / safe, -1.0, 1.0)
        offset = np.abs(np.arccos(cos_phi) - self.half_angle)
        dist = np.where(offset < np.pi / 2, length * np.sin(np.minimum(offset, np.pi / 2)), length)
        return np.where(length > 0, dist, 0.0)

    def pack(self) -> np.ndarray:
        vec = np.zeros(PACKED_WIDTH)
        vec[15:18], vec[18:21], vec[21] = self.apex, self.axis, self.half_angle
        return vec

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type.value, "apex": self.apex.tolist(),
                "axis": self.axis.tolist(), "half_angle": self.half_angle}


PrimitiveParams = Union[Plane, Sphere, Cylinder, Cone]


def distance(points: np.ndarray, prim: PrimitiveParams) -> Union[float, np.ndarray]:
    """Unsigned distance from a point (float result) or an array of points to a primitive."""
    points = np.asarray(points, dtype=np.float64)
    if prim is None:
        return np.inf if points.ndim == 1 else np.full(points.shape[0], np.inf)
    d = prim.distance(points)
    return float(d) if points.ndim == 1 else d


def residual_error(prim: PrimitiveParams, samples: np.ndarray) -> float:
    """Mean point-to-primitive distance over a nonempty sample set."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ValidationError("residual needs at least one sample", field="samples")
    return float(np.mean(prim.distance(samples)))


def packed_type(vec: np.ndarray) -> TypeLabel:
    """Type of a packed row, read off the block that is populated."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (PACKED_WIDTH,):
        raise ValidationError(f"packed primitive must have {PACKED_WIDTH} entries", field="packed")
    if np.any(vec[0:3]):
        return TypeLabel.PLANE
    if vec[7] > 0:
        return TypeLabel.SPHERE
    if vec[14] > 0:
        return TypeLabel.CYLINDER
    if vec[21] > 0:
        return TypeLabel.CONE
    return TypeLabel.OTHER


def unpack(vec: np.ndarray) -> PrimitiveParams:
    vec = np.asarray(vec, dtype=np.float64)
    kind = packed_type(vec)
    if kind is TypeLabel.PLANE:
        return Plane(vec[0:3], vec[3])
    if kind is TypeLabel.SPHERE:
        return Sphere(vec[4:7], vec[7])
    if kind is TypeLabel.CYLINDER:
        return Cylinder(vec[8:11], vec[11:14], vec[14])
    if kind is TypeLabel.CONE:
        return Cone(vec[15:18], vec[18:21], vec[21])
    raise ValidationError("packed row holds no primitive", field="packed")


def from_dict(record: Dict[str, Any]) -> PrimitiveParams:
    kind = TypeLabel.parse(record.get("type", ""))
    try:
        if kind is TypeLabel.PLANE:
            return Plane(record["normal"], record["offset"])
        if kind is TypeLabel.SPHERE:
            return Sphere(record["center"], record["radius"])
        if kind is TypeLabel.CYLINDER:
            return Cylinder(record["axis"], record["center"], record["radius"])
        if kind is TypeLabel.CONE:
            return Cone(record["apex"], record["axis"], record["half_angle"])
    except KeyError as e:
        raise ValidationError(f"{kind.value} record lacks {e}", field=str(e))
    raise ValidationError("'other' has no parameters", field="type")
