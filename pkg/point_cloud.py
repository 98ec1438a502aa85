"""
Point cloud container and normalization.

PointCloud is immutable after construction: arrays are copied, cast to
float64/int64 and marked read-only, so one cloud can be shared by workers.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from config import DENSE_LIMIT
from error_handlers import DegenerateInputError, ValidationError

NORMAL_UNIT_TOL = 1e-6


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Positions with optional unit normals, segment labels and extra per-point attributes."""
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be N x 3, got shape {pos.shape}", field="positions")
        n = pos.shape[0]
        if n < 1:
            raise ValidationError("zero points", field="positions")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("non-finite coordinate", field="positions")
        object.__setattr__(self, "positions", _frozen(pos))

        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != (n, 3):
                raise ValidationError(f"normals must be {n} x 3, got {nrm.shape}", field="normals")
            if not np.all(np.isfinite(nrm)):
                raise ValidationError("non-finite normal", field="normals")
            err = np.abs(np.linalg.norm(nrm, axis=1) - 1.0)
            if np.any(err > NORMAL_UNIT_TOL):
                bad = int(np.argmax(err))
                raise ValidationError(f"normal {bad} is not unit length", field="normals")
            object.__setattr__(self, "normals", _frozen(nrm))

        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,):
                raise ValidationError(f"labels must have length {n}", field="labels")
            if lab.dtype.kind not in "iu":
                if not np.all(np.equal(np.mod(lab, 1), 0)):
                    raise ValidationError("labels must be integers", field="labels")
            object.__setattr__(self, "labels", _frozen(lab.astype(np.int64)))

        attrs = {}
        for name, values in dict(self.attributes).items():
            values = np.asarray(values)
            if values.shape[0] != n:
                raise ValidationError(f"attribute '{name}' has {values.shape[0]} rows, expected {n}",
                                      field=name)
            attrs[name] = _frozen(values)
        object.__setattr__(self, "attributes", attrs)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return replace(self, normals=normals)

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return replace(self, labels=labels)

    def with_attributes(self, **values: np.ndarray) -> "PointCloud":
        return replace(self, attributes={**self.attributes, **values})


def subset(cloud: PointCloud, ids: Sequence[int]) -> PointCloud:
    """Cloud restricted to ``ids`` (in the given order), every per-point array kept aligned."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValidationError("subset would leave zero points", field="ids")
    return PointCloud(
        positions=cloud.positions[ids],
        normals=None if cloud.normals is None else cloud.normals[ids],
        labels=None if cloud.labels is None else cloud.labels[ids],
        attributes={k: v[ids] for k, v in cloud.attributes.items()},
    )


def cloud_diameter(positions: np.ndarray) -> float:
    """Exact max pairwise distance up to DENSE_LIMIT points, else twice the max centroid distance."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        return 0.0
    if positions.shape[0] <= DENSE_LIMIT:
        return float(pdist(positions).max())
    center = positions.mean(axis=0)
    return 2.0 * float(np.sqrt(np.sum((positions - center) ** 2, axis=1)).max())


def normalization_transform(cloud: PointCloud) -> Tuple[np.ndarray, float]:
    """
    Translation and scale that bring a cloud to zero mean and unit diameter.

    Returns:
        (center, scale) such that normalized = (positions - center) * scale
    """
    if len(cloud) < 2:
        raise DegenerateInputError("normalization needs at least 2 points",
                                   details={"n_points": len(cloud)})
    center = cloud.positions.mean(axis=0)
    diameter = cloud_diameter(cloud.positions)
    extent = float(np.abs(cloud.positions).max())
    if diameter <= 1e-12 * max(extent, 1.0):
        raise DegenerateInputError("all points coincident")
    return center, 1.0 / diameter


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Translate to the centroid and scale to unit diameter; normals are unaffected."""
    center, scale = normalization_transform(cloud)
    positions = (cloud.positions - center) * scale
    # recentre after scaling so the mean is zero to rounding
    positions = positions - positions.mean(axis=0)
    return replace(cloud, positions=positions)
