"""
Patch construction and masking for masked-feature pretraining data.

K centers come from farthest point sampling, each patch holds the k nearest
points of its center, and M = min(ceil(m_r * K), K - 1) patches are masked.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from cloud_io import write_json
from error_handlers import ValidationError
from logger_config import get_logger
from neighbor_index import NeighborIndex, point_distances
from point_cloud import PointCloud

logger = get_logger(__name__)


@dataclass
class Patches:
    """Centers (FPS order) and their k-NN member lists."""
    centers: np.ndarray
    members: np.ndarray
    k: int
    duplicated: bool = False

    @property
    def count(self) -> int:
        return len(self.centers)

    def coverage(self, n_points: int) -> float:
        """Fraction of the cloud inside at least one patch."""
        return float(np.unique(self.members).size / n_points)


@dataclass
class PatchMask:
    patches: Patches
    masked: np.ndarray
    mask_ratio: float
    seed: int

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def n_visible(self) -> int:
        return self.patches.count - self.n_masked

    def to_dict(self) -> Dict[str, Any]:
        return {"centers": self.patches.centers.tolist(),
                "masked_ids": np.nonzero(self.masked)[0].tolist(),
                "k": self.patches.k, "K": self.patches.count,
                "m_r": self.mask_ratio, "seed": self.seed,
                "duplicated_members": self.patches.duplicated}

    def write(self, path: Union[str, Path]) -> Path:
        return write_json(path, self.to_dict())


def farthest_point_sample(cloud: PointCloud, count: int, seed: int = 0,
                          start: Optional[int] = None) -> np.ndarray:
    """
    Greedy farthest point sampling.

    Args:
        cloud: Source cloud
        count: Number of centers K, 1 <= K <= N
        seed: Picks the start index when ``start`` is None
        start: Fixed start index

    Returns:
        Indices in selection order; ties go to the lower index
    """
    n = len(cloud)
    if not 1 <= count <= n:
        raise ValidationError(f"cannot sample {count} centers from {n} points", field="patch_count")
    if start is None:
        start = int(np.random.default_rng(seed).integers(0, n))
    elif not 0 <= start < n:
        raise ValidationError(f"start index {start} out of range", field="start")

    positions = cloud.positions
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    nearest = point_distances(positions, positions[start])
    # chosen points never win again, even when duplicates drive every distance to 0
    nearest[start] = -np.inf
    for i in range(1, count):
        chosen[i] = int(np.argmax(nearest))
        nearest = np.minimum(nearest, point_distances(positions, positions[chosen[i]]))
        nearest[chosen[i]] = -np.inf
    return chosen


def build_patches(cloud: PointCloud, index: NeighborIndex, centers: np.ndarray, k: int = 32) -> Patches:
    """k nearest points per center; when N < k the lists are padded by repetition and flagged."""
    if k < 1:
        raise ValidationError("patch size k must be >= 1", field="patch_k")
    centers = np.asarray(centers, dtype=np.int64)
    n = len(cloud)
    members, _ = index.knn_many(cloud.positions[centers], min(k, n))
    duplicated = k > n
    if duplicated:
        members = np.take(members, np.arange(k) % n, axis=1)
        logger.warning("Patch size exceeds cloud size, members repeat", k=k, n_points=n)
    return Patches(centers=centers, members=members, k=k, duplicated=duplicated)


def mask_count(count: int, mask_ratio: float) -> int:
    return min(math.ceil(mask_ratio * count - 1e-9), count - 1)


def select_mask(patches: Patches, mask_ratio: float, seed: int = 0) -> PatchMask:
    """Mask a uniformly random subset of M patches."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValidationError("mask ratio must lie in (0, 1)", field="mask_ratio")
    m = mask_count(patches.count, mask_ratio)
    if not 0 < m < patches.count:
        raise ValidationError(f"{patches.count} patch(es) cannot be split into masked and visible",
                              field="patch_count")
    rng = np.random.default_rng(seed)
    masked = np.zeros(patches.count, dtype=bool)
    masked[rng.choice(patches.count, m, replace=False)] = True
    return PatchMask(patches=patches, masked=masked, mask_ratio=mask_ratio, seed=seed)


def split_points(mask: PatchMask, n_points: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Point ids removed by the mask and point ids left visible.

    A point leaves the input only when every patch containing it is masked;
    points in no patch stay visible.
    """
    members = mask.patches.members
    kept = np.unique(members[~mask.masked])
    removed = np.setdiff1d(np.unique(members[mask.masked]), kept, assume_unique=True)
    visible = np.setdiff1d(np.arange(n_points), removed, assume_unique=True)
    return removed, visible


def feature_reconstruction_loss(pred_normals: np.ndarray, gt_normals: np.ndarray,
                                pred_variation: np.ndarray, gt_variation: np.ndarray) -> float:
    """Mean squared normal error plus mean absolute surface-variation error."""
    pred_normals = np.asarray(pred_normals, dtype=np.float64)
    gt_normals = np.asarray(gt_normals, dtype=np.float64)
    pred_variation = np.asarray(pred_variation, dtype=np.float64).reshape(-1)
    gt_variation = np.asarray(gt_variation, dtype=np.float64).reshape(-1)
    if pred_normals.shape != gt_normals.shape or pred_variation.shape != gt_variation.shape:
        raise ValidationError("predicted and target features differ in shape", field="pred")
    if len(pred_normals) != len(pred_variation):
        raise ValidationError("normals and variations disagree on N", field="pred")
    normal_term = np.mean(np.sum((pred_normals - gt_normals) ** 2, axis=1))
    return float(normal_term + np.mean(np.abs(pred_variation - gt_variation)))
