"""
Implicit-field targets for point clouds: unsigned distances at query points,
query sampling, center-crop augmentation and the reconstruction losses.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import expit

from cloud_io import export_csv, write_fmat, write_json
from error_handlers import DegenerateInputError, ValidationError
from logger_config import get_logger
from neighbor_index import NeighborIndex
from point_cloud import PointCloud, cloud_diameter, subset

logger = get_logger(__name__)

BOX_INFLATION = 1.05
CROP_TOLERANCE = 0.01
CROP_MIN_POINTS = 16
PROB_CLAMP = 1e-7
EMD_MAX_POINTS = 4096


@dataclass(frozen=True)
class QueryMix:
    """Fractions of uniform-box and near-surface queries; near-surface offsets are N(0, sigma^2)."""
    uniform: float = 0.5
    near: float = 0.5
    sigma: float = 0.01

    def __post_init__(self):
        if self.uniform < 0 or self.near < 0 or abs(self.uniform + self.near - 1.0) > 1e-9:
            raise ValidationError("query mix fractions must be >= 0 and sum to 1", field="mix")
        if not self.sigma > 0:
            raise ValidationError("near-surface sigma must be > 0", field="query_sigma")

    def split(self, count: int) -> Tuple[int, int]:
        n_uniform = int(round(count * self.uniform))
        return n_uniform, count - n_uniform

    def to_dict(self) -> Dict[str, float]:
        return {"uniform": self.uniform, "near": self.near, "sigma": self.sigma}


@dataclass
class ImplicitSamples:
    queries: np.ndarray
    udf: np.ndarray
    occupancy: Optional[np.ndarray] = None
    sdf: Optional[np.ndarray] = None
    occupancy_is_proxy: bool = False
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.queries.shape[0]

    def write(self, out_dir: Union[str, Path], csv: bool = True) -> Dict[str, Path]:
        """FMAT pairs (queries Q x 3, values Q x 1), optional CSV and the JSON manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"queries": write_fmat(out_dir / "queries.fmat", self.queries),
                 "udf": write_fmat(out_dir / "udf.fmat", self.udf)}
        columns = {"q": self.queries, "udf": self.udf}
        if self.occupancy is not None:
            paths["occupancy"] = write_fmat(out_dir / "occupancy.fmat", self.occupancy.astype(np.float64))
            columns["occupancy"] = self.occupancy.astype(np.int64)
        if self.sdf is not None:
            paths["sdf"] = write_fmat(out_dir / "sdf.fmat", self.sdf)
            columns["sdf"] = self.sdf
        if csv:
            paths["csv"] = export_csv(out_dir / "samples.csv", columns)
        paths["manifest"] = write_json(out_dir / "samples.json",
                                       {**self.meta, "occupancy_proxy": self.occupancy_is_proxy})
        return paths


def sample_udf(cloud: PointCloud, index: NeighborIndex, queries: np.ndarray) -> ImplicitSamples:
    """Unsigned distance from each query to its exact nearest cloud point."""
    if len(cloud) == 0:
        raise ValidationError("cloud is empty", field="input")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != 3:
        raise ValidationError("queries must be Q x 3", field="queries")
    _, d = index.knn_many(queries, 1)
    return ImplicitSamples(queries=queries, udf=d[:, 0].copy())


def bounding_box(positions: np.ndarray, inflation: float = BOX_INFLATION) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box scaled about its center by ``inflation``."""
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * inflation
    return center - half, center + half


def make_query_set(cloud: PointCloud, count: int, mix: Optional[QueryMix] = None,
                   seed: int = 0) -> np.ndarray:
    """
    Query points: uniform samples in the 5%-inflated bounding box, then
    cloud points displaced by Gaussian offsets.

    Args:
        cloud: Source cloud
        count: Total queries (> 0)
        mix: Uniform / near-surface fractions and offset sigma
        seed: Seed of the generator; equal seeds give identical sets
    """
    if count < 1:
        raise ValidationError("query count must be > 0", field="query_count")
    mix = mix or QueryMix()
    rng = np.random.default_rng(seed)
    n_uniform, n_near = mix.split(count)
    lo, hi = bounding_box(cloud.positions)
    uniform = rng.uniform(lo, hi, size=(n_uniform, 3))
    anchors = rng.integers(0, len(cloud), size=n_near)
    near = cloud.positions[anchors] + rng.normal(0.0, mix.sigma, size=(n_near, 3))
    return np.vstack([uniform, near])


def crop_scene(cloud: PointCloud, ratio: float, seed: int = 0) -> PointCloud:
    """
    Remove about ``ratio`` of the points with an axis-aligned box around a seeded random center.

    The box keeps the cloud's aspect ratio and is shrunk until the removed
    fraction is within 1% of ``ratio``. Surviving points are kept unchanged.
    """
    if not 0.0 <= ratio <= 0.5:
        raise ValidationError("crop ratio must lie in [0, 0.5]", field="crop_ratio")
    n = len(cloud)
    target = int(round(ratio * n))
    if n - target < CROP_MIN_POINTS:
        raise ValidationError(f"cropping {ratio:.2f} would leave fewer than {CROP_MIN_POINTS} points",
                              field="crop_ratio")
    if target == 0:
        return cloud

    rng = np.random.default_rng(seed)
    center = cloud.positions[rng.integers(0, n)]
    extent = np.ptp(cloud.positions, axis=0)
    extent = np.where(extent > 0, extent, 1.0)
    box = np.max(np.abs(cloud.positions - center) / extent, axis=1)
    half = np.sort(box)[target - 1]
    removed = box <= half
    fraction = removed.sum() / n
    if abs(fraction - ratio) > CROP_TOLERANCE:
        raise DegenerateInputError("no crop box removes the requested fraction",
                                   details={"ratio": ratio, "achieved": float(fraction)})
    logger.debug("Cropped scene", n_points=n, removed=int(removed.sum()), box_half=float(half))
    return subset(cloud, np.nonzero(~removed)[0])


def occupancy_proxy(udf: np.ndarray, tau: float) -> np.ndarray:
    """Inside/near indicator udf < tau standing in for true occupancy."""
    return np.asarray(udf) < tau


def make_scene_sample(cloud: PointCloud, count: int, mix: Optional[QueryMix] = None,
                      crop_ratio: float = 0.0, seed: int = 0,
                      occupancy_tau: Optional[float] = None,
                      index: Optional[NeighborIndex] = None) -> Tuple[PointCloud, ImplicitSamples]:
    """
    Cropped input plus query samples labelled against the full cloud.

    Args:
        cloud: Complete scene
        count: Query count
        mix: Query mix
        crop_ratio: Fraction removed from the input copy
        seed: Seeds both the crop and the queries
        occupancy_tau: When set, adds the proxy occupancy udf < tau x diameter

    Returns:
        (cropped cloud, samples)
    """
    mix = mix or QueryMix()
    partial = crop_scene(cloud, crop_ratio, seed)
    index = index or NeighborIndex(cloud.positions, clamp=True)
    queries = make_query_set(cloud, count, mix, seed)
    samples = sample_udf(cloud, index, queries)
    if occupancy_tau is not None:
        tau = occupancy_tau * cloud_diameter(cloud.positions)
        samples.occupancy = occupancy_proxy(samples.udf, tau)
        samples.occupancy_is_proxy = True
    n_uniform, n_near = mix.split(count)
    samples.meta = {"seed": seed, "mix": mix.to_dict(), "crop_ratio": crop_ratio,
                    "counts": {"uniform": n_uniform, "near": n_near, "input_points": len(partial),
                               "target_points": len(cloud)}}
    logger.info("Scene sample", n_points=len(cloud), queries=count, kept=len(partial))
    return partial, samples


# ---------------------------------------------------------------- losses

def _paired(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValidationError(f"length mismatch: {pred.size} predictions, {gt.size} targets", field="pred")
    if pred.size == 0:
        raise ValidationError("no samples", field="pred")
    return pred, gt


def loss_sdf(pred, gt) -> float:
    pred, gt = _paired(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def loss_udf(pred, gt) -> float:
    """Mean | |pred| - gt |."""
    pred, gt = _paired(pred, gt)
    return float(np.mean(np.abs(np.abs(pred) - gt)))


def loss_occ(pred_logits, gt) -> float:
    """Mean binary cross-entropy of sigmoid(logits), probabilities clamped to [1e-7, 1 - 1e-7]."""
    logits, target = _paired(pred_logits, np.asarray(gt, dtype=np.float64))
    p = np.clip(expit(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))))


def _point_set(points, name: str) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0 or points.shape[1] != 3:
        raise ValidationError(f"{name} must be a nonempty K x 3 set", field=name)
    return points


def chamfer(a, b, reduction: str = "sum") -> float:
    """
    Chamfer distance: nearest-neighbor distances summed in both directions.

    reduction 'mean' averages each direction before adding the two.
    """
    a, b = _point_set(a, "a"), _point_set(b, "b")
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"unknown reduction '{reduction}'", field="reduction")
    _, d_ab = NeighborIndex(b, clamp=True).knn_many(a, 1)
    _, d_ba = NeighborIndex(a, clamp=True).knn_many(b, 1)
    if reduction == "mean":
        return float(d_ab.mean() + d_ba.mean())
    return float(d_ab.sum() + d_ba.sum())


def emd(a, b) -> float:
    """Total Euclidean cost of the optimal one-to-one matching (Hungarian algorithm)."""
    a, b = _point_set(a, "a"), _point_set(b, "b")
    if len(a) != len(b):
        raise ValidationError(f"EMD needs equal sizes, got {len(a)} and {len(b)}", field="b")
    if len(a) > EMD_MAX_POINTS:
        raise ValidationError(f"EMD is limited to {EMD_MAX_POINTS} points", field="a")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())
