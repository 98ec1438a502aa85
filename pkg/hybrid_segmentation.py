"""
Entropy-weighted feature fusion, mean-shift clustering and segment assembly.

Features F_l (N x m_l) are weighted by w_l proportional to 1 / H(F_l), with
sum w_l^2 = 1, concatenated and clustered with Gaussian mean-shift. Each
cluster becomes a segment with a voted or best-fitting primitive type.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from cloud_io import read_json, read_labels, write_json, write_labels
from error_handlers import DegenerateInputError, NumericalError, ValidationError
from logger_config import get_logger
from neighbor_index import NeighborIndex
from point_cloud import PointCloud
from primitive_fitting import fit_best_type, fit_primitive
from primitives import FITTABLE_TYPES, PrimitiveParams, TypeLabel, from_dict

logger = get_logger(__name__)

DENSITY_FLOOR = 1e-300
ENTROPY_SHIFT_THRESHOLD = 0.1
ENTROPY_SAMPLE = 4096
MEDIAN_SAMPLE = 2000
MEAN_SHIFT_FULL_LIMIT = 4096
MEAN_SHIFT_SUBSAMPLE = 2048
KERNEL_CHUNK_ELEMENTS = 1 << 22
CONSTANT_RTOL = 1e-8
ADJACENCY_K = 10


@dataclass
class Feature:
    """One per-point feature matrix with its kernel bandwidth."""
    name: str
    values: np.ndarray
    sigma: Optional[float] = None
    per_column: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[1] < 1:
            raise ValidationError(f"feature '{self.name}' must be an N x m matrix", field="features")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"feature '{self.name}' has non-finite entries", field="features")
        self.values = values
        if self.sigma is None:
            self.sigma = default_sigma(values)
        elif not self.sigma > 0:
            raise ValidationError(f"sigma of feature '{self.name}' must be > 0", field="sigma")

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureSet:
    features: List[Feature] = field(default_factory=list)

    def __post_init__(self):
        sizes = {f.values.shape[0] for f in self.features}
        if len(sizes) > 1:
            raise ValidationError(f"features disagree on N: {sorted(sizes)}", field="features")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n_points(self) -> int:
        return self.features[0].values.shape[0] if self.features else 0

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    def expanded(self) -> "FeatureSet":
        """Split per-column features into one feature per column and drop constant columns.

        A column counts as constant when its range is below 1e-8 of its largest magnitude.
        """
        out = []
        for f in self.features:
            scale = np.maximum(np.abs(f.values).max(axis=0), 1e-300)
            varying = np.ptp(f.values, axis=0) > CONSTANT_RTOL * scale
            if f.per_column:
                out.extend(Feature(f"{f.name}[{j}]", f.values[:, j]) for j in np.nonzero(varying)[0])
            elif varying.any():
                sigma = f.sigma if varying.all() else None
                out.append(Feature(f.name, f.values[:, varying], sigma=sigma))
        return FeatureSet(out)


@dataclass
class SegmentRecord:
    type: TypeLabel
    params: Optional[PrimitiveParams]
    count: int
    residual: float = float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type.value,
                "params": None if self.params is None else self.params.to_dict(),
                "count": self.count, "residual": self.residual}


@dataclass
class Segmentation:
    """Labels in [0, K) and one nonempty record per segment."""
    labels: np.ndarray
    segments: List[SegmentRecord]
    weights: Dict[str, float] = field(default_factory=dict)
    bandwidth: float = float("nan")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def to_dict(self) -> Dict[str, Any]:
        return {"segments": [s.to_dict() for s in self.segments],
                "weights": self.weights, "bandwidth": self.bandwidth}

    def write(self, out_dir: Union[str, Path], stem: str = "segmentation") -> Tuple[Path, Path]:
        """Labels file (one per line) and its JSON sidecar."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        labels_path = write_labels(out_dir / f"{stem}.labels", self.labels)
        json_path = write_json(out_dir / f"{stem}.json", self.to_dict())
        return labels_path, json_path


def read_segmentation(labels_path: Union[str, Path]) -> Segmentation:
    """Labels file plus the JSON sidecar of the same stem written by Segmentation.write."""
    labels_path = Path(labels_path)
    sidecar = labels_path.with_suffix(".json")
    if not sidecar.is_file():
        raise ValidationError(f"segment sidecar not found: {sidecar}", field="pred")
    labels = read_labels(labels_path)
    payload = read_json(sidecar)
    segments = []
    for record in payload.get("segments", []):
        params = record.get("params")
        segments.append(SegmentRecord(type=TypeLabel.parse(record.get("type", "other")),
                                      params=None if params is None else from_dict(params),
                                      count=int(record.get("count", 0)),
                                      residual=float(record.get("residual", float("nan")))))
    if labels.min() < 0 or labels.max() >= len(segments):
        raise ValidationError(f"labels must lie in [0, {len(segments)})", field="pred")
    return Segmentation(labels=labels, segments=segments, weights=payload.get("weights", {}),
                        bandwidth=float(payload.get("bandwidth", float("nan"))))


# ---------------------------------------------------------------- weighting

def _sample_rows(n: int, size: int, seed: int = 0) -> np.ndarray:
    if n <= size:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size, replace=False))


def median_nonzero_distance(values: np.ndarray, sample: int = MEDIAN_SAMPLE, seed: int = 0) -> float:
    """Median of the nonzero pairwise row distances over a row sample; 0 if all rows coincide."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    rows = values[_sample_rows(len(values), sample, seed)]
    if len(rows) < 2:
        return 0.0
    d = pdist(rows)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 0.0


def default_sigma(values: np.ndarray) -> float:
    """Kernel bandwidth of a feature: median nonzero row distance, 1.0 for a constant feature."""
    sigma = median_nonzero_distance(values)
    return sigma if sigma > 0 else 1.0


def _log_density(values: np.ndarray, rows: np.ndarray, sigma: float) -> np.ndarray:
    n, m = values.shape
    norm = -0.5 * m * np.log(2.0 * np.pi) - m * np.log(sigma) - np.log(n)
    out = np.empty(len(rows))
    step = max(1, KERNEL_CHUNK_ELEMENTS // n)
    for s in range(0, len(rows), step):
        d2 = cdist(values[rows[s:s + step]], values, "sqeuclidean")
        out[s:s + step] = logsumexp(-d2 / (2.0 * sigma * sigma), axis=1) + norm
    return out


def feature_entropy(values: np.ndarray, sigma: float, seed: int = 0) -> float:
    """
    Entropy score H = -sum_i P(F_i) log P(F_i) of a Gaussian kernel density.

    P(x) = (1/N) sum_j (2 pi)^(-m/2) sigma^(-m) exp(-|x - F_j|^2 / 2 sigma^2),
    clamped below at 1e-300. Above 4096 rows the sum runs over a row
    sample and is scaled back to N terms.

    Args:
        values: N x m feature matrix, N >= 2
        sigma: Kernel bandwidth > 0
        seed: Seed of the row sample for large N
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    if n < 2:
        raise ValidationError("entropy needs at least 2 rows", field="features")
    if not sigma > 0:
        raise ValidationError("sigma must be > 0", field="sigma")
    rows = _sample_rows(n, ENTROPY_SAMPLE, seed)
    log_p = np.maximum(_log_density(values, rows, sigma), np.log(DENSITY_FLOOR))
    with np.errstate(over="ignore", invalid="ignore"):
        h = -float(np.sum(np.exp(log_p) * log_p)) * (n / len(rows))
    return h


def weights_from_entropies(entropies: Sequence[float]) -> np.ndarray:
    """w_l proportional to 1 / H_l with unit Euclidean norm; entropies shifted when any is <= 0.1."""
    h = np.asarray(entropies, dtype=np.float64)
    if h.size == 0:
        raise ValidationError("no features to weight", field="features")
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite feature entropy", solver="entropy")
    if h.min() <= ENTROPY_SHIFT_THRESHOLD:
        h = h + (1.0 - h.min())
    inv = 1.0 / h
    return inv / np.sqrt(np.sum(inv * inv))


def adaptive_weights(features: FeatureSet) -> np.ndarray:
    entropies = [feature_entropy(f.values, f.sigma) for f in features.features]
    weights = weights_from_entropies(entropies)
    logger.debug("Adaptive weights", entropies=entropies, weights=weights.tolist())
    return weights


# ---------------------------------------------------------------- mean-shift

def _shift(positions: np.ndarray, reference: np.ndarray, bandwidth: float) -> np.ndarray:
    out = np.empty_like(positions)
    step = max(1, KERNEL_CHUNK_ELEMENTS // len(reference))
    for s in range(0, len(positions), step):
        d2 = cdist(positions[s:s + step], reference, "sqeuclidean")
        # shift by the row minimum so the nearest reference keeps weight 1
        w = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (2.0 * bandwidth * bandwidth))
        out[s:s + step] = (w @ reference) / w.sum(axis=1, keepdims=True)
    return out


def _merge_modes(modes: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy merge in index order; each cluster keeps the mode of its first member."""
    centers: List[np.ndarray] = []
    labels = np.empty(len(modes), dtype=np.int64)
    for i, mode in enumerate(modes):
        if centers:
            d = np.sqrt(np.sum((np.asarray(centers) - mode) ** 2, axis=1))
            j = int(np.argmin(d))
            if d[j] <= radius:
                labels[i] = j
                continue
        labels[i] = len(centers)
        centers.append(mode)
    return np.asarray(centers), labels


def mean_shift(points: np.ndarray, bandwidth: float, max_iter: int = 300, tol: float = 1e-6,
               seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gaussian mean-shift from every point.

    A trajectory stops when its step is shorter than ``tol`` (the position
    before that step is kept) or after ``max_iter`` steps. Converged modes
    within bandwidth / 2 of an earlier cluster join it. Above 4096 points the
    kernel runs over a 2048-row sample, trajectories start from that sample
    and every point takes the nearest merged mode.

    Returns:
        (modes K x D, labels N) with labels numbered by lowest member index
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if not bandwidth > 0:
        raise ValidationError("bandwidth must be > 0", field="bandwidth")
    n = len(points)
    if n == 0:
        raise ValidationError("mean-shift needs at least one point", field="points")

    subsampled = n > MEAN_SHIFT_FULL_LIMIT
    seeds = _sample_rows(n, MEAN_SHIFT_SUBSAMPLE, seed) if subsampled else np.arange(n)
    reference = points[seeds]
    x = reference.copy()
    active = np.arange(len(x))
    iterations = 0
    while active.size and iterations < max_iter:
        moved = _shift(x[active], reference, bandwidth)
        step = np.sqrt(np.sum((moved - x[active]) ** 2, axis=1))
        going = step >= tol
        x[active[going]] = moved[going]
        active = active[going]
        iterations += 1

    modes, seed_labels = _merge_modes(x, 0.5 * bandwidth)
    if subsampled:
        labels = np.empty(n, dtype=np.int64)
        step = max(1, KERNEL_CHUNK_ELEMENTS // len(modes))
        for s in range(0, n, step):
            labels[s:s + step] = np.argmin(cdist(points[s:s + step], modes, "sqeuclidean"), axis=1)
    else:
        labels = seed_labels

    modes, labels = _relabel_by_first_member(modes, labels)
    logger.debug("Mean-shift finished", n_points=n, clusters=len(modes), iterations=iterations,
                 unconverged=int(active.size))
    return modes, labels


def _relabel_by_first_member(modes: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    used, first = np.unique(labels, return_index=True)
    order = used[np.argsort(first, kind="stable")]
    remap = np.full(len(modes), -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return modes[order], remap[labels]


# ---------------------------------------------------------------- segmentation

def descriptor_features(descriptors: Dict[str, np.ndarray], block_mode: bool = False) -> FeatureSet:
    """Features from named descriptor matrices; each column weighted on its own unless block_mode."""
    return FeatureSet([Feature(name, values, per_column=not block_mode)
                       for name, values in descriptors.items()])


def _merge_small(modes: np.ndarray, labels: np.ndarray, min_size: int,
                 neighbors: Optional[np.ndarray] = None) -> np.ndarray:
    """Fold clusters below min_size, smallest first, into the nearest spatially adjacent cluster by mode.

    Without an adjacent cluster (or without ``neighbors``) the nearest mode overall is used.
    """
    labels = labels.copy()
    alive = list(np.unique(labels))
    while len(alive) > 1:
        counts = {c: int(np.sum(labels == c)) for c in alive}
        small = [c for c in alive if counts[c] < min_size]
        if not small:
            break
        c = min(small, key=lambda x: (counts[x], x))
        others = [o for o in alive if o != c]
        if neighbors is not None:
            touching = set(np.unique(labels[neighbors[labels == c]]).tolist())
            others = [o for o in others if o in touching] or others
        d = np.sqrt(np.sum((modes[others] - modes[c]) ** 2, axis=1))
        target = others[int(np.argmin(d))]
        labels[labels == c] = target
        alive.remove(c)
    return labels


def _segment_type(ids: np.ndarray, per_point_types: Optional[Sequence[TypeLabel]]) -> Optional[TypeLabel]:
    if per_point_types is None:
        return None
    votes = np.bincount([per_point_types[i].code for i in ids], minlength=len(TypeLabel))
    return list(TypeLabel)[int(np.argmax(votes))]


def _fit_segment(cloud: PointCloud, ids: np.ndarray, kind: Optional[TypeLabel],
                 types: Sequence[TypeLabel]) -> SegmentRecord:
    try:
        if kind is None:
            fit = fit_best_type(cloud, ids, types)
        elif kind is TypeLabel.OTHER:
            return SegmentRecord(TypeLabel.OTHER, None, int(ids.size))
        else:
            fit = fit_primitive(cloud, ids, kind)
    except DegenerateInputError:
        return SegmentRecord(kind or TypeLabel.OTHER, None, int(ids.size))
    return SegmentRecord(fit.primitive.type, fit.primitive, int(ids.size), fit.residual)


def _neighbor_table(index: NeighborIndex, positions: np.ndarray) -> np.ndarray:
    nbr, _ = index.knn_many(positions, min(ADJACENCY_K + 1, len(positions)))
    return nbr


def _adjacent_pairs(nbr: np.ndarray, labels: np.ndarray) -> List[Tuple[int, int]]:
    a = np.repeat(labels, nbr.shape[1])
    b = labels[nbr.ravel()]
    cross = a != b
    pairs = np.unique(np.sort(np.column_stack([a[cross], b[cross]]), axis=1), axis=0)
    return [tuple(p) for p in pairs.tolist()]


def _merge_consistent(cloud: PointCloud, labels: np.ndarray, records: Dict[int, SegmentRecord],
                      merge_tol: float, nbr: np.ndarray) -> np.ndarray:
    """Merge adjacent same-type segments whose joint fit stays under merge_tol."""
    labels = labels.copy()
    changed = True
    while changed:
        changed = False
        for a, b in _adjacent_pairs(nbr, labels):
            ra, rb = records[a], records[b]
            if ra.params is None or rb.params is None or ra.type is not rb.type:
                continue
            ids = np.nonzero((labels == a) | (labels == b))[0]
            try:
                fit = fit_primitive(cloud, ids, ra.type)
            except DegenerateInputError:
                continue
            if fit.residual < merge_tol:
                labels[labels == b] = a
                records[a] = SegmentRecord(ra.type, fit.primitive, int(ids.size), fit.residual)
                del records[b]
                logger.debug("Merged consistent segments", kept=int(a), merged=int(b),
                             residual=fit.residual)
                changed = True
                break
    return labels


def segment(cloud: PointCloud, features: FeatureSet,
            per_point_types: Optional[Sequence[Union[TypeLabel, str]]] = None,
            bandwidth: Optional[float] = None, bandwidth_scale: float = 0.3,
            max_iter: int = 300, tol: float = 1e-6, min_size: int = 20,
            merge_tol: Optional[float] = 0.01,
            types: Iterable[TypeLabel] = FITTABLE_TYPES, seed: int = 0,
            index: Optional[NeighborIndex] = None) -> Segmentation:
    """
    Cluster the weighted feature rows into primitive segments.

    Args:
        cloud: Points (normals seed cylinder/cone fits when present)
        features: Per-point features; per-column features are weighted column by column
        per_point_types: Type per point for the majority vote; None fits every allowed type
        bandwidth: Mean-shift bandwidth; default bandwidth_scale x median nonzero row distance
        min_size: Clusters below this many points join the nearest adjacent cluster by mode distance
        merge_tol: Residual bound for merging adjacent same-type segments; None disables
        types: Candidate types when per_point_types is None
        seed: Seed of the row samples

    Returns:
        Segmentation with labels numbered by lowest member index
    """
    if len(features) == 0:
        raise ValidationError("empty feature set", field="features")
    n = len(cloud)
    if features.n_points != n:
        raise ValidationError(f"features have {features.n_points} rows for {n} points", field="features")
    if per_point_types is not None:
        if len(per_point_types) != n:
            raise ValidationError("one type per point is required", field="per_point_types")
        per_point_types = [TypeLabel.parse(t) for t in per_point_types]
    types = [TypeLabel.parse(t) for t in types]

    active = features.expanded()
    if len(active) == 0:
        modes, labels = np.zeros((1, 1)), np.zeros(n, dtype=np.int64)
        weights, bw = {}, float("nan")
    else:
        # entropies use each feature's own bandwidth; the rows are in units of it
        w = adaptive_weights(active)
        weights = dict(zip(active.names, w.tolist()))
        rows = np.hstack([wl * f.values / f.sigma for wl, f in zip(w, active.features)])
        bw = bandwidth if bandwidth is not None else bandwidth_scale * median_nonzero_distance(rows, seed=seed)
        if not bw > 0:
            bw = 1.0
        modes, labels = mean_shift(rows, bw, max_iter=max_iter, tol=tol, seed=seed)

    index = index or NeighborIndex(cloud.positions, clamp=True)
    nbr = _neighbor_table(index, cloud.positions)
    labels = _merge_small(modes, labels, min_size, nbr)
    records = {}
    for c in np.unique(labels):
        ids = np.nonzero(labels == c)[0]
        records[int(c)] = _fit_segment(cloud, ids, _segment_type(ids, per_point_types), types)

    if merge_tol is not None and len(records) > 1:
        labels = _merge_consistent(cloud, labels, records, merge_tol, nbr)

    used, first = np.unique(labels, return_index=True)
    order = used[np.argsort(first, kind="stable")]
    remap = {int(c): i for i, c in enumerate(order)}
    final = np.array([remap[int(c)] for c in labels], dtype=np.int64)
    segments = [records[int(c)] for c in order]

    logger.info("Segmented cloud", n_points=n, segments=len(segments), bandwidth=bw,
                types=[s.type.value for s in segments])
    return Segmentation(labels=final, segments=segments, weights=weights, bandwidth=float(bw))


# ---------------------------------------------------------------- descriptor quality

def pullpush_quality(descriptors: np.ndarray, gt_labels: np.ndarray, delta1: float = 0.5,
                     delta2: float = 1.5) -> Tuple[float, float]:
    """
    Hinge diagnostics of a descriptor embedding against ground-truth segments.

    L_pull = (1/K) sum_k mean_{i in k} max(|d_i - mu_k| - delta1, 0)
    L_push = mean over ordered pairs k != k' of max(delta2 - |mu_k - mu_k'|, 0), 0 when K = 1
    """
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim == 1:
        d = d[:, None]
    labels = np.asarray(gt_labels)
    if len(labels) != len(d):
        raise ValidationError("one label per descriptor row is required", field="gt_labels")
    segments = np.unique(labels)
    if segments.size == 0:
        raise ValidationError("no ground-truth segments", field="gt_labels")

    means = np.vstack([d[labels == k].mean(axis=0) for k in segments])
    pull = np.mean([np.mean(np.maximum(np.linalg.norm(d[labels == k] - means[j], axis=1) - delta1, 0.0))
                    for j, k in enumerate(segments)])
    if len(segments) == 1:
        return float(pull), 0.0
    gaps = cdist(means, means)
    off = ~np.eye(len(segments), dtype=bool)
    push = np.mean(np.maximum(delta2 - gaps[off], 0.0))
    return float(pull), float(push)
