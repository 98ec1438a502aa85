"""
Local PCA features: covariance, oriented normals and surface variation.

The covariance at p is the mean of (p - x)(p - x)^T over the neighbors x of p,
p itself included. Normals are the eigenvector of the smallest eigenvalue;
their signs are made consistent by walking a Euclidean minimum spanning tree
of the k-NN graph from the lowest-index point of each component.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree

from error_handlers import InsufficientNeighborhoodError, ValidationError
from logger_config import get_logger
from neighbor_index import NeighborIndex
from point_cloud import PointCloud

logger = get_logger(__name__)

MAX_VARIATION = 1.0 / 3.0
MIN_NEIGHBORS = 3
PAIRS_PER_CHUNK = 1 << 20


@dataclass(frozen=True)
class Neighborhood:
    """
    How neighbors are gathered around each point.

    mode 'radius'   closed ball of ``radius``; if ``k`` is set, points whose
                    ball holds fewer than 3 points use their k nearest instead
    mode 'knn'      the ``k`` nearest points (the point itself included)
    mode 'adaptive' ball whose radius is the mean distance of the k nearest
    """
    mode: str = "radius"
    radius: Optional[float] = None
    k: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("radius", "knn", "adaptive"):
            raise ValidationError(f"unknown neighborhood mode '{self.mode}'", field="neighborhood")
        if self.mode == "radius" and not (self.radius and self.radius > 0):
            raise ValidationError("radius neighborhood needs radius > 0", field="radius")
        if self.mode in ("knn", "adaptive") and not (self.k and self.k >= 1):
            raise ValidationError(f"{self.mode} neighborhood needs k >= 1", field="k")

    @classmethod
    def ball(cls, radius: float, fallback_k: Optional[int] = None) -> "Neighborhood":
        return cls(mode="radius", radius=radius, k=fallback_k)

    @classmethod
    def nearest(cls, k: int) -> "Neighborhood":
        return cls(mode="knn", k=k)

    @classmethod
    def adaptive(cls, k: int) -> "Neighborhood":
        return cls(mode="adaptive", k=k)

    def describe(self) -> Dict[str, object]:
        return {"mode": self.mode, "radius": self.radius, "k": self.k}


@dataclass(frozen=True)
class LocalCovariance:
    """Covariance of one neighborhood with its ascending eigen-decomposition."""
    center: np.ndarray
    radius: float
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n_neighbors: int

    @property
    def is_degenerate(self) -> bool:
        return float(np.sum(np.clip(self.eigenvalues, 0.0, None))) <= 0.0


@dataclass(frozen=True)
class FeatureField:
    """Per-point unit normals and surface variations in [0, 1/3]."""
    normals: np.ndarray
    variations: np.ndarray
    degenerate: np.ndarray
    neighborhood: Neighborhood

    def __len__(self) -> int:
        return self.normals.shape[0]


def gather_neighbors(index: NeighborIndex, queries: np.ndarray,
                     neighborhood: Neighborhood) -> List[np.ndarray]:
    """Neighbor id arrays for each query under ``neighborhood``."""
    if neighborhood.mode == "knn":
        ids, _ = index.knn_many(queries, neighborhood.k)
        return list(ids)

    if neighborhood.mode == "adaptive":
        _, d = index.knn_many(queries, neighborhood.k)
        radii = d.mean(axis=1)
        return [ids for ids, _ in index.radius_many(queries, radii)]

    lists = [ids for ids, _ in index.radius_many(queries, neighborhood.radius)]
    if neighborhood.k:
        short = [i for i, ids in enumerate(lists) if ids.size < MIN_NEIGHBORS]
        if short:
            ids, _ = index.knn_many(queries[short], neighborhood.k)
            for row, i in enumerate(short):
                lists[i] = ids[row]
            logger.debug("Radius neighborhoods fell back to k-NN", count=len(short))
    return lists


def _covariances(positions: np.ndarray, centers: np.ndarray,
                 neighbor_lists: List[np.ndarray]) -> np.ndarray:
    counts = np.array([ids.size for ids in neighbor_lists], dtype=np.int64)
    flat = np.concatenate(neighbor_lists) if neighbor_lists else np.empty(0, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    diffs = positions[flat] - np.repeat(centers, counts, axis=0)
    outer = diffs[:, :, None] * diffs[:, None, :]
    cov = np.add.reduceat(outer, starts, axis=0) / counts[:, None, None]
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def _variations(eigenvalues: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lam = np.clip(eigenvalues, 0.0, None)
    total = lam.sum(axis=-1)
    degenerate = total <= 0.0
    safe = np.where(degenerate, 1.0, total)
    var = np.where(degenerate, 0.0, lam[..., 0] / safe)
    return np.clip(var, 0.0, MAX_VARIATION), degenerate


def local_covariance(cloud: PointCloud, index: NeighborIndex, point_id: int,
                     neighborhood: Neighborhood) -> LocalCovariance:
    """
    Covariance of the neighborhood around one cloud point.

    Args:
        cloud: Source cloud
        index: Index over the cloud's positions
        point_id: Center point
        neighborhood: Radius / k-NN / adaptive neighborhood

    Returns:
        LocalCovariance with eigenvalues ascending
    """
    if not 0 <= point_id < len(cloud):
        raise ValidationError(f"point id {point_id} out of range", field="point_id")
    center = cloud.positions[point_id]
    ids = gather_neighbors(index, center[None, :], neighborhood)[0]
    if ids.size < MIN_NEIGHBORS:
        raise InsufficientNeighborhoodError(point_id, ids.size)
    cov = _covariances(cloud.positions, center[None, :], [ids])[0]
    w, v = np.linalg.eigh(cov)
    extent = float(np.sqrt(np.sum((cloud.positions[ids] - center) ** 2, axis=1)).max())
    return LocalCovariance(center=center.copy(), radius=extent, matrix=cov,
                           eigenvalues=w, eigenvectors=v, n_neighbors=int(ids.size))


def surface_variation(cov: LocalCovariance) -> float:
    """lambda1 / (lambda1 + lambda2 + lambda3), clamped to [0, 1/3]; 0 for an all-zero covariance."""
    var, _ = _variations(np.asarray(cov.eigenvalues)[None, :])
    return float(var[0])


def _pca_chunk(positions: np.ndarray, ids: np.ndarray,
               lists: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    cov = _covariances(positions, positions[ids], lists)
    w, v = np.linalg.eigh(cov)
    var, degenerate = _variations(w)
    return v[:, :, 0], var, degenerate


def _chunks(counts: np.ndarray) -> List[Tuple[int, int]]:
    bounds, start, acc = [], 0, 0
    for i, c in enumerate(counts):
        acc += int(c)
        if acc >= PAIRS_PER_CHUNK:
            bounds.append((start, i + 1))
            start, acc = i + 1, 0
    if start < len(counts):
        bounds.append((start, len(counts)))
    return bounds


def _root_sign(normal: np.ndarray) -> float:
    for axis in (2, 1, 0):
        if normal[axis] > 0:
            return 1.0
        if normal[axis] < 0:
            return -1.0
    return 1.0


def orient_normals(positions: np.ndarray, normals: np.ndarray, index: NeighborIndex,
                   orient_k: int = 10) -> np.ndarray:
    """
    Propagate normal signs along a Euclidean MST of the symmetrized k-NN graph.

    Each connected component is rooted at its lowest index, whose normal is
    turned toward +z (then +y, then +x when a component is zero).
    """
    n = positions.shape[0]
    normals = np.array(normals, dtype=np.float64, copy=True)
    if n == 1:
        normals[0] *= _root_sign(normals[0])
        return normals

    k = min(orient_k + 1, n)
    ids, d = index.knn_many(positions, k)
    rows = np.repeat(np.arange(n), k)
    cols = ids.ravel()
    weights = np.maximum(d.ravel(), 1e-300)
    keep = rows != cols
    graph = csr_matrix((weights[keep], (rows[keep], cols[keep])), shape=(n, n))
    graph = graph.maximum(graph.T)

    tree = minimum_spanning_tree(graph)
    tree = tree + tree.T
    n_comp, comp = connected_components(tree, directed=False)
    _, roots = np.unique(comp, return_index=True)

    for root in roots:
        normals[root] *= _root_sign(normals[root])
        order, parents = breadth_first_order(tree, root, directed=False, return_predecessors=True)
        for node in order[1:]:
            if np.dot(normals[node], normals[parents[node]]) < 0:
                normals[node] = -normals[node]

    logger.debug("Oriented normals", n_points=n, components=int(n_comp))
    return normals


def estimate_normals(cloud: PointCloud, index: NeighborIndex, neighborhood: Neighborhood,
                     orient_k: int = 10, workers: int = 1) -> FeatureField:
    """
    Oriented normals and surface variations for every point.

    Args:
        cloud: Source cloud
        index: Index over the cloud's positions
        neighborhood: Neighborhood spec; every point needs at least 3 neighbors
        orient_k: k of the graph whose MST carries the orientation
        workers: Threads for the per-point PCA (output does not depend on it)

    Returns:
        FeatureField
    """
    positions = cloud.positions
    lists = gather_neighbors(index, positions, neighborhood)
    counts = np.array([ids.size for ids in lists], dtype=np.int64)
    short = np.nonzero(counts < MIN_NEIGHBORS)[0]
    if short.size:
        raise InsufficientNeighborhoodError(int(short[0]), int(counts[short[0]]))

    bounds = _chunks(counts)
    tasks = [(np.arange(a, b), lists[a:b]) for a, b in bounds]
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda t: _pca_chunk(positions, *t), tasks))
    else:
        parts = [_pca_chunk(positions, *t) for t in tasks]

    normals = np.concatenate([p[0] for p in parts])
    variations = np.concatenate([p[1] for p in parts])
    degenerate = np.concatenate([p[2] for p in parts])
    normals = orient_normals(positions, normals, index, orient_k)

    if degenerate.any():
        logger.warning("Degenerate neighborhoods", count=int(degenerate.sum()))
    logger.info("Estimated normals", n_points=len(cloud), neighborhood=neighborhood.describe(),
                mean_variation=float(variations.mean()))
    return FeatureField(normals=normals, variations=variations, degenerate=degenerate,
                        neighborhood=neighborhood)


def feature_field(cloud: PointCloud, index: NeighborIndex, k: int = 128,
                  neighborhood: Optional[Neighborhood] = None, orient_k: int = 10,
                  workers: int = 1) -> FeatureField:
    """Normals and variations; by default each ball's radius is the mean distance of its k nearest points."""
    neighborhood = neighborhood or Neighborhood.adaptive(k)
    return estimate_normals(cloud, index, neighborhood, orient_k=orient_k, workers=workers)
