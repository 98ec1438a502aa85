"""
Spatial index over cloud positions.

Answers exact k-nearest and fixed-radius queries. Distances are always
recomputed in float64 from the stored coordinates, and k-NN ties are broken
by ascending point index, so results match an O(N) scan bit for bit.
"""

from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from config import INDEX_BACKEND, KNN_CLAMP, THREADS
from error_handlers import ValidationError
from logger_config import get_logger
from point_cloud import PointCloud

# Try to import faiss, fall back to the KD-tree if not available
try:
    import faiss
    FAISS_AVAILABLE = True
except ImportError:
    FAISS_AVAILABLE = False

logger = get_logger(__name__)

TIE_RTOL = 1e-9
FAISS_EXTRA_CANDIDATES = 8
QUERY_CHUNK_ELEMENTS = 1 << 21


def point_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distances from ``query`` to each row of ``points`` (the canonical formula)."""
    return np.sqrt(np.sum((points - query) ** 2, axis=-1))


class NeighborIndex:
    """Immutable nearest-neighbor index; safe for concurrent queries."""

    def __init__(self, positions: np.ndarray, backend: Optional[str] = None,
                 clamp: Optional[bool] = None, workers: int = THREADS):
        """
        Build the index.

        Args:
            positions: N x 3 coordinates
            backend: 'kdtree' (default) or 'faiss' for k-NN candidate generation
            clamp: Clamp k to N instead of raising; defaults to HYBRIDSEG_KNN_CLAMP
            workers: Threads used by batch queries
        """
        points = np.array(positions, dtype=np.float64, copy=True)
        points.setflags(write=False)
        self._points = points
        self.n_points = points.shape[0]
        self.clamp = KNN_CLAMP if clamp is None else clamp
        self.workers = max(1, int(workers))
        self.backend = (backend or INDEX_BACKEND).lower()
        if self.backend not in ("kdtree", "faiss"):
            raise ValidationError(f"unknown index backend '{self.backend}'", field="backend")
        if self.backend == "faiss" and not FAISS_AVAILABLE:
            logger.warning("faiss not installed, using kdtree backend")
            self.backend = "kdtree"

        # radius queries always go through the tree
        self._tree = cKDTree(points)
        self._faiss = None
        if self.backend == "faiss":
            self._faiss = faiss.IndexFlatL2(3)
            self._faiss.add(np.ascontiguousarray(points, dtype=np.float32))

        logger.debug("Built neighbor index", n_points=self.n_points, backend=self.backend)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def _resolve_k(self, k: int) -> int:
        k = int(k)
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}", field="k")
        if k > self.n_points:
            if not self.clamp:
                raise ValidationError(f"k={k} exceeds the {self.n_points} indexed points", field="k")
            return self.n_points
        return k

    def _candidates(self, queries: np.ndarray, count: int) -> np.ndarray:
        if self._faiss is not None:
            _, ids = self._faiss.search(np.ascontiguousarray(queries, dtype=np.float32), count)
            return ids.astype(np.int64)
        _, ids = self._tree.query(queries, k=count, workers=self.workers)
        return np.asarray(ids, dtype=np.int64).reshape(len(queries), count)

    def _exact_knn(self, query: np.ndarray, k: int, bound: float) -> Tuple[np.ndarray, np.ndarray]:
        # every point within ``bound`` is a candidate, which settles boundary ties
        ids = np.asarray(self._tree.query_ball_point(query, bound), dtype=np.int64)
        if ids.size < k:
            ids = np.arange(self.n_points)
        d = point_distances(self._points[ids], query)
        order = np.lexsort((ids, d))[:k]
        return ids[order], d[order]

    def knn_many(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Batch k-nearest query.

        Args:
            queries: Q x 3 query coordinates
            k: Neighbors per query (clamped to N per configuration)

        Returns:
            (ids, distances), both Q x k, rows ordered by (distance, index)
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = self._resolve_k(k)
        rows_per_chunk = max(1, QUERY_CHUNK_ELEMENTS // (k + FAISS_EXTRA_CANDIDATES))
        if len(queries) > rows_per_chunk:
            parts = [self._knn_block(queries[s:s + rows_per_chunk], k)
                     for s in range(0, len(queries), rows_per_chunk)]
            return np.vstack([p[0] for p in parts]), np.vstack([p[1] for p in parts])
        return self._knn_block(queries, k)

    def _knn_block(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        extra = FAISS_EXTRA_CANDIDATES if self._faiss is not None else 1
        count = min(self.n_points, k + extra)

        ids = self._candidates(queries, count)
        d = point_distances(self._points[ids], queries[:, None, :])
        order = np.lexsort((ids, d), axis=-1)
        ids = np.take_along_axis(ids, order, axis=-1)
        d = np.take_along_axis(d, order, axis=-1)

        if count > k:
            kth = d[:, k - 1]
            slack = 1e-5 if self._faiss is not None else TIE_RTOL
            unsafe = np.nonzero(d[:, -1] <= kth * (1.0 + slack) + 1e-300)[0]
            for row in unsafe:
                bound = kth[row] * (1.0 + slack) + 1e-300
                ids[row, :k], d[row, :k] = self._exact_knn(queries[row], k, bound)
        return ids[:, :k], d[:, :k]

    def knn(self, query: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """k nearest points to a single query, ties by lower index."""
        ids, d = self.knn_many(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return ids[0], d[0]

    def radius(self, query: np.ndarray, r: float) -> Tuple[np.ndarray, np.ndarray]:
        """All points with distance <= r, sorted by index."""
        return self.radius_many(np.asarray(query, dtype=np.float64).reshape(1, 3), r)[0]

    def radius_many(self, queries: np.ndarray,
                    r: Union[float, np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
        """
        Per-query (ids, distances) of all points within the closed ball of radius r.

        Args:
            queries: Q x 3 query coordinates
            r: One radius, or one radius per query
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        radii = np.broadcast_to(np.asarray(r, dtype=np.float64), (len(queries),))
        if np.any(radii < 0) or not np.all(np.isfinite(radii)):
            raise ValidationError("radius must be finite and >= 0", field="radius")
        hits = self._tree.query_ball_point(queries, radii * (1.0 + TIE_RTOL) + 1e-300,
                                           workers=self.workers, return_sorted=True)
        results = []
        for q, row, rq in zip(queries, hits, radii):
            ids = np.asarray(row, dtype=np.int64)
            d = point_distances(self._points[ids], q)
            keep = d <= rq
            results.append((ids[keep], d[keep]))
        return results


def build_index(cloud: PointCloud, backend: Optional[str] = None,
                clamp: Optional[bool] = None, workers: int = THREADS) -> NeighborIndex:
    """Index over a cloud's positions."""
    return NeighborIndex(cloud.positions, backend=backend, clamp=clamp, workers=workers)
