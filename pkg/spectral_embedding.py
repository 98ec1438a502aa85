"""
Consistency and smoothness adjacency matrices and their spectral descriptors.

Consistency: w(p, s) = exp(-d(p, s)^2 / 2 sigma_t^2) and
A_c(i, j) = (w(p_i, s_j) + w(p_j, s_i)) / 2 with a unit diagonal.
Smoothness: symmetrized k-NN graph with exp(-|n_i - n_j|^2 / 2 sigma_edge^2).
Descriptors are the leading eigenvectors scaled by sqrt(lambda_1 / lambda_i).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.linalg import orthogonal_procrustes
from scipy.sparse.linalg import eigsh

from config import DENSE_LIMIT, SPARSE_ROW_KEEP
from error_handlers import (DegenerateInputError, NumericalError, SpectralRankError,
                            ValidationError)
from logger_config import get_logger
from neighbor_index import NeighborIndex
from point_cloud import PointCloud
from primitives import PrimitiveParams, TypeLabel

logger = get_logger(__name__)

SIGMA_FLOOR = 1e-4
SIGMA_PAIR_FRACTION = 0.01
SIGMA_PAIR_CAP = 200_000
RANK_FLOOR = 1e-12
RELATIVE_RANK_FLOOR = 1e-8
LANCZOS_TOL = 1e-8
EIGENGAP_WINDOW = 16
ROW_CHUNK_ELEMENTS = 1 << 22


@dataclass
class AdjacencyMatrix:
    """Symmetric affinity in [0, 1]; sparse rows are truncated above DENSE_LIMIT points."""
    matrix: Union[np.ndarray, sp.csr_matrix]
    kind: str
    truncated: bool = False

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.asarray(self.matrix)

    def coordinate_list(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nonzero entries as (rows, cols, values), row-major."""
        coo = sp.coo_matrix(self.matrix)
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def write_coordinate_list(self, path: Union[str, Path]) -> Path:
        rows, cols, vals = self.coordinate_list()
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for i, j, v in zip(rows, cols, vals):
                f.write(f"{i} {j} {v:.17g}\n")
        return path


@dataclass
class SpectralDescriptor:
    """Leading eigenpairs and the scaled descriptor matrix U (N x d)."""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    descriptors: np.ndarray

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class DavisKahanReport:
    lhs: float
    rhs: float
    holds: bool
    gap: float
    lambda_1: float
    perturbation_norm: float

    def to_dict(self) -> Dict[str, float]:
        return {"lhs": self.lhs, "rhs": self.rhs, "holds": self.holds, "gap": self.gap,
                "lambda_1": self.lambda_1, "perturbation_norm": self.perturbation_norm}


# ---------------------------------------------------------------- consistency

def _hypothesis_table(per_point_prims: Sequence[Tuple[TypeLabel, Optional[PrimitiveParams]]]):
    """Unique hypotheses, their types and each point's hypothesis id."""
    keys: Dict[bytes, int] = {}
    prims: List[Optional[PrimitiveParams]] = []
    kinds: List[TypeLabel] = []
    owner = np.empty(len(per_point_prims), dtype=np.int64)
    for i, (kind, prim) in enumerate(per_point_prims):
        kind = TypeLabel.parse(kind)
        if kind is not TypeLabel.OTHER:
            if prim is None or prim.type is not kind:
                raise ValidationError(f"invalid primitive hypothesis at point {i}", field="per_point_prims")
            key = bytes([kind.code]) + prim.pack().tobytes()
        else:
            prim, key = None, b"other"
        if key not in keys:
            keys[key] = len(prims)
            prims.append(prim)
            kinds.append(kind)
        owner[i] = keys[key]
    return prims, kinds, owner


def _distance_table(positions: np.ndarray, prims: List[Optional[PrimitiveParams]]) -> np.ndarray:
    cols = [np.full(len(positions), np.inf) if p is None else p.distance(positions) for p in prims]
    return np.column_stack(cols)


def default_type_sigmas(distances: np.ndarray, kinds: List[TypeLabel], owner: np.ndarray,
                        seed: int = 0) -> Dict[TypeLabel, float]:
    """Per type: half the median of d(p_i, s_j) over a random 1% pair sample, floored."""
    n = len(owner)
    pairs = int(min(max(SIGMA_PAIR_FRACTION * n * n, min(n * n, 1000)), SIGMA_PAIR_CAP))
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, pairs)
    j = rng.integers(0, n, pairs)
    d = distances[i, owner[j]]
    pair_kinds = np.array([kinds[g].code for g in owner[j]])
    sigmas = {}
    for kind in set(kinds):
        if kind is TypeLabel.OTHER:
            continue
        sel = d[(pair_kinds == kind.code) & np.isfinite(d)]
        med = float(np.median(sel)) if sel.size else 0.0
        sigmas[kind] = max(0.5 * med, SIGMA_FLOOR)
    return sigmas


def consistency_matrix(cloud: PointCloud,
                       per_point_prims: Sequence[Tuple[TypeLabel, Optional[PrimitiveParams]]],
                       sigmas: Optional[Dict[TypeLabel, Optional[float]]] = None,
                       seed: int = 0, dense_limit: int = DENSE_LIMIT,
                       row_keep: int = SPARSE_ROW_KEEP) -> AdjacencyMatrix:
    """
    Geometric-consistency adjacency from one primitive hypothesis per point.

    Args:
        cloud: Points
        per_point_prims: (type, params) per point; OTHER carries no params and weight 0
        sigmas: Per-type bandwidths; missing entries use the sampled-median default
        seed: Seed of the pair sample for default bandwidths
        dense_limit: Largest N stored densely
        row_keep: Largest off-diagonal entries kept per row on the sparse path, before symmetrization

    Returns:
        AdjacencyMatrix with unit diagonal
    """
    n = len(cloud)
    if len(per_point_prims) != n:
        raise ValidationError("one primitive hypothesis per point is required", field="per_point_prims")
    if row_keep < 1:
        raise ValidationError("row_keep must be >= 1", field="row_keep")
    prims, kinds, owner = _hypothesis_table(per_point_prims)
    distances = _distance_table(cloud.positions, prims)

    resolved = default_type_sigmas(distances, kinds, owner, seed)
    for kind, value in (sigmas or {}).items():
        if value is None:
            continue
        if not value > 0:
            raise ValidationError(f"sigma for {TypeLabel.parse(kind).value} must be > 0", field="sigmas")
        resolved[TypeLabel.parse(kind)] = float(value)

    sigma_col = np.array([resolved.get(k, 1.0) for k in kinds])
    with np.errstate(over="ignore"):
        weights = np.exp(-distances ** 2 / (2.0 * sigma_col ** 2))
    weights[:, [g for g, k in enumerate(kinds) if k is TypeLabel.OTHER]] = 0.0

    logger.info("Consistency matrix", n_points=n, hypotheses=len(prims),
                sigmas={k.value: v for k, v in resolved.items()})

    if n <= dense_limit or n < 2:
        m = weights[:, owner]
        a = 0.5 * (m + m.T)
        np.fill_diagonal(a, 1.0)
        return AdjacencyMatrix(a, kind="consistency")

    # each row keeps its row_keep largest off-diagonal entries, built a block of rows at a time
    k = min(row_keep, n - 1)
    step = max(1, ROW_CHUNK_ELEMENTS // n)
    all_rows, all_cols, all_vals = [], [], []
    for s in range(0, n, step):
        block = np.arange(s, min(s + step, n))
        vals = 0.5 * (weights[block][:, owner] + weights[:, owner[block]].T)
        vals[np.arange(len(block)), block] = -np.inf
        top = np.argpartition(-vals, k - 1, axis=1)[:, :k]
        all_rows.append(np.repeat(block, k))
        all_cols.append(top.ravel())
        all_vals.append(np.take_along_axis(vals, top, axis=1).ravel())
    rows, cols, vals = np.concatenate(all_rows), np.concatenate(all_cols), np.concatenate(all_vals)
    keep = vals > 0
    a = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
    a = a.maximum(a.T) + sp.identity(n, format="csr")
    return AdjacencyMatrix(a.tocsr(), kind="consistency", truncated=True)


# ---------------------------------------------------------------- smoothness

def smoothness_matrix(cloud: PointCloud, normals: Optional[np.ndarray] = None, k: int = 50,
                      sigma_edge: float = 0.5, dense_limit: int = DENSE_LIMIT,
                      index: Optional[NeighborIndex] = None) -> AdjacencyMatrix:
    """
    Normal-agreement weights on the symmetrized k-NN graph; non-edges and the diagonal are 0.

    Args:
        cloud: Points
        normals: N x 3 unit normals; defaults to the cloud's normals
        k: Neighbors per point
        sigma_edge: Bandwidth of the normal difference
    """
    if normals is None:
        normals = cloud.normals
    if normals is None:
        raise ValidationError("smoothness matrix needs normals", field="normals")
    if k < 1:
        raise ValidationError("k must be >= 1", field="k")
    if not sigma_edge > 0:
        raise ValidationError("sigma_edge must be > 0", field="sigma_edge")
    normals = np.asarray(normals, dtype=np.float64)
    n = len(cloud)

    index = index or NeighborIndex(cloud.positions, clamp=True)
    kk = min(k + 1, n)
    nbr, _ = index.knn_many(cloud.positions, kk)
    rows = np.repeat(np.arange(n), kk)
    cols = nbr.ravel()
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    diff = normals[rows] - normals[cols]
    vals = np.exp(-np.sum(diff * diff, axis=1) / (2.0 * sigma_edge ** 2))
    # explicit entries even when the weight underflows, so edges stay in the pattern
    a = sp.csr_matrix((np.maximum(vals, 1e-300), (rows, cols)), shape=(n, n))
    a = a.maximum(a.T)
    a.data[a.data <= 1e-300] = 0.0
    if n <= dense_limit:
        return AdjacencyMatrix(a.toarray(), kind="smoothness")
    return AdjacencyMatrix(a.tocsr(), kind="smoothness")


# ---------------------------------------------------------------- eigen-descriptors

def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def top_eigenpairs(a: AdjacencyMatrix, count: int, method: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Largest-algebraic eigenpairs, eigenvalues descending, vectors sign-canonical."""
    n = a.n
    if not 1 <= count <= n:
        raise ValidationError(f"requested {count} eigenpairs of a {n} x {n} matrix", field="d")
    method = method or ("dense" if (not a.is_sparse or n <= DENSE_LIMIT or count >= n - 1) else "lanczos")
    try:
        if method == "dense":
            w, v = scipy.linalg.eigh(a.to_dense(), subset_by_index=[n - count, n - 1])
        else:
            mat = a.matrix if a.is_sparse else sp.csr_matrix(a.matrix)
            v0 = np.full(n, 1.0 / np.sqrt(n))
            w, v = eigsh(mat, k=count, which="LA", v0=v0, tol=LANCZOS_TOL)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise NumericalError(f"eigen-decomposition failed: {e}", solver=method)
    except Exception as e:
        if type(e).__name__.startswith("Arpack"):
            raise NumericalError(f"Lanczos did not converge: {e}", solver="arpack")
        raise
    order = np.argsort(-w, kind="stable")
    return w[order], _canonical_signs(v[:, order])


def select_dimension(eigenvalues: np.ndarray) -> int:
    """Eigengap heuristic: position of the largest relative gap among positive eigenvalues."""
    lam = np.asarray(eigenvalues, dtype=np.float64)[:EIGENGAP_WINDOW]
    if lam.size == 0 or lam[0] <= RANK_FLOOR:
        return 1
    positive = int(np.sum(lam > max(RANK_FLOOR, RELATIVE_RANK_FLOOR * lam[0])))
    if positive <= 1:
        return 1
    # the gap after the last window entry is unknown
    count = positive if positive < lam.size else positive - 1
    gaps = [(lam[i] - (lam[i + 1] if i + 1 < positive else 0.0)) / lam[i] for i in range(count)]
    return int(np.argmax(gaps)) + 1


def leading_eigs(a: AdjacencyMatrix, d: Optional[int] = None, method: Optional[str] = None,
                 max_dims: int = EIGENGAP_WINDOW) -> SpectralDescriptor:
    """
    Scaled leading eigenvectors of an adjacency matrix.

    Args:
        a: Symmetric adjacency
        d: Descriptor dimension; None picks it by the eigengap over the top ``max_dims``
        method: 'dense' or 'lanczos'; by default dense up to DENSE_LIMIT points

    Returns:
        SpectralDescriptor with column i scaled by sqrt(lambda_1 / lambda_i)
    """
    if d is None:
        w, v = top_eigenpairs(a, min(max_dims, a.n), method)
        d = select_dimension(w)
        w, v = w[:d], v[:, :d]
    else:
        w, v = top_eigenpairs(a, d, method)
    if w[-1] <= RANK_FLOOR:
        raise SpectralRankError(f"eigenvalue {d} is {w[-1]:.3g}; rank is below the requested dimension",
                                requested=d, eigenvalue=float(w[-1]))
    scale = np.sqrt(w[0] / w)
    logger.debug("Leading eigenpairs", kind=a.kind, d=int(d), eigenvalues=w.tolist())
    return SpectralDescriptor(eigenvalues=w, eigenvectors=v, descriptors=v * scale)


# ---------------------------------------------------------------- perturbation bound

def davis_kahan_check(a_good: np.ndarray, perturbation: np.ndarray, k: int) -> DavisKahanReport:
    """
    Compare the rotation of the top-k eigenspace under a perturbation with its bound.

    lhs = min over orthogonal R of |U R - U_good|_F (orthogonal Procrustes),
    rhs = sqrt(lambda_1) |E|_F / (lambda_k - lambda_{k+1}), eigenvalues of A_good.
    """
    a_good = np.asarray(a_good, dtype=np.float64)
    e = np.asarray(perturbation, dtype=np.float64)
    n = a_good.shape[0]
    if not 1 <= k < n:
        raise ValidationError("k must satisfy 1 <= k < N", field="k")
    if np.abs(e - e.T).max(initial=0.0) > 1e-12:
        raise ValidationError("perturbation must be symmetric", field="perturbation")

    w_all = scipy.linalg.eigvalsh(a_good)[::-1]
    gap = float(w_all[k - 1] - w_all[k])
    if gap <= 0:
        raise DegenerateInputError("zero spectral gap", details={"k": k})

    _, u_good = scipy.linalg.eigh(a_good, subset_by_index=[n - k, n - 1])
    _, u = scipy.linalg.eigh(a_good + e, subset_by_index=[n - k, n - 1])
    rotation, _ = orthogonal_procrustes(u, u_good)
    lhs = float(np.linalg.norm(u @ rotation - u_good))
    e_norm = float(np.linalg.norm(e))
    lambda_1 = float(w_all[0])
    rhs = float(np.sqrt(max(lambda_1, 0.0)) * e_norm / gap)
    return DavisKahanReport(lhs=lhs, rhs=rhs, holds=lhs <= rhs + 1e-12, gap=gap,
                            lambda_1=lambda_1, perturbation_norm=e_norm)


def binary_weight_model(n: int, k: int, outlier_rate: float,
                        seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Consistency matrix of a binary-weight labelling with outliers.

    Each point's predicted label is wrong with probability ``outlier_rate``.
    A(i, j) = ([l_i == p_j] + [l_j == p_i]) / 2; A_good keeps only
    same-segment entries.

    Returns:
        (A, A_good, labels)
    """
    if not 0 <= outlier_rate < 1:
        raise ValidationError("outlier rate must lie in [0, 1)", field="outlier_rate")
    if k < 2 or n < k:
        raise ValidationError("need n >= k >= 2", field="k")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), int(np.ceil(n / k)))[:n]
    predicted = labels.copy()
    wrong = rng.random(n) < outlier_rate
    shift = rng.integers(1, k, size=n)
    predicted[wrong] = (labels[wrong] + shift[wrong]) % k

    hit = (labels[:, None] == predicted[None, :]).astype(np.float64)
    a = 0.5 * (hit + hit.T)
    np.fill_diagonal(a, 1.0)
    a_good = np.where(labels[:, None] == labels[None, :], a, 0.0)
    return a, a_good, labels
