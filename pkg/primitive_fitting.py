"""
Classical primitive fitting: least squares, RANSAC and sequential detection.

Planes come from the centroid and smallest covariance eigenvector, spheres
from the algebraic fit plus one Gauss-Newton pass. Cylinders and cones start
from the normal field and are refined with Levenberg-Marquardt on the
point-to-surface residuals.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from error_handlers import DegenerateInputError, NoConsensusError, ValidationError
from local_features import Neighborhood, estimate_normals
from logger_config import get_logger
from neighbor_index import NeighborIndex
from point_cloud import PointCloud
from primitives import FITTABLE_TYPES, Cone, Cylinder, Plane, PrimitiveParams, Sphere, TypeLabel

logger = get_logger(__name__)

LM_MAX_ITERATIONS = 100
LM_TOL = 1e-10
RANK_RTOL = 1e-12
NORMAL_K = 16
SCORE_SAMPLE = 20000
# a more complex type must beat a simpler one by this inlier fraction
TYPE_PREFERENCE_MARGIN = 0.02

MIN_FIT_POINTS = {
    TypeLabel.PLANE: 3,
    TypeLabel.SPHERE: 4,
    TypeLabel.CYLINDER: 6,
    TypeLabel.CONE: 6,
}
MIN_INLIERS = {t: 3 * n for t, n in MIN_FIT_POINTS.items()}


@dataclass
class FitResult:
    """Fitted primitive with its mean residual and solver status."""
    primitive: PrimitiveParams
    residual: float
    converged: bool = True
    iterations: int = 0


@dataclass
class RansacResult:
    primitive: PrimitiveParams
    inliers: np.ndarray
    fit: FitResult
    hypothesis_inliers: int
    iterations: int


@dataclass
class Detection:
    primitive: PrimitiveParams
    inliers: np.ndarray
    residual: float


@dataclass
class DetectionResult:
    """Sequentially extracted primitives plus the nearest one for every point."""
    detections: List[Detection]
    assignment: np.ndarray
    unassigned: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def per_point(self) -> List[Tuple[TypeLabel, PrimitiveParams]]:
        return [(self.detections[j].primitive.type, self.detections[j].primitive)
                for j in self.assignment]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthonormal_basis(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.eye(3)[int(np.argmin(np.abs(axis)))]
    u = _unit(np.cross(axis, helper))
    return u, np.cross(axis, u)


def _eig_ascending(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    diffs = points - centroid
    w, v = np.linalg.eigh(diffs.T @ diffs / len(points))
    return centroid, w, v


def subset_normals(points: np.ndarray, normals: Optional[np.ndarray]) -> np.ndarray:
    """Given normals, or MST-oriented local PCA normals of the subset itself."""
    if normals is not None:
        return np.asarray(normals, dtype=np.float64)
    sub = PointCloud(points)
    index = NeighborIndex(points, clamp=True)
    k = min(NORMAL_K, len(points))
    return estimate_normals(sub, index, Neighborhood.nearest(k)).normals


# ---------------------------------------------------------------- least squares fits

def fit_plane(points: np.ndarray) -> FitResult:
    centroid, w, v = _eig_ascending(points)
    if w[2] <= 0 or w[1] <= RANK_RTOL * w[2]:
        raise DegenerateInputError("plane fit needs non-collinear points")
    normal = v[:, 0]
    plane = Plane(normal, float(normal @ centroid))
    return FitResult(plane, float(np.mean(plane.distance(points))))


def _algebraic_sphere(points: np.ndarray) -> Tuple[np.ndarray, float]:
    a = np.hstack([2.0 * points, np.ones((len(points), 1))])
    b = np.sum(points * points, axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    center = sol[:3]
    r2 = sol[3] + center @ center
    if not np.isfinite(r2) or r2 <= 0:
        raise DegenerateInputError("sphere fit produced no real radius")
    return center, float(np.sqrt(r2))


def fit_sphere(points: np.ndarray) -> FitResult:
    _, w, _ = _eig_ascending(points)
    if w[2] <= 0 or w[0] <= RANK_RTOL * w[2]:
        raise DegenerateInputError("sphere fit needs non-coplanar points")
    center, radius = _algebraic_sphere(points)

    # one Gauss-Newton pass on r_i = |p_i - o| - r
    diffs = points - center
    dist = np.sqrt(np.sum(diffs * diffs, axis=1))
    if np.all(dist > 0):
        jac = np.hstack([-diffs / dist[:, None], -np.ones((len(points), 1))])
        step, *_ = np.linalg.lstsq(jac, -(dist - radius), rcond=None)
        cand_center, cand_radius = center + step[:3], radius + step[3]
        if cand_radius > 0:
            old = np.sum((dist - radius) ** 2)
            new_dist = np.sqrt(np.sum((points - cand_center) ** 2, axis=1))
            if np.sum((new_dist - cand_radius) ** 2) <= old:
                center, radius = cand_center, float(cand_radius)

    sphere = Sphere(center, radius)
    return FitResult(sphere, float(np.mean(sphere.distance(points))), iterations=1)


def _fit_circle(xy: np.ndarray) -> Tuple[np.ndarray, float]:
    a = np.hstack([2.0 * xy, np.ones((len(xy), 1))])
    b = np.sum(xy * xy, axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    r2 = sol[2] + sol[:2] @ sol[:2]
    if not np.isfinite(r2) or r2 <= 0:
        raise DegenerateInputError("circle fit produced no real radius")
    return sol[:2], float(np.sqrt(r2))


def _tilted(a0: np.ndarray, u: np.ndarray, v: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    return _unit(a0 + alpha * u + beta * v)


def _cylinder_residuals(x, points, a0, u, v, c0):
    axis = _tilted(a0, u, v, x[0], x[1])
    w = points - (c0 + x[2] * u + x[3] * v)
    radial = w - np.outer(w @ axis, axis)
    return np.sqrt(np.sum(radial * radial, axis=1)) - x[4]


def _refine_cylinder(points: np.ndarray, axis: np.ndarray) -> Tuple[Cylinder, bool, int, float]:
    u, v = _orthonormal_basis(axis)
    xy = np.column_stack([points @ u, points @ v])
    center2d, radius = _fit_circle(xy)
    c0 = center2d[0] * u + center2d[1] * v
    res = least_squares(_cylinder_residuals, np.array([0.0, 0.0, 0.0, 0.0, radius]),
                        args=(points, axis, u, v, c0), method="lm",
                        xtol=LM_TOL, ftol=LM_TOL, gtol=LM_TOL,
                        max_nfev=LM_MAX_ITERATIONS * 6)
    x = res.x
    fit_axis = _tilted(axis, u, v, x[0], x[1])
    center = c0 + x[2] * u + x[3] * v
    r = abs(float(x[4]))
    if not np.isfinite(r) or r <= 0:
        raise DegenerateInputError("cylinder fit collapsed to zero radius")
    # canonical axis point: nearest to the sample centroid
    centroid = points.mean(axis=0)
    center = center + ((centroid - center) @ fit_axis) * fit_axis
    cyl = Cylinder(fit_axis, center, r)
    return cyl, bool(res.status > 0), int(res.nfev), float(np.sum(res.fun ** 2))


def fit_cylinder(points: np.ndarray, normals: Optional[np.ndarray] = None) -> FitResult:
    normals = subset_normals(points, normals)
    _, v_normals = np.linalg.eigh(normals.T @ normals)
    _, _, v_points = _eig_ascending(points)
    candidates = [v_normals[:, 0]]
    major = v_points[:, 2]
    if abs(major @ candidates[0]) < 1.0 - 1e-6:
        candidates.append(major)

    best = None
    for axis in candidates:
        try:
            cyl, converged, nfev, cost = _refine_cylinder(points, axis)
        except DegenerateInputError:
            continue
        if best is None or cost < best[3]:
            best = (cyl, converged, nfev, cost)
    if best is None:
        raise DegenerateInputError("cylinder fit failed for every axis initialization")
    cyl, converged, nfev, _ = best
    if not converged:
        logger.warning("Cylinder fit hit the iteration budget", n_points=len(points))
    return FitResult(cyl, float(np.mean(cyl.distance(points))), converged, nfev)


def _cone_residuals(x, points, a0, u, v, apex0):
    axis = _tilted(a0, u, v, x[0], x[1])
    w = points - (apex0 + x[2:5])
    length = np.sqrt(np.sum(w * w, axis=1))
    safe = np.where(length > 0, length, 1.0)
    phi = np.arccos(np.clip((w @ axis) / safe, -1.0, 1.0))
    return length * np.sin(phi - x[5])


def fit_cone(points: np.ndarray, normals: Optional[np.ndarray] = None) -> FitResult:
    normals = subset_normals(points, normals)

    # normals keep a constant angle with the axis, so they vary least along it
    centered = normals - normals.mean(axis=0)
    _, v_normals = np.linalg.eigh(centered.T @ centered)
    axis = v_normals[:, 0]

    # every tangent plane contains the apex
    apex, _, rank, _ = np.linalg.lstsq(normals, np.sum(normals * points, axis=1), rcond=None)
    if rank < 3:
        raise DegenerateInputError("cone fit needs normals spanning three directions")
    w = points - apex
    if np.mean(w @ axis) < 0:
        axis = -axis
    length = np.sqrt(np.sum(w * w, axis=1))
    ok = length > 0
    theta = float(np.mean(np.arccos(np.clip((w[ok] @ axis) / length[ok], -1.0, 1.0))))
    theta = float(np.clip(theta, 1e-3, np.pi / 2 - 1e-3))

    u, v = _orthonormal_basis(axis)
    res = least_squares(_cone_residuals, np.array([0.0, 0.0, 0.0, 0.0, 0.0, theta]),
                        args=(points, axis, u, v, apex), method="lm",
                        xtol=LM_TOL, ftol=LM_TOL, gtol=LM_TOL,
                        max_nfev=LM_MAX_ITERATIONS * 7)
    x = res.x
    fit_axis = _tilted(axis, u, v, x[0], x[1])
    fit_apex = apex + x[2:5]
    fit_theta = float(x[5])
    if fit_theta < 0:
        fit_theta = -fit_theta
    if fit_theta > np.pi / 2:
        fit_axis, fit_theta = -fit_axis, np.pi - fit_theta
    if not 0.0 < fit_theta < np.pi / 2:
        raise DegenerateInputError("cone fit left the valid half-angle range",
                                   details={"half_angle": fit_theta})
    cone = Cone(fit_apex, fit_axis, fit_theta)
    converged = bool(res.status > 0)
    if not converged:
        logger.warning("Cone fit hit the iteration budget", n_points=len(points))
    return FitResult(cone, float(np.mean(cone.distance(points))), converged, int(res.nfev))


def fit_points(points: np.ndarray, kind: TypeLabel,
               normals: Optional[np.ndarray] = None) -> FitResult:
    """Least-squares fit of one primitive type to a point array."""
    kind = TypeLabel.parse(kind)
    if kind is TypeLabel.OTHER:
        raise ValidationError("'other' cannot be fitted", field="type")
    points = np.asarray(points, dtype=np.float64)
    if len(points) < MIN_FIT_POINTS[kind]:
        raise DegenerateInputError(
            f"{kind.value} fit needs at least {MIN_FIT_POINTS[kind]} points, got {len(points)}")
    if kind is TypeLabel.PLANE:
        return fit_plane(points)
    if kind is TypeLabel.SPHERE:
        return fit_sphere(points)
    if kind is TypeLabel.CYLINDER:
        return fit_cylinder(points, normals)
    return fit_cone(points, normals)


def fit_primitive(cloud: PointCloud, point_ids: Sequence[int], kind: TypeLabel) -> FitResult:
    """
    Fit one primitive to a subset of a cloud.

    Args:
        cloud: Source cloud; its normals seed cylinder/cone axes when present
        point_ids: Indices of the points to fit
        kind: Primitive type

    Returns:
        FitResult; ``converged`` is False when Levenberg-Marquardt ran out of budget
    """
    ids = np.asarray(point_ids, dtype=np.int64)
    normals = None if cloud.normals is None else cloud.normals[ids]
    return fit_points(cloud.positions[ids], kind, normals)


def fit_best_type(cloud: PointCloud, point_ids: Sequence[int],
                  types: Iterable[TypeLabel] = FITTABLE_TYPES) -> FitResult:
    """Fit every candidate type and keep the lowest mean residual, preferring simpler types."""
    best = None
    for kind in types:
        try:
            result = fit_primitive(cloud, point_ids, kind)
        except DegenerateInputError:
            continue
        # a simpler type is kept unless the complex one is clearly better
        if best is None or result.residual < best.residual * (1.0 - TYPE_PREFERENCE_MARGIN) - 1e-12:
            best = result
    if best is None:
        raise DegenerateInputError("no primitive type fits the segment",
                                   details={"n_points": len(point_ids)})
    return best


# ---------------------------------------------------------------- RANSAC

def _hypothesis(kind: TypeLabel, pts: np.ndarray, nrm: Optional[np.ndarray]) -> Optional[PrimitiveParams]:
    """Primitive through a minimal sample, or None when the sample is degenerate."""
    try:
        if kind is TypeLabel.PLANE:
            n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            norm = np.linalg.norm(n)
            if norm <= 1e-12:
                return None
            n = n / norm
            return Plane(n, float(n @ pts[0]))

        if kind is TypeLabel.SPHERE:
            a = np.hstack([2.0 * pts, np.ones((4, 1))])
            if abs(np.linalg.det(a)) <= 1e-15:
                return None
            sol = np.linalg.solve(a, np.sum(pts * pts, axis=1))
            r2 = sol[3] + sol[:3] @ sol[:3]
            return Sphere(sol[:3], float(np.sqrt(r2))) if r2 > 0 else None

        if kind is TypeLabel.CYLINDER:
            axis = np.cross(nrm[0], nrm[1])
            norm = np.linalg.norm(axis)
            if norm <= 1e-6:
                return None
            axis = axis / norm
            u, v = _orthonormal_basis(axis)
            p2 = np.column_stack([pts[:2] @ u, pts[:2] @ v])
            n2 = np.column_stack([nrm[:2] @ u, nrm[:2] @ v])
            # axis meets both normal lines in the cross-section plane
            lhs = np.column_stack([n2[0], -n2[1]])
            if abs(np.linalg.det(lhs)) <= 1e-12:
                return None
            t = np.linalg.solve(lhs, p2[1] - p2[0])
            c2 = p2[0] + t[0] * n2[0]
            r = 0.5 * (np.linalg.norm(p2[0] - c2) + np.linalg.norm(p2[1] - c2))
            return Cylinder(axis, c2[0] * u + c2[1] * v, float(r)) if r > 0 else None

        if kind is TypeLabel.CONE:
            if abs(np.linalg.det(nrm)) <= 1e-9:
                return None
            apex = np.linalg.solve(nrm, np.sum(nrm * pts, axis=1))
            rays = pts - apex
            lengths = np.linalg.norm(rays, axis=1)
            if np.any(lengths <= 1e-12):
                return None
            rays = rays / lengths[:, None]
            axis = np.cross(rays[1] - rays[0], rays[2] - rays[0])
            norm = np.linalg.norm(axis)
            if norm <= 1e-9:
                return None
            axis = axis / norm
            if axis @ rays[0] < 0:
                axis = -axis
            theta = float(np.arccos(np.clip(axis @ rays[0], -1.0, 1.0)))
            return Cone(apex, axis, theta) if 1e-3 < theta < np.pi / 2 - 1e-3 else None
    except (ValidationError, np.linalg.LinAlgError):
        return None
    return None


SAMPLE_SIZE = {
    TypeLabel.PLANE: 3,
    TypeLabel.SPHERE: 4,
    TypeLabel.CYLINDER: 2,
    TypeLabel.CONE: 3,
}


def ransac_fit(cloud: PointCloud, point_ids: Sequence[int], types: Iterable[TypeLabel],
               inlier_tol: float, iters: int, seed: int,
               min_inliers: Optional[int] = None) -> RansacResult:
    """
    RANSAC over minimal samples, then a least-squares refit on the consensus set.

    Args:
        cloud: Source cloud (normals are estimated on the subset when absent)
        point_ids: Candidate points
        types: Allowed primitive types
        inlier_tol: Distance threshold for inliers
        iters: Hypotheses drawn per type
        seed: Seed of the per-call generator
        min_inliers: Required consensus; default 3x the minimal point count of the type

    Returns:
        RansacResult whose inlier set is recomputed from the refitted primitive
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1", field="iters")
    if not inlier_tol > 0:
        raise ValidationError("inlier_tol must be > 0", field="inlier_tol")
    types = [TypeLabel.parse(t) for t in types]
    types = [t for t in FITTABLE_TYPES if t in types]
    if not types:
        raise ValidationError("no fittable primitive type requested", field="types")

    ids = np.asarray(point_ids, dtype=np.int64)
    points = cloud.positions[ids]
    n = len(ids)
    normals = None
    if any(t in (TypeLabel.CYLINDER, TypeLabel.CONE) for t in types) and n >= 3:
        normals = subset_normals(points, None if cloud.normals is None else cloud.normals[ids])

    rng = np.random.default_rng(seed)
    score_rows = np.arange(n)
    if n > SCORE_SAMPLE:
        score_rows = np.sort(rng.choice(n, SCORE_SAMPLE, replace=False))
    score_points = points[score_rows]
    scale = n / len(score_rows)

    best = None  # (count, residual_sum, kind, primitive)
    for kind in types:
        size = SAMPLE_SIZE[kind]
        if n < max(size, MIN_FIT_POINTS[kind]):
            continue
        for _ in range(iters):
            sample = rng.choice(n, size, replace=False)
            prim = _hypothesis(kind, points[sample], None if normals is None else normals[sample])
            if prim is None:
                continue
            d = prim.distance(score_points)
            mask = d <= inlier_tol
            count = int(mask.sum())
            resid = float(d[mask].sum())
            if best is None or count > best[0] or (count == best[0] and resid < best[1]):
                best = (count, resid, kind, prim)

    if best is None:
        raise NoConsensusError("no consensus: no valid hypothesis", best_inliers=0)
    kind = best[2]
    required = MIN_INLIERS[kind] if min_inliers is None else int(min_inliers)
    estimated = int(round(best[0] * scale))
    if estimated < required:
        raise NoConsensusError("no consensus", best_inliers=estimated, required=required)

    inliers = np.nonzero(best[3].distance(points) <= inlier_tol)[0]
    fit = fit_points(points[inliers], kind, None if normals is None else normals[inliers])
    inliers = np.nonzero(fit.primitive.distance(points) <= inlier_tol)[0]
    if inliers.size < required:
        raise NoConsensusError("no consensus after refit", best_inliers=int(inliers.size),
                               required=required)

    logger.debug("RANSAC consensus", type=kind.value, inliers=int(inliers.size), n_points=n)
    return RansacResult(primitive=fit.primitive, inliers=ids[inliers], fit=fit,
                        hypothesis_inliers=estimated, iterations=iters * len(types))


def detect_primitives(cloud: PointCloud, types: Iterable[TypeLabel] = FITTABLE_TYPES,
                      inlier_tol: float = 0.01, iters: int = 300, seed: int = 0,
                      min_points: int = 50, max_primitives: int = 16) -> DetectionResult:
    """
    Extract primitives one after another, removing each consensus set.

    Each round runs RANSAC per type and keeps the type with the largest
    refitted consensus; a simpler type wins unless a complex one has more
    than 2% extra inliers. Every point is finally assigned to its nearest
    detected primitive.
    """
    types = [t for t in FITTABLE_TYPES if t in [TypeLabel.parse(x) for x in types]]
    remaining = np.arange(len(cloud))
    detections: List[Detection] = []

    for round_no in range(max_primitives):
        if remaining.size < max(min_points, 3):
            break
        best = None
        for j, kind in enumerate(types):
            try:
                found = ransac_fit(cloud, remaining, [kind], inlier_tol, iters,
                                   seed=seed + 7919 * round_no + j,
                                   min_inliers=max(min_points, MIN_INLIERS[kind]))
            except (NoConsensusError, DegenerateInputError):
                continue
            if best is None or found.inliers.size > best.inliers.size * (1.0 + TYPE_PREFERENCE_MARGIN):
                best = found
        if best is None:
            break
        detections.append(Detection(best.primitive, best.inliers, best.fit.residual))
        remaining = np.setdiff1d(remaining, best.inliers, assume_unique=True)
        logger.info("Detected primitive", type=best.primitive.type.value,
                    inliers=int(best.inliers.size), remaining=int(remaining.size))

    if not detections:
        raise NoConsensusError("no consensus: no primitive detected", required=min_points)

    dist = np.column_stack([det.primitive.distance(cloud.positions) for det in detections])
    assignment = np.argmin(dist, axis=1)
    return DetectionResult(detections=detections, assignment=assignment, unassigned=remaining)
