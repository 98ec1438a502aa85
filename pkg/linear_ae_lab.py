"""
Numerical checks of the linear implicit-autoencoder analysis.

Clean data X (n x N) lies on an m-dimensional subspace L; the observed data
is X' = X + eps with noise columns in the orthogonal complement of L. The
implicit model regresses clean targets from noisy inputs, the standard model
reconstructs X' itself. The checks confirm that the implicit optimum recovers
L exactly while the standard optimum moves at the predicted rate.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.linalg import orthogonal_procrustes

from error_handlers import DegenerateInputError, NumericalError, ValidationError
from logger_config import get_logger

logger = get_logger(__name__)

PINV_RTOL = 1e-10
ORTHO_TOL = 1e-10
RANK_TOL = 1e-8
PROP1_TOL = 1e-8
FD_STEP = 1e-5
FD_TOL = 1e-4
EIGEN_GAP_TOL = 1e-6
CONTRAST_TOL = 1e-8
NEGATIVE_CONTROL_MIN = 1e-3
NEGATIVE_CONTROL_RATE = 0.95
ORDER_STEPS = (1e-4, 1e-5)
ORDER_DIRECTION_SCALE = 10.0


@dataclass
class LinearAEProblem:
    """Clean data on span(basis), noise, and X' = X + eps."""
    n: int
    m: int
    N: int
    basis: np.ndarray
    X: np.ndarray
    eps: np.ndarray
    noise_scale: float = 0.0
    seed: int = 0
    orthogonal_noise: bool = True

    @property
    def X_prime(self) -> np.ndarray:
        return self.X + self.eps

    @property
    def complement_projector(self) -> np.ndarray:
        return np.eye(self.n) - self.basis @ self.basis.T

    def with_noise(self, eps: np.ndarray) -> "LinearAEProblem":
        return LinearAEProblem(self.n, self.m, self.N, self.basis, self.X, eps,
                               self.noise_scale, self.seed, self.orthogonal_noise)

    def scaled(self, factor: float) -> "LinearAEProblem":
        """Problem with clean data and noise multiplied by ``factor``."""
        return LinearAEProblem(self.n, self.m, self.N, self.basis, factor * self.X, factor * self.eps,
                               factor * self.noise_scale, self.seed, self.orthogonal_noise)

    def check(self) -> None:
        if np.abs(self.basis.T @ self.basis - np.eye(self.m)).max() > ORTHO_TOL:
            raise ValidationError("basis columns are not orthonormal", field="basis")
        if self.orthogonal_noise and np.abs(self.basis.T @ self.eps).max() > ORTHO_TOL * max(1.0, np.abs(self.eps).max()):
            raise ValidationError("noise is not orthogonal to the data subspace", field="eps")
        sv = np.linalg.svd(self.X, compute_uv=False)
        if sv[self.m - 1] <= RANK_TOL:
            raise DegenerateInputError(f"clean data has rank below {self.m}",
                                       details={"sigma_m": float(sv[self.m - 1])})


@dataclass
class SubspaceDeviation:
    """D = Q1 - Q2 R* with R* the rotation aligning Q2 to Q1."""
    value: np.ndarray
    rotation: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.value))


@dataclass
class ClosedFormSolution:
    decoder: np.ndarray
    encoder: np.ndarray
    eigenvalues: np.ndarray
    objective: float


@dataclass
class Prop1Report:
    seed: int
    decoder_deviation: float
    encoder_deviation: float
    objective: float
    readings_deviation: float
    passed: bool
    skipped: bool = False
    reason: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class Prop2Report:
    seed: int
    probes: List[Dict[str, Any]] = field(default_factory=list)
    max_fd_error: float = float("nan")
    max_contrast_deviation: float = float("nan")
    passed: bool = False
    skipped: bool = False
    reason: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def make_problem(n: int, m: int, N: int, noise_scale: float = 0.5, seed: int = 0,
                 orthogonal_noise: bool = True) -> LinearAEProblem:
    """
    Random problem instance.

    Args:
        n: Ambient dimension
        m: Subspace dimension (N > n > m >= 1)
        N: Number of samples
        noise_scale: Standard deviation of the Gaussian noise before projection
        seed: Generator seed
        orthogonal_noise: Project the noise onto the complement of L; False builds the negative control
    """
    if not (N > n > m >= 1):
        raise ValidationError(f"dimensions need N > n > m >= 1, got N={N}, n={n}, m={m}", field="ae_n")
    if noise_scale < 0:
        raise ValidationError("noise scale must be >= 0", field="ae_noise")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(n, m)))
    X = basis @ rng.normal(size=(m, N))
    noise = noise_scale * rng.normal(size=(n, N))
    eps = noise - basis @ (basis.T @ noise) if orthogonal_noise else noise
    problem = LinearAEProblem(n, m, N, basis, X, eps, noise_scale, seed, orthogonal_noise)
    problem.check()
    return problem


def top_eigenvectors(c: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Top-m eigenpairs of a symmetric matrix, eigenvalues descending."""
    c = 0.5 * (c + c.T)
    n = c.shape[0]
    try:
        w, v = scipy.linalg.eigh(c, subset_by_index=[n - m, n - 1])
    except scipy.linalg.LinAlgError as e:
        raise NumericalError(f"eigen-decomposition failed: {e}", solver="eigh")
    return w[::-1], v[:, ::-1]


def deviation(q1: np.ndarray, q2: np.ndarray) -> SubspaceDeviation:
    """Deviation between two orthonormal frames after the best orthogonal alignment of q2."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise ValidationError(f"frame shapes differ: {q1.shape} vs {q2.shape}", field="q2")
    eye = np.eye(q1.shape[1])
    for name, q in (("q1", q1), ("q2", q2)):
        if np.abs(q.T @ q - eye).max() > 1e-8:
            raise ValidationError(f"{name} does not have orthonormal columns", field=name)
    rotation, _ = orthogonal_procrustes(q2, q1)
    return SubspaceDeviation(value=q1 - q2 @ rotation, rotation=rotation)


def polar_factor(b: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal columns."""
    u, _, vt = np.linalg.svd(b, full_matrices=False)
    return u @ vt


def iae_objective(decoder: np.ndarray, encoder: np.ndarray, problem: LinearAEProblem) -> float:
    """sum_k |R B^T x'_k - x_k|^2."""
    residual = decoder @ (encoder.T @ problem.X_prime) - problem.X
    return float(np.sum(residual * residual))


def solve_iae_closed_form(problem: LinearAEProblem) -> ClosedFormSolution:
    """
    Optimal linear implicit autoencoder.

    The decoder R* holds the top-m eigenvectors of
    (X' X^T)^T (X' X'^T)^+ (X' X^T); the encoder is B* = (X' X'^T)^+ (X' X^T) R*.
    The pseudoinverse drops singular values below 1e-10 of the largest.
    """
    xp = problem.X_prime
    cross = xp @ problem.X.T
    gram_pinv = scipy.linalg.pinv(xp @ xp.T, atol=0.0, rtol=PINV_RTOL)
    explained = cross.T @ gram_pinv @ cross
    w, decoder = top_eigenvectors(explained, problem.m)
    encoder = gram_pinv @ cross @ decoder
    return ClosedFormSolution(decoder=decoder, encoder=encoder, eigenvalues=w,
                              objective=iae_objective(decoder, encoder, problem))


def clean_eigenbasis(problem: LinearAEProblem) -> Tuple[np.ndarray, np.ndarray]:
    """Top-m eigenpairs of C = X X^T."""
    return top_eigenvectors(problem.X @ problem.X.T, problem.m)


def mixed_eigenbasis(problem: LinearAEProblem) -> np.ndarray:
    """Orthonormalized top-m eigenvectors of the non-symmetric X X'^T."""
    w, v = np.linalg.eig(problem.X @ problem.X_prime.T)
    order = np.argsort(-w.real, kind="stable")[:problem.m]
    q, _ = np.linalg.qr(v[:, order].real)
    return q


def verify_prop1(problem: LinearAEProblem) -> Prop1Report:
    """
    The implicit optimum spans the clean principal subspace.

    Both the decoder and the polar factor of the encoder must lie within
    1e-8 of the top-m eigenvectors of X X^T.
    """
    lam, q = clean_eigenbasis(problem)
    if lam[-1] <= RANK_TOL * max(lam[0], 1.0):
        return Prop1Report(problem.seed, np.nan, np.nan, np.nan, np.nan, passed=False, skipped=True,
                           reason=f"spectral gap failure: lambda_m = {lam[-1]:.3g}")
    solution = solve_iae_closed_form(problem)
    decoder_dev = deviation(solution.decoder, q).norm
    encoder_dev = deviation(polar_factor(solution.encoder), q).norm
    readings_dev = deviation(mixed_eigenbasis(problem), q).norm
    if readings_dev > 1e-6:
        logger.warning("Covariance readings diverge", seed=problem.seed, deviation=readings_dev)
    passed = decoder_dev < PROP1_TOL and encoder_dev < PROP1_TOL
    return Prop1Report(problem.seed, decoder_dev, encoder_dev, solution.objective, readings_dev, passed)


# ---------------------------------------------------------------- derivative of the standard AE subspace

def _eigen_gap_ok(problem: LinearAEProblem) -> Tuple[bool, str]:
    c = problem.X @ problem.X.T
    w = scipy.linalg.eigvalsh(0.5 * (c + c.T))[::-1][:problem.m + 1]
    scale = max(w[0], 1.0)
    if w[problem.m - 1] <= RANK_TOL * scale:
        return False, "lambda_m vanishes"
    gaps = -np.diff(w[:problem.m])
    if gaps.size and gaps.min() <= EIGEN_GAP_TOL * scale:
        return False, "eigenvalue collision among the top m"
    return True, ""


def standard_ae_basis(problem: LinearAEProblem, eps: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Top-m eigenvectors of C' = X' X'^T for the given noise, column signs matched to ``reference``."""
    xp = problem.X + eps
    _, q_hat = top_eigenvectors(xp @ xp.T, problem.m)
    signs = np.sign(np.sum(q_hat * reference, axis=0))
    signs[signs == 0] = 1.0
    return q_hat * signs


def analytic_derivative(problem: LinearAEProblem, k: int, direction: np.ndarray) -> np.ndarray:
    """(I - Q Q^T)(d x_k^T) Q Lambda^+ at eps = 0, for noise added to column k along ``direction``."""
    lam, q = clean_eigenbasis(problem)
    lam_pinv = np.where(lam > RANK_TOL * max(lam[0], 1.0), 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    outer = np.outer(d, problem.X[:, k])
    return (outer - q @ (q.T @ outer)) @ q * lam_pinv


def _directional_derivative(problem: LinearAEProblem, v: np.ndarray) -> np.ndarray:
    lam, q = clean_eigenbasis(problem)
    m = (v @ problem.X.T) @ q
    return (m - q @ (q.T @ m)) / lam


def _fd_derivative(problem: LinearAEProblem, v: np.ndarray, h: float) -> np.ndarray:
    _, q = clean_eigenbasis(problem)
    plus = deviation(standard_ae_basis(problem, h * v, q), q).value
    minus = deviation(standard_ae_basis(problem, -h * v, q), q).value
    return (plus - minus) / (2.0 * h)


def verify_prop2(problem: LinearAEProblem, probes: int = 50, h: float = FD_STEP,
                 seed: Optional[int] = None) -> Prop2Report:
    """
    Finite-difference check of the standard-AE subspace derivative at eps = 0.

    Each probe perturbs one noise column k along e_i projected onto the
    complement of L. The analytic derivative must match the central
    difference to a relative error below 1e-4, and the implicit optimum at
    problem.eps + h * probe must stay within 1e-8 of the clean subspace.
    """
    report = Prop2Report(seed=problem.seed)
    ok, reason = _eigen_gap_ok(problem)
    if not ok:
        report.skipped, report.reason = True, reason
        logger.warning("Skipped derivative check", seed=problem.seed, reason=reason)
        return report

    _, q = clean_eigenbasis(problem)
    rng = np.random.default_rng(problem.seed if seed is None else seed)
    projector = problem.complement_projector
    fd_errors, contrasts = [], []
    while len(report.probes) < probes:
        k = int(rng.integers(0, problem.N))
        i = int(rng.integers(0, problem.n))
        direction = projector[:, i]
        if np.linalg.norm(direction) < 1e-12:
            continue
        v = np.zeros((problem.n, problem.N))
        v[:, k] = direction

        analytic = analytic_derivative(problem, k, np.eye(problem.n)[i])
        numeric = _fd_derivative(problem, v, h)
        err = float(np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-300))

        shifted = solve_iae_closed_form(problem.with_noise(problem.eps + h * v))
        contrast = deviation(shifted.decoder, q).norm

        fd_errors.append(err)
        contrasts.append(contrast)
        report.probes.append({"k": k, "i": i, "fd_error": err, "iae_deviation": contrast})

    report.max_fd_error = float(max(fd_errors))
    report.max_contrast_deviation = float(max(contrasts))
    report.passed = report.max_fd_error < FD_TOL and report.max_contrast_deviation < CONTRAST_TOL
    return report


def convergence_order(problem: LinearAEProblem, steps: Tuple[float, float] = ORDER_STEPS,
                      seed: Optional[int] = None) -> float:
    """
    Observed order of the central difference along a random noise direction.

    The direction is Gaussian, projected onto the complement of L and
    scaled to spectral norm 10 sqrt(lambda_m), so truncation error dominates
    rounding at both steps.
    """
    ok, reason = _eigen_gap_ok(problem)
    if not ok:
        raise DegenerateInputError(f"convergence order undefined: {reason}")
    lam, _ = clean_eigenbasis(problem)
    rng = np.random.default_rng(problem.seed if seed is None else seed)
    v = problem.complement_projector @ rng.normal(size=(problem.n, problem.N))
    v *= ORDER_DIRECTION_SCALE * np.sqrt(lam[-1]) / np.linalg.norm(v, 2)
    analytic = _directional_derivative(problem, v)
    errors = [np.linalg.norm(_fd_derivative(problem, v, h) - analytic) for h in steps]
    return float(np.log(errors[0] / errors[1]) / np.log(steps[0] / steps[1]))


# ---------------------------------------------------------------- runs

def run_ae_verification(n: int = 20, m: int = 4, N: int = 200, noise_scale: float = 0.5,
                        trials: int = 100, seed: int = 0, probes: int = 50) -> Dict[str, Any]:
    """
    Randomized suite: implicit-optimum trials, the non-orthogonal control,
    the derivative check and its convergence order.

    Trials whose spectral gap fails are resampled with fresh seeds. The control
    reruns every accepted seed with non-orthogonal noise and must move the
    encoder past 1e-3 in at least 95% of them.

    Returns:
        JSON-ready report with per-trial seeds and deviations, max_fd_error and pass
    """
    prop1: List[Prop1Report] = []
    next_seed = seed
    attempts = 0
    while len(prop1) < trials:
        attempts += 1
        if attempts > 10 * trials:
            raise DegenerateInputError("too many degenerate trials", details={"trials": trials})
        result = verify_prop1(make_problem(n, m, N, noise_scale, next_seed))
        next_seed += 1
        if result.skipped:
            logger.info("Resampling degenerate trial", seed=result.seed, reason=result.reason)
            continue
        prop1.append(result)

    controls = [verify_prop1(make_problem(n, m, N, noise_scale if noise_scale > 0 else 0.5, r.seed,
                                          orthogonal_noise=False))
                for r in prop1]
    exceed_count = sum(1 for c in controls if c.encoder_deviation > NEGATIVE_CONTROL_MIN)
    exceed_rate = exceed_count / len(controls)
    control_failed = exceed_rate >= NEGATIVE_CONTROL_RATE

    prop2 = verify_prop2(make_problem(n, m, N, noise_scale, seed), probes=probes)
    order = convergence_order(make_problem(n, m, N, noise_scale, seed))

    passed = all(r.passed for r in prop1) and control_failed and prop2.passed
    report = {
        "dimensions": {"n": n, "m": m, "N": N, "noise": noise_scale},
        "trial_seeds": [r.seed for r in prop1],
        "deviations": [r.decoder_deviation for r in prop1],
        "encoder_deviations": [r.encoder_deviation for r in prop1],
        "readings_deviation_max": max(r.readings_deviation for r in prop1),
        "prop1_pass_rate": float(np.mean([r.passed for r in prop1])),
        "negative_control": {"encoder_deviations": [c.encoder_deviation for c in controls],
                             "min_encoder_deviation": min(c.encoder_deviation for c in controls),
                             "exceed_count": exceed_count,
                             "exceed_rate": exceed_rate,
                             "exceeds_threshold": control_failed},
        "max_fd_error": prop2.max_fd_error,
        "max_iae_deviation_under_probe": prop2.max_contrast_deviation,
        "prop2_skipped": prop2.skipped,
        "convergence_order": order,
        "pass": bool(passed),
    }
    logger.info("Linear AE verification", trials=trials, passed=passed,
                max_fd_error=prop2.max_fd_error, convergence_order=order)
    return report


def summarize(report: Dict[str, Any]) -> str:
    """Human-readable summary of run_ae_verification output."""
    dims = report["dimensions"]
    lines = [
        f"linear AE check n={dims['n']} m={dims['m']} N={dims['N']} noise={dims['noise']}",
        f"  implicit optimum: {len(report['trial_seeds'])} trials, pass rate {report['prop1_pass_rate']:.2f}, "
        f"max deviation {max(report['deviations']):.3e}",
        f"  non-orthogonal control: {report['negative_control']['exceed_count']}/{len(report['trial_seeds'])} trials "
        f"above {NEGATIVE_CONTROL_MIN:g}, min encoder deviation {report['negative_control']['min_encoder_deviation']:.3e}",
        f"  derivative: max relative FD error {report['max_fd_error']:.3e}, "
        f"observed order {report['convergence_order']:.2f}",
        f"  pass: {report['pass']}",
    ]
    return "\n".join(lines)
