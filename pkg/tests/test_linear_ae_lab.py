import numpy as np
import pytest

from error_handlers import ValidationError
from linear_ae_lab import (NEGATIVE_CONTROL_MIN, analytic_derivative, clean_eigenbasis, convergence_order,
                           deviation, iae_objective, make_problem, polar_factor, run_ae_verification,
                           solve_iae_closed_form, summarize, verify_prop1, verify_prop2)


def test_problem_noise_is_orthogonal():
    problem = make_problem(20, 4, 200, noise_scale=0.5, seed=1)
    assert np.abs(problem.basis.T @ problem.eps).max() < 1e-10
    assert np.linalg.matrix_rank(problem.X) == 4


def test_problem_dimensions_validated():
    with pytest.raises(ValidationError):
        make_problem(20, 4, 10)
    with pytest.raises(ValidationError):
        make_problem(4, 4, 100)


def test_deviation_ignores_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(10, 3)))
    r, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert deviation(q, q @ r).norm < 1e-12


def test_polar_factor_is_orthonormal(rng):
    p = polar_factor(rng.normal(size=(8, 3)))
    np.testing.assert_allclose(p.T @ p, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_implicit_optimum_spans_clean_subspace(seed):
    report = verify_prop1(make_problem(20, 4, 200, noise_scale=0.5, seed=seed))
    assert report.passed, report.to_dict()
    assert report.decoder_deviation < 1e-8
    assert report.encoder_deviation < 1e-8


def test_closed_form_reconstructs_clean_data():
    problem = make_problem(20, 4, 200, noise_scale=0.5, seed=3)
    solution = solve_iae_closed_form(problem)
    assert solution.objective < 1e-12 * np.sum(problem.X ** 2)


def test_unprojected_noise_breaks_the_encoder():
    report = verify_prop1(make_problem(20, 4, 200, noise_scale=0.5, seed=0, orthogonal_noise=False))
    assert report.encoder_deviation > NEGATIVE_CONTROL_MIN


def test_analytic_derivative_matches_finite_differences():
    report = verify_prop2(make_problem(20, 4, 200, noise_scale=0.5, seed=0), probes=10)
    assert not report.skipped
    assert report.max_fd_error < 1e-4
    assert report.max_contrast_deviation < 1e-8
    assert report.passed


def test_central_difference_is_second_order():
    order = convergence_order(make_problem(20, 4, 200, noise_scale=0.5, seed=0))
    assert 1.8 <= order <= 2.2


@pytest.mark.slow
def test_full_verification_run():
    report = run_ae_verification(trials=100, probes=50)
    assert report["pass"]
    assert report["prop1_pass_rate"] == 1.0
    assert report["negative_control"]["exceed_count"] >= 95


def test_short_verification_run():
    report = run_ae_verification(trials=3, probes=5, seed=7)
    assert report["pass"]
    assert len(report["trial_seeds"]) == 3
    # the non-orthogonal control reruns every accepted seed
    assert len(report["negative_control"]["encoder_deviations"]) == 3
    assert report["negative_control"]["exceed_count"] == 3
    assert report["negative_control"]["exceed_rate"] == 1.0
    assert "pass: True" in summarize(report)

def test_doubling_the_data_quadruples_lambda():
    problem = make_problem(20, 4, 200, noise_scale=0.5, seed=2)
    doubled = problem.scaled(2.0)
    lam, q = clean_eigenbasis(problem)
    lam2, q2 = clean_eigenbasis(doubled)
    np.testing.assert_allclose(lam2, 4.0 * lam, rtol=1e-10)
    assert deviation(q, q2).norm < 1e-10

    # x_k doubles and Lambda^+ quarters, so the derivative halves; eigenvector signs may flip
    direction = problem.complement_projector[:, 5]
    base = analytic_derivative(problem, 17, direction)
    np.testing.assert_allclose(np.abs(analytic_derivative(doubled, 17, direction)), 0.5 * np.abs(base),
                               rtol=1e-8, atol=1e-14)
    assert verify_prop1(doubled).passed


def test_deviation_beats_every_other_rotation(rng):
    q1, _ = np.linalg.qr(rng.normal(size=(12, 4)))
    q2, _ = np.linalg.qr(rng.normal(size=(12, 4)))
    best = deviation(q1, q2).norm
    for _ in range(50):
        r, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert np.linalg.norm(q1 - q2 @ r) >= best - 1e-12


def test_closed_form_beats_random_pairs(rng):
    # unprojected noise leaves a non-zero optimum to compete against
    problem = make_problem(12, 3, 80, noise_scale=0.5, seed=4, orthogonal_noise=False)
    solution = solve_iae_closed_form(problem)
    assert solution.objective > 0.0
    floor = solution.objective * (1.0 - 1e-9)
    for _ in range(25):
        decoder = rng.normal(size=(12, 3))
        encoder = rng.normal(size=(12, 3))
        assert iae_objective(decoder, encoder, problem) >= floor
        nudged_decoder = solution.decoder + 1e-3 * rng.normal(size=(12, 3))
        nudged_encoder = solution.encoder + 1e-3 * rng.normal(size=(12, 3))
        assert iae_objective(nudged_decoder, nudged_encoder, problem) >= floor


def test_noise_free_problem():
    problem = make_problem(20, 4, 200, noise_scale=0.0, seed=6)
    assert np.abs(problem.eps).max() == 0.0
    report = verify_prop1(problem)
    assert report.passed, report.to_dict()
    assert solve_iae_closed_form(problem).objective < 1e-12 * np.sum(problem.X ** 2)
    assert verify_prop2(problem, probes=5).passed
