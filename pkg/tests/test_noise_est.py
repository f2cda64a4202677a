"""Tests for windowed covariance matching"""
import numpy as np
import pytest

from popinfer.core.errors import InputError, NoiseNotReadyError
from popinfer.schemas import NoiseConfig
from popinfer.services.kalman import GaussianEstimate, LinearModel, predict, update
from popinfer.services.noise_est import (
    CovarianceMatcher,
    ResidualHistory,
    estimate_Q,
    estimate_R,
    fallback_noise,
    project_psd,
)


def _filled(window, nus, predicted=0.0):
    hist = ResidualHistory(window)
    for nu in nus:
        # H = 1, so H P H' equals the given P
        hist.push([nu], [[1.0]], [[predicted]])
    return hist


# ── Residual history ───────────────────────────────────────────────────────────

def test_history_reports_not_ready_until_full():
    hist = _filled(10, [1.0] * 9)
    assert not hist.full
    with pytest.raises(NoiseNotReadyError):
        estimate_R(hist)
    hist.push([1.0], [[1.0]], [[0.0]])
    assert hist.full and len(hist) == 10


def test_history_keeps_only_the_window():
    hist = _filled(3, [1.0, 2.0, 3.0, 4.0])
    assert len(hist) == 3
    np.testing.assert_allclose(hist.empirical_S(), [[(4 + 9 + 16) / 2]])


def test_history_validation():
    with pytest.raises(InputError):
        ResidualHistory(1)
    with pytest.raises(InputError):
        ResidualHistory(5).push([1.0], [[1.0, 0.0]], [[1.0]])


# ── R estimate ─────────────────────────────────────────────────────────────────

def test_estimate_R_constant_residual():
    c = 0.7
    np.testing.assert_allclose(estimate_R(_filled(10, [c] * 10)), [[10 * c ** 2 / 9]])


def test_estimate_R_clamps_to_floor():
    # raw estimate: 0.1 * 10 / 9 - 0.4 * 10 / 9 < 0
    hist = _filled(10, [np.sqrt(0.1)] * 10, predicted=0.4)
    np.testing.assert_allclose(estimate_R(hist), [[1e-8]])


def test_estimate_R_monte_carlo(rng):
    hist = _filled(500, rng.normal(0.0, np.sqrt(2.0), size=500), predicted=1.0)
    assert 0.6 <= estimate_R(hist)[0, 0] <= 1.4


# ── Q estimate ─────────────────────────────────────────────────────────────────

def test_estimate_Q_scalar():
    Q = estimate_Q(S=[[3.0]], H=[[1.0]], F=[[1.0]], P_prev=[[1.0]], R=[[1.0]])
    np.testing.assert_allclose(Q, [[1.0]])


def test_estimate_Q_rank_one_measurement():
    H = np.array([[1.0, 1.0]])
    S = np.array([[2.0]])
    zeros = np.zeros((2, 2))
    full = estimate_Q(S, H, np.eye(2), zeros, [[0.0]], diagonal=False)
    np.testing.assert_allclose(full, [[0.5, 0.5], [0.5, 0.5]], atol=1e-7)
    diagonal = estimate_Q(S, H, np.eye(2), zeros, [[0.0]])
    np.testing.assert_allclose(diagonal, np.diag([0.5, 0.5]), atol=1e-12)
    assert diagonal[0, 1] == 0.0 and diagonal[1, 0] == 0.0


def test_estimate_Q_zero_excess():
    Q = estimate_Q(S=[[2.0]], H=[[1.0, -1.0]], F=np.eye(2), P_prev=0.5 * np.eye(2), R=[[1.0]])
    np.testing.assert_array_equal(Q, np.zeros((2, 2)))


def test_estimate_Q_negative_diagonal_floored():
    Q = estimate_Q(S=[[0.5]], H=[[1.0]], F=[[1.0]], P_prev=[[1.0]], R=[[1.0]], floor=1e-8)
    np.testing.assert_allclose(Q, [[1e-8]])


def test_project_psd_keeps_zeros_when_asked():
    M = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3 and -1
    repaired = project_psd(M, floor=1e-8, clamp_zero=False)
    assert np.linalg.eigvalsh(repaired).min() >= 0
    np.testing.assert_array_equal(project_psd(np.zeros((2, 2)), clamp_zero=False), np.zeros((2, 2)))
    np.testing.assert_allclose(np.linalg.eigvalsh(project_psd(np.zeros((2, 2)))), [1e-8, 1e-8])


# ── Consistency on a well-specified filter ─────────────────────────────────────

def _random_walk_residuals(rng, q, r, steps, window):
    """Run a scalar random-walk filter with the true noise; yield (history, prior) per step."""
    model = LinearModel([[1.0]], [[q]], [[1.0]], [[r]])
    x_true = 0.0
    estimate = GaussianEstimate([0.0], [[1.0]])
    hist = ResidualHistory(window)
    for _ in range(steps):
        x_true += rng.normal(0.0, np.sqrt(q))
        z = x_true + rng.normal(0.0, np.sqrt(r))
        pred = predict(estimate, model)
        posterior, innovation = update(pred, [z], model)
        hist.push(innovation.nu, model.H, pred.cov)
        yield hist, estimate
        estimate = posterior


def test_R_estimate_consistent(rng):
    estimates = [
        estimate_R(hist)[0, 0]
        for hist, _ in _random_walk_residuals(rng, q=0.01, r=1.0, steps=2000, window=50)
        if hist.full
    ]
    assert np.mean(estimates) == pytest.approx(1.0, rel=0.3)


def test_Q_estimate_consistent(rng):
    averages = []
    for _ in range(10):
        estimates = []
        for hist, prior in _random_walk_residuals(rng, q=1.0, r=0.1, steps=2000, window=50):
            if hist.full:
                estimates.append(
                    estimate_Q(hist.empirical_S(), [[1.0]], [[1.0]], prior.cov, [[0.1]])[0, 0]
                )
        averages.append(np.mean(estimates))
    assert np.mean(averages) == pytest.approx(1.0, rel=0.3)


# ── Fallback and matcher ───────────────────────────────────────────────────────

def test_fallback_noise_from_warmup_increments():
    R0, Q0 = fallback_noise([1.0, -1.0, 1.0, -1.0], dim=3)
    np.testing.assert_allclose(R0, [[4 / 3]])
    np.testing.assert_allclose(Q0, 1e-4 * 4 / 3 * np.eye(3))


def test_fallback_noise_undefined_variance_and_override():
    R0, _ = fallback_noise([0.5], dim=1)
    np.testing.assert_array_equal(R0, [[1.0]])
    R0, Q0 = fallback_noise([1.0, -1.0], dim=2, config=NoiseConfig(r0=2.0, q0_scale=0.5))
    np.testing.assert_array_equal(R0, [[2.0]])
    np.testing.assert_array_equal(Q0, np.eye(2))


def test_matcher_holds_fallback_until_window_full():
    R0, Q0 = np.array([[1.0]]), np.array([[1e-4]])
    matcher = CovarianceMatcher(3, R0, Q0)
    for _ in range(2):
        R, Q = matcher.observe([0.5], [[1.0]], [[0.1]], [[1.0]], [[0.1]])
        assert R is R0 and Q is Q0
    R, Q = matcher.observe([0.5], [[1.0]], [[0.1]], [[1.0]], [[0.1]])
    # 3 * 0.25 / 2 - 3 * 0.1 / 2
    np.testing.assert_allclose(R, [[0.225]])
    assert Q.shape == (1, 1)


def test_matcher_update_cadence():
    matcher = CovarianceMatcher(2, [[1.0]], [[1e-4]], NoiseConfig(update_every=3))
    history = []
    for nu in [1.0, 1.0, 2.0, 3.0, 4.0]:
        R, _ = matcher.observe([nu], [[1.0]], [[0.0]], [[1.0]], [[0.0]])
        history.append(float(R[0, 0]))
    # re-estimated when the window fills (step 2) and three steps later (step 5)
    assert history[1] == pytest.approx(2.0)
    assert history[2] == history[1] and history[3] == history[1]
    assert history[4] == pytest.approx(9 + 16)
