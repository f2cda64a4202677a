"""Tests for the inequality-constrained filter"""
import numpy as np
import pytest
import scipy.linalg
from prometheus_client import REGISTRY

from popinfer.core.errors import InputError
from popinfer.services import constrained_kf as ckf
from popinfer.services.constrained_kf import (
    ConstraintSet,
    IterationControl,
    LinearConstraint,
    SmoothConstraint,
    StackedMeasurement,
    assemble_fusion,
    constrained_step,
    line_search_to_feasible,
    linearize,
    solve_equality_fusion,
)
from popinfer.services.kalman import GaussianEstimate, LinearModel, predict, update


def _solve(prior, z, model, constraints=ConstraintSet(), active=(), x_lin=None):
    problem = assemble_fusion(prior, z, model, constraints, active)
    x_lin = prior.mean if x_lin is None else x_lin
    return solve_equality_fusion(problem, linearize(problem.hc, x_lin), x_lin)


def _dense_oracle(prior, z, model, A, b):
    """Weighted least squares under A x = b, solved directly; returns (x, P)."""
    pred = predict(prior, model)
    P_inv = np.linalg.inv(pred.cov)
    R_inv = np.linalg.inv(model.R)
    W = P_inv + model.H.T @ R_inv @ model.H
    g = P_inv @ pred.mean + model.H.T @ R_inv @ np.atleast_1d(z)
    n, c = W.shape[0], A.shape[0]
    kkt = np.block([[W, A.T], [A, np.zeros((c, c))]])
    x = scipy.linalg.solve(kkt, np.concatenate([g, b]))[:n]
    Z = scipy.linalg.null_space(A) if c else np.eye(n)
    if Z.shape[1] == 0:
        return x, np.zeros((n, n))
    P = Z @ np.linalg.inv(Z.T @ W @ Z) @ Z.T
    return x, P


def _assert_covariance_healthy(P):
    norm = np.linalg.norm(P, 2)
    assert np.abs(P - P.T).max() <= 1e-10 * max(np.abs(P).max(), 1e-300)
    assert np.linalg.eigvalsh(P).min() >= -1e-8 * norm


# ── Linearization ──────────────────────────────────────────────────────────────

def test_linearize_linear_rows():
    hc = StackedMeasurement(np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(linearize(hc, [0.3, 0.2]), [[1, 0], [0, 1], [1, -1]])


def test_linearize_appends_active_constraint_rows():
    hc = StackedMeasurement(np.array([[1.0, -1.0]]), active=(LinearConstraint([1.0, 0.0]),))
    np.testing.assert_array_equal(linearize(hc, [0.3, 0.2]), [[1, 0], [0, 1], [1, -1], [1, 0]])


def test_linearize_nonlinear_equality():
    parabola = SmoothConstraint(lambda x: x[0] ** 2 - x[1], lambda x: np.array([2 * x[0], -1.0]), dim=2)
    hc = StackedMeasurement(np.zeros((0, 2)), equality=(parabola,))
    np.testing.assert_allclose(linearize(hc, [3.0, 9.0])[-1], [6.0, -1.0])


# ── Equality-constrained fusion ────────────────────────────────────────────────

def test_fusion_scalar_matches_kalman_update():
    model = LinearModel([[1.0]], [[0.0]], [[1.0]], [[1.0]])
    solution = _solve(GaussianEstimate([0.5], [[1.0]]), [1.5], model)
    np.testing.assert_allclose(solution.x, [1.0])
    np.testing.assert_allclose(solution.P, [[0.5]])


def test_fusion_with_equality_and_no_measurements():
    model = LinearModel(np.eye(2), np.zeros((2, 2)), np.zeros((0, 2)), np.zeros((0, 0)))
    constraints = ConstraintSet(equality=(LinearConstraint([1.0, 0.0]),))
    solution = _solve(GaussianEstimate([1.0, 1.0], np.eye(2)), [], model, constraints)
    np.testing.assert_allclose(solution.x, [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(solution.P, np.diag([0.0, 1.0]), atol=1e-12)


def test_fusion_ignores_duplicated_constraints():
    model = LinearModel(np.eye(2), np.zeros((2, 2)), np.array([[1.0, 1.0]]), [[0.5]])
    prior = GaussianEstimate([1.0, 2.0], np.eye(2))
    row = LinearConstraint([1.0, -1.0], 0.5)
    single = _solve(prior, [2.0], model, ConstraintSet(equality=(row,)))
    doubled = _solve(prior, [2.0], model, ConstraintSet(equality=(row, row)))
    np.testing.assert_allclose(doubled.x, single.x, atol=1e-9)
    np.testing.assert_allclose(doubled.P, single.P, atol=1e-9)


def test_fusion_matches_dense_qp_oracle(rng, random_gaussian_problem):
    for _ in range(200):
        prior, model, z = random_gaussian_problem()
        n = prior.dim
        c = int(rng.integers(0, n))
        A = rng.normal(size=(c, n))
        b = rng.normal(size=c)
        constraints = ConstraintSet(equality=tuple(LinearConstraint(A[i], b[i]) for i in range(c)))

        solution = _solve(prior, z, model, constraints, x_lin=rng.normal(size=n))
        x_oracle, P_oracle = _dense_oracle(prior, z, model, A, b)

        np.testing.assert_allclose(solution.x, x_oracle, atol=1e-6, rtol=1e-6)
        np.testing.assert_allclose(solution.P, P_oracle, atol=1e-6, rtol=1e-6)
        _assert_covariance_healthy(solution.P)


def test_rank_deficient_kkt_is_reported(mocker):
    before = REGISTRY.get_sample_value("popinfer_kkt_rank_deficient_total") or 0.0
    warn = mocker.patch.object(ckf.logger, "warning")
    # exact prediction and exact measurement that disagree
    model = LinearModel([[1.0]], [[0.0]], [[1.0]], [[0.0]])
    solution = _solve(GaussianEstimate([0.0], [[0.0]]), [1.0], model)

    np.testing.assert_allclose(solution.x, [0.5])
    warn.assert_called_once()
    assert warn.call_args.args[0] == "kkt_rank_deficient"
    assert REGISTRY.get_sample_value("popinfer_kkt_rank_deficient_total") == before + 1


# ── Line search ────────────────────────────────────────────────────────────────

def test_line_search_one_dimension():
    x_new, touched, t_max = line_search_to_feasible([0.2], [-0.1], ConstraintSet.nonnegative(1))
    assert t_max == pytest.approx(2 / 3)
    assert x_new.tolist() == [0.0]
    assert touched == {0}


def test_line_search_feasible_target():
    x_new, touched, t_max = line_search_to_feasible([0.2, 0.1], [0.4, 0.0], ConstraintSet.nonnegative(2))
    assert t_max == 1.0
    assert touched == frozenset()
    np.testing.assert_array_equal(x_new, [0.4, 0.0])


def test_line_search_takes_smallest_ratio():
    x_new, touched, t_max = line_search_to_feasible([0.3, 0.3], [-0.3, 0.9], ConstraintSet.nonnegative(2))
    assert t_max == pytest.approx(0.5)
    assert x_new[0] == 0.0
    assert x_new[1] == pytest.approx(0.6)
    assert touched == {0}


def test_line_search_rejects_infeasible_start():
    with pytest.raises(InputError):
        line_search_to_feasible([-0.1], [0.5], ConstraintSet.nonnegative(1))


def test_line_search_nonlinear_constraint():
    disc = SmoothConstraint(lambda x: 1.0 - x @ x, lambda x: -2 * x, dim=2)
    x_new, touched, t_max = line_search_to_feasible([0.0, 0.0], [2.0, 0.0], ConstraintSet(inequality=(disc,)))
    assert t_max == pytest.approx(0.5)
    np.testing.assert_allclose(x_new, [1.0, 0.0], atol=1e-9)
    assert touched == {0}


# ── Constrained step ───────────────────────────────────────────────────────────

def test_unconstrained_step_equals_kalman(random_gaussian_problem):
    for _ in range(1000):
        prior, model, z = random_gaussian_problem()
        result = constrained_step(prior, z, model, ConstraintSet())
        expected, innovation = update(predict(prior, model), z, model)

        scale = np.abs(expected.cov).max()
        np.testing.assert_allclose(result.estimate.mean, expected.mean, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(result.estimate.cov, expected.cov, rtol=1e-8, atol=1e-8 * scale)
        np.testing.assert_allclose(result.innovation.nu, innovation.nu, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(result.innovation.S, innovation.S, rtol=1e-12)
        assert result.active == frozenset()
        assert result.iterations <= 2


def test_interior_solution_ignores_constraints():
    prior = GaussianEstimate([5.0, 5.0], 0.1 * np.eye(2))
    model = LinearModel(np.eye(2), 0.01 * np.eye(2), [[1.0, 1.0]], [[0.1]])
    result = constrained_step(prior, [10.5], model, ConstraintSet.nonnegative(2))
    expected, _ = update(predict(prior, model), [10.5], model)
    np.testing.assert_allclose(result.estimate.mean, expected.mean, rtol=1e-8)
    np.testing.assert_allclose(result.estimate.cov, expected.cov, rtol=1e-8)
    assert result.t_max_min == 1.0


def test_step_clamps_coordinate_to_exact_zero():
    prior = GaussianEstimate([0.1, 0.5], np.eye(2))
    model = LinearModel(np.eye(2), np.zeros((2, 2)), [[1.0, 0.0]], [[0.01]])
    result = constrained_step(prior, [-1.0], model, ConstraintSet.nonnegative(2))

    assert result.estimate.mean[0] == 0.0
    assert result.estimate.mean[1] == pytest.approx(0.5)
    assert result.active == {0}
    assert result.t_max_min < 1.0
    _assert_covariance_healthy(result.estimate.cov)


def test_step_releases_constraint_when_solution_moves_inside():
    prior = GaussianEstimate([0.0, 0.5], np.eye(2))
    model = LinearModel(np.eye(2), np.zeros((2, 2)), [[1.0, 0.0]], [[0.01]])
    result = constrained_step(prior, [1.0], model, ConstraintSet.nonnegative(2), active={0})

    expected, _ = update(predict(prior, model), [1.0], model)
    assert result.active == frozenset()
    np.testing.assert_allclose(result.estimate.mean, expected.mean, rtol=1e-8)
    np.testing.assert_allclose(result.estimate.cov, expected.cov, rtol=1e-8, atol=1e-12)


def test_step_is_feasible_optimal_and_idempotent(rng, random_gaussian_problem):
    ctrl = IterationControl()
    for _ in range(300):
        prior, model, z = random_gaussian_problem()
        n = prior.dim
        prior = GaussianEstimate(np.abs(prior.mean) * rng.integers(0, 2, size=n), prior.cov)
        constraints = ConstraintSet.nonnegative(n)

        result = constrained_step(prior, 3 * z, model, constraints, ctrl=ctrl)
        x = result.estimate.mean
        assert x.min() >= -1e-12
        _assert_covariance_healthy(result.estimate.cov)

        if result.iterations == ctrl.max_iter:
            continue
        active = sorted(result.active)
        A = np.eye(n)[active]
        x_oracle, _ = _dense_oracle(prior, 3 * z, model, A, np.zeros(len(active)))
        np.testing.assert_allclose(x, x_oracle, atol=1e-6)

        again = _solve(prior, 3 * z, model, constraints, result.active, x_lin=x)
        assert np.max(np.abs(again.x - x)) <= 1e-8


@pytest.mark.parametrize("p", [0.1, 1.0, 10.0])
@pytest.mark.parametrize("z", np.linspace(-5.0, -0.5, 10))
def test_bound_coordinate_has_exactly_zero_variance(z, p):
    prior = GaussianEstimate([0.2], [[p]])
    model = LinearModel([[1.0]], [[0.0]], [[1.0]], [[0.1]])
    result = constrained_step(prior, [z], model, ConstraintSet.nonnegative(1))

    assert result.active == {0}
    assert result.estimate.mean[0] == 0.0
    assert result.estimate.cov[0, 0] == 0.0


def test_active_rows_and_columns_are_zeroed(rng, random_gaussian_problem):
    pinned = 0
    for _ in range(200):
        prior, model, z = random_gaussian_problem(n=3)
        prior = GaussianEstimate(np.abs(prior.mean), prior.cov)
        result = constrained_step(prior, 3 * z, model, ConstraintSet.nonnegative(3))
        P = result.estimate.cov
        for i in result.active:
            pinned += 1
            assert P[i, i] == 0.0
            assert not P[i].any() and not P[:, i].any()
        _assert_covariance_healthy(P)
    assert pinned > 0


def test_restrict_to_null_space_general_constraint():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    G = np.array([[1.0, 1.0]])
    restricted = ckf.restrict_to_null_space(P, G)
    np.testing.assert_allclose(G @ restricted, 0.0, atol=1e-12)
    assert np.array_equal(restricted, restricted.T)
    assert ckf.restrict_to_null_space(P, np.zeros((0, 2))) is P


def test_iteration_limit_is_logged(mocker):
    warning = mocker.patch.object(ckf.logger, "warning")
    prior = GaussianEstimate([0.1, 0.5], np.eye(2))
    model = LinearModel(np.eye(2), np.zeros((2, 2)), [[1.0, 0.0]], [[0.01]])
    result = constrained_step(prior, [-1.0], model, ConstraintSet.nonnegative(2), ctrl=IterationControl(max_iter=1))

    assert result.iterations == 1
    warning.assert_called_once()
    assert warning.call_args.args[0] == "constrained_step_not_converged"
    assert warning.call_args.kwargs["working_set_changed"] is True


def test_converged_step_logs_nothing(mocker):
    warning = mocker.patch.object(ckf.logger, "warning")
    prior = GaussianEstimate([0.1, 0.5], np.eye(2))
    model = LinearModel(np.eye(2), np.zeros((2, 2)), [[1.0, 0.0]], [[0.01]])
    constrained_step(prior, [-1.0], model, ConstraintSet.nonnegative(2))
    warning.assert_not_called()


def test_step_validates_inputs():
    prior = GaussianEstimate([0.5, 0.5], np.eye(2))
    model = LinearModel(np.eye(2), np.zeros((2, 2)), [[1.0, 1.0]], [[1.0]])
    with pytest.raises(InputError):
        constrained_step(prior, [1.0], model, ConstraintSet.nonnegative(2), active={5})
    with pytest.raises(InputError):
        constrained_step(prior, [1.0], model, ConstraintSet.nonnegative(3))
    with pytest.raises(InputError):
        IterationControl(tol=0.0)
    with pytest.raises(InputError):
        IterationControl(max_iter=0)


def test_nonnegative_subset_of_coordinates():
    constraints = ConstraintSet.nonnegative(3, coords=[0, 2])
    assert len(constraints.inequality) == 2
    np.testing.assert_array_equal(constraints.inequality[1].a, [0.0, 0.0, 1.0])
    assert constraints.linear
