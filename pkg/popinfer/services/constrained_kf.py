"""Inequality-constrained recursive estimator.

Each timestep fuses the state prediction (as a pseudo-measurement), the
real measurement, the equality constraints and the currently active
inequality constraints into one equality-constrained least-squares
problem, solved through the pseudo-inverse of its KKT matrix:

    [ Rc   Hc ]+ [ zc - hc(x_lin) + Hc x_lin ]
    [ Hc'  0  ]  [ 0                         ]

The bottom block of the solution is the state, the top block holds the
Lagrange multipliers. Inequality constraints are handled with an active
set: after each solve the iterate moves from the previous iterate toward
the solution until it touches a constraint, which then becomes active for
the next solve. An active constraint whose multiplier turns negative is
released again.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize

from popinfer.core.errors import DimensionError, InputError, NumericalError
from popinfer.core.logging import get_logger
from popinfer.metrics import KKT_RANK_DEFICIENT
from popinfer.services.kalman import (
    GaussianEstimate,
    Innovation,
    LinearModel,
    measurement_prediction,
    predict,
    symmetrize,
)

logger = get_logger(__name__)

# Singular values below PINV_RTOL * sigma_max are treated as zero.
PINV_RTOL = 1e-12
# Constraint values down to -FEASIBILITY_TOL count as satisfied.
FEASIBILITY_TOL = 1e-12
# Relative threshold for releasing an active constraint.
MULTIPLIER_TOL = 1e-9

ActiveSet = FrozenSet[int]


# ── Constraints ────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class LinearConstraint:
    """l(x) = a . x - b"""

    a: np.ndarray
    b: float = 0.0
    linear: bool = field(default=True, init=False)

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).ravel())

    @property
    def dim(self) -> int:
        return self.a.size

    def value(self, x: np.ndarray) -> float:
        return float(self.a @ x - self.b)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.a

    def project(self, x: np.ndarray) -> np.ndarray:
        """Closest point of the hyperplane l(x) = 0."""
        return x - self.a * (self.value(x) / float(self.a @ self.a))

    def padded(self, total_dim: int) -> "LinearConstraint":
        a = np.zeros(total_dim)
        a[:self.dim] = self.a
        return LinearConstraint(a, self.b)


@dataclass(frozen=True, eq=False)
class SmoothConstraint:
    """Nonlinear constraint given by a function and its gradient."""

    fn: Callable[[np.ndarray], float]
    jac: Callable[[np.ndarray], np.ndarray]
    dim: int
    linear: bool = field(default=False, init=False)

    def value(self, x: np.ndarray) -> float:
        return float(self.fn(x))

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.jac(x), dtype=float).ravel()

    def project(self, x: np.ndarray) -> np.ndarray:
        return x

    def padded(self, total_dim: int) -> "SmoothConstraint":
        n = self.dim

        def fn(x):
            return self.fn(x[:n])

        def jac(x):
            row = np.zeros(total_dim)
            row[:n] = self.jacobian(x[:n])
            return row

        return SmoothConstraint(fn, jac, total_dim)


@dataclass(frozen=True)
class ConstraintSet:
    """Equality constraints e(x) = 0 and inequality constraints l(x) >= 0."""

    equality: Tuple = ()
    inequality: Tuple = ()

    @classmethod
    def nonnegative(cls, dim: int, coords: Optional[Iterable[int]] = None) -> "ConstraintSet":
        """x_i >= 0 for every listed coordinate (all by default)."""
        coords = range(dim) if coords is None else coords
        return cls(inequality=tuple(LinearConstraint(np.eye(dim)[i]) for i in coords))

    @property
    def linear(self) -> bool:
        return all(c.linear for c in (*self.equality, *self.inequality))

    def check_dim(self, n: int) -> None:
        for c in (*self.equality, *self.inequality):
            if c.dim != n:
                raise DimensionError(f"constraint acts on dimension {c.dim}, state has {n}")

    def violations(self, x: np.ndarray) -> Sequence[int]:
        return [i for i, c in enumerate(self.inequality) if c.value(x) < -FEASIBILITY_TOL]


@dataclass(frozen=True)
class IterationControl:
    tol: float = 1e-9
    max_iter: int = 20

    def __post_init__(self):
        if self.tol <= 0:
            raise InputError(f"convergence bound must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise InputError(f"max_iter must be >= 1, got {self.max_iter}")


# ── Fusion problem ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class StackedMeasurement:
    """hc(x) = [x; H x; e(x); l_a(x)] with its Jacobian."""

    H: np.ndarray
    equality: Tuple = ()
    active: Tuple = ()

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        constraint_values = [c.value(x) for c in (*self.equality, *self.active)]
        return np.concatenate([x, self.H @ x, np.asarray(constraint_values, dtype=float)])

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        rows = [np.eye(self.state_dim), self.H]
        rows += [np.atleast_2d(c.jacobian(x)) for c in (*self.equality, *self.active)]
        return np.vstack(rows)


@dataclass(frozen=True, eq=False)
class FusionProblem:
    """Stacked pseudo-measurement zc, stacked function hc and block-diagonal Rc.

    Row order: prediction, measurement, equality, active inequality.
    """

    zc: np.ndarray
    hc: StackedMeasurement
    Rc: np.ndarray
    active: Tuple[int, ...] = ()

    @property
    def state_dim(self) -> int:
        return self.hc.state_dim

    @property
    def measurement_dim(self) -> int:
        return self.hc.H.shape[0]

    @property
    def constraint_rows(self) -> int:
        return len(self.hc.equality) + len(self.hc.active)


def assemble_fusion(
    prior: GaussianEstimate,
    z,
    model: LinearModel,
    constraints: ConstraintSet,
    active: Iterable[int] = (),
) -> FusionProblem:
    """Build zc, hc and Rc for one timestep and one active set."""
    pred = predict(prior, model)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (model.measurement_dim,):
        raise DimensionError(f"measurement shape {z.shape} does not match {model.measurement_dim} rows")

    order = tuple(sorted(active))
    active_constraints = tuple(constraints.inequality[i] for i in order)
    n, p = model.state_dim, model.measurement_dim
    n_con = len(constraints.equality) + len(order)

    zc = np.concatenate([pred.mean, z, np.zeros(n_con)])
    size = n + p + n_con
    # constraint rows keep exactly zero noise
    Rc = np.zeros((size, size))
    Rc[:n, :n] = pred.cov
    Rc[n:n + p, n:n + p] = model.R

    hc = StackedMeasurement(model.H, tuple(constraints.equality), active_constraints)
    return FusionProblem(zc, hc, Rc, order)


def linearize(hc: StackedMeasurement, x_lin: np.ndarray) -> np.ndarray:
    """Stacked Jacobian Hc = [I; H; grad e; grad l_a] at x_lin."""
    return hc.jacobian(np.asarray(x_lin, dtype=float))


@dataclass(frozen=True, eq=False)
class FusionSolution:
    x: np.ndarray
    P: np.ndarray
    multipliers: np.ndarray
    rank: int


def solve_equality_fusion(problem: FusionProblem, Hc: np.ndarray, x_lin: np.ndarray) -> FusionSolution:
    """Equality-constrained fusion through the KKT pseudo-inverse.

    x = [0 I] KKT+ [zc - hc(x_lin) + Hc x_lin; 0]
    P = -[0 I] KKT+ [0; I]
    """
    x_lin = np.asarray(x_lin, dtype=float)
    Rc = problem.Rc
    p, n = Hc.shape
    if Rc.shape != (p, p) or n != problem.state_dim:
        raise DimensionError(f"Jacobian shape {Hc.shape} does not match Rc {Rc.shape}")

    kkt = np.zeros((p + n, p + n))
    kkt[:p, :p] = Rc
    kkt[:p, p:] = Hc
    kkt[p:, :p] = Hc.T

    if not np.all(np.isfinite(kkt)):
        raise NumericalError("KKT matrix has non-finite entries")
    try:
        kkt_pinv, rank = scipy.linalg.pinv(kkt, atol=0.0, rtol=PINV_RTOL, return_rank=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"KKT pseudo-inverse failed: {exc}") from exc

    if rank < p + n:
        _report_rank_deficiency(Hc, problem, rank, p + n)

    rhs = np.concatenate([problem.zc - problem.hc(x_lin) + Hc @ x_lin, np.zeros(n)])
    sol = kkt_pinv @ rhs
    G = Hc[problem.state_dim + problem.measurement_dim:]
    P = restrict_to_null_space(symmetrize(-kkt_pinv[p:, p:]), G)
    return FusionSolution(x=sol[p:], P=P, multipliers=sol[:p], rank=int(rank))


def restrict_to_null_space(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    """N P N with N = I - G+ G, the projector onto the null space of G.

    Rows of G that pin a single coordinate zero its row and column exactly.
    """
    if G.shape[0] == 0:
        return P
    N = np.eye(P.shape[0]) - scipy.linalg.pinv(G, atol=0.0, rtol=PINV_RTOL) @ G
    P = symmetrize(N @ P @ N)
    pinned = sorted({int(j) for row in G if np.count_nonzero(row) == 1 for j in np.flatnonzero(row)})
    P[pinned, :] = 0.0
    P[:, pinned] = 0.0
    return P


def _report_rank_deficiency(Hc: np.ndarray, problem: FusionProblem, rank: int, size: int) -> None:
    first_constraint = problem.state_dim + problem.measurement_dim
    G = Hc[first_constraint:]
    redundant = G.shape[0] - np.linalg.matrix_rank(G) if G.shape[0] else 0
    if size - rank > redundant:
        KKT_RANK_DEFICIENT.inc()
        logger.warning("kkt_rank_deficient", rank=int(rank), size=size, redundant_constraints=int(redundant))


# ── Line search ────────────────────────────────────────────────────────────────

def line_search_to_feasible(
    x_prev: np.ndarray,
    x_star: np.ndarray,
    constraints: ConstraintSet,
) -> Tuple[np.ndarray, FrozenSet[int], float]:
    """Move from feasible x_prev toward x_star as far as the inequalities allow.

    Returns (x_new, touched, t_max) with x_new = x_prev + t_max (x_star - x_prev).
    Touched constraints are the blocking ones, snapped onto their boundary.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    inequality = constraints.inequality

    before = [c.value(x_prev) for c in inequality]
    infeasible = [i for i, v in enumerate(before) if v < -FEASIBILITY_TOL]
    if infeasible:
        raise InputError(f"line search must start from a feasible point; violated constraints {infeasible}")

    d = x_star - x_prev
    blocking = []
    for i, c in enumerate(inequality):
        after = c.value(x_star)
        if after >= -FEASIBILITY_TOL:
            continue
        start = max(before[i], 0.0)
        if start == 0.0:
            t = 0.0
        elif c.linear:
            t = start / (start - after)
        else:
            t = scipy.optimize.brentq(lambda s, c=c: c.value(x_prev + s * d), 0.0, 1.0)
        blocking.append((t, i))

    if not blocking:
        return x_star.copy(), frozenset(), 1.0

    t_max = min(t for t, _ in blocking)
    touched = frozenset(i for t, i in blocking if t <= t_max + FEASIBILITY_TOL)
    x_new = x_prev + t_max * d
    for i in sorted(touched):
        x_new = inequality[i].project(x_new)
    return x_new, touched, t_max


# ── Constrained step ───────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class StepResult:
    estimate: GaussianEstimate
    active: ActiveSet
    innovation: Innovation
    iterations: int
    t_max_min: float


def _release_candidate(solution: FusionSolution, problem: FusionProblem) -> Optional[int]:
    """Active constraint with the most negative multiplier, if any."""
    if not problem.active:
        return None
    first = problem.state_dim + problem.measurement_dim + len(problem.hc.equality)
    lam = solution.multipliers[first:first + len(problem.active)]
    scale = max(1.0, float(np.max(np.abs(solution.multipliers))))
    worst = int(np.argmin(lam))
    if lam[worst] < -MULTIPLIER_TOL * scale:
        return problem.active[worst]
    return None


def constrained_step(
    prior: GaussianEstimate,
    z,
    model: LinearModel,
    constraints: ConstraintSet,
    active: Iterable[int] = frozenset(),
    ctrl: IterationControl = IterationControl(),
) -> StepResult:
    """One timestep of the inequality-constrained filter.

    Iterates equality-constrained fusion solves and feasibility line
    searches, starting from the previous estimate and the previous active
    set, until the working set is stable and the iterate moves by at most
    ``ctrl.tol`` (or ``ctrl.max_iter`` is reached). The covariance is the
    unperturbed fusion covariance for the final active set. The innovation
    is taken against the unconstrained prediction.
    """
    n = prior.dim
    if model.state_dim != n:
        raise DimensionError(f"estimate has dimension {prior.dim}, model expects {model.state_dim}")
    constraints.check_dim(n)
    working = set(active)
    invalid = [i for i in working if not 0 <= i < len(constraints.inequality)]
    if invalid:
        raise InputError(f"active set refers to unknown constraints {sorted(invalid)}")

    z = np.atleast_1d(np.asarray(z, dtype=float))
    pred = predict(prior, model)
    z_hat, S = measurement_prediction(pred, model)
    innovation = Innovation(z - z_hat, S)

    cacheable = constraints.linear
    cache: Dict[FrozenSet[int], Tuple[FusionProblem, FusionSolution]] = {}

    def solve(key: FrozenSet[int], x_lin: np.ndarray) -> Tuple[FusionProblem, FusionSolution]:
        if cacheable and key in cache:
            return cache[key]
        problem = assemble_fusion(prior, z, model, constraints, key)
        solution = solve_equality_fusion(problem, linearize(problem.hc, x_lin), x_lin)
        if cacheable:
            cache[key] = (problem, solution)
        return problem, solution

    x = prior.mean.copy()
    t_min = 1.0
    iterations = 0
    key = frozenset(working)
    for iterations in range(1, ctrl.max_iter + 1):
        key = frozenset(working)
        problem, solution = solve(key, x)
        x_star = solution.x
        for i in problem.active:
            x_star = constraints.inequality[i].project(x_star)
        x_new, touched, t_max = line_search_to_feasible(x, x_star, constraints)
        t_min = min(t_min, t_max)

        changed = not touched <= working
        working |= touched
        if not changed:
            released = _release_candidate(solution, problem)
            if released is not None:
                working.discard(released)
                changed = True

        step = float(np.max(np.abs(x_new - x))) if n else 0.0
        x = x_new
        if not changed and step <= ctrl.tol:
            break
    else:
        logger.warning(
            "constrained_step_not_converged",
            max_iter=ctrl.max_iter,
            working_set_changed=changed,
            last_step=step,
        )

    final_key = frozenset(working)
    _, solution = solve(final_key, x)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(solution.P)):
        raise NumericalError("constrained step produced non-finite values")

    return StepResult(
        estimate=GaussianEstimate(x, solution.P),
        active=final_key,
        innovation=innovation,
        iterations=iterations,
        t_max_min=t_min,
    )
