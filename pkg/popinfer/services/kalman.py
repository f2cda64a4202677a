"""Linear Kalman filter: prediction, measurement update and Joseph-form covariance.

Model:
    x_k = F x_{k-1} + u,  u ~ N(0, Q)
    z_k = H x_k + v,      v ~ N(0, R)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from popinfer.core.errors import DimensionError, NumericalError, SingularInnovationError

# Largest accepted condition number of the residual covariance S.
MAX_INNOVATION_CONDITION = 1e12


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


@dataclass(frozen=True)
class GaussianEstimate:
    """Mean vector and covariance matrix of a state estimate or prediction."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise DimensionError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class LinearModel:
    """Transition F, process noise Q, measurement matrix H, measurement noise R."""

    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n = F.shape[0]
        if F.shape != (n, n):
            raise DimensionError(f"F must be square, got {F.shape}")
        if Q.shape != (n, n):
            raise DimensionError(f"Q shape {Q.shape} does not match state dimension {n}")
        if H.shape[1] != n:
            raise DimensionError(f"H has {H.shape[1]} columns, expected {n}")
        p = H.shape[0]
        if R.shape != (p, p):
            raise DimensionError(f"R shape {R.shape} does not match {p} measurement rows")
        for name, value in (("F", F), ("Q", Q), ("H", H), ("R", R)):
            object.__setattr__(self, name, value)

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def measurement_dim(self) -> int:
        return self.H.shape[0]

    def with_noise(self, Q: np.ndarray, R: np.ndarray) -> "LinearModel":
        return LinearModel(self.F, Q, self.H, R)

    def with_measurement(self, H: np.ndarray) -> "LinearModel":
        return LinearModel(self.F, self.Q, H, self.R)


@dataclass(frozen=True)
class Innovation:
    """Measurement residual nu and its covariance S."""

    nu: np.ndarray
    S: np.ndarray


def _check_state(estimate: GaussianEstimate, model: LinearModel) -> None:
    if estimate.dim != model.state_dim:
        raise DimensionError(f"estimate has dimension {estimate.dim}, model expects {model.state_dim}")


def predict(prior: GaussianEstimate, model: LinearModel) -> GaussianEstimate:
    """State and covariance prediction: F x, F P F' + Q."""
    _check_state(prior, model)
    mean = model.F @ prior.mean
    cov = symmetrize(model.F @ prior.cov @ model.F.T + model.Q)
    return GaussianEstimate(mean, cov)


def measurement_prediction(pred: GaussianEstimate, model: LinearModel) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted measurement H x and residual covariance H P H' + R."""
    _check_state(pred, model)
    z_hat = model.H @ pred.mean
    S = symmetrize(model.H @ pred.cov @ model.H.T + model.R)
    return z_hat, S


def _as_measurement(z, model: LinearModel) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (model.measurement_dim,):
        raise DimensionError(f"measurement shape {z.shape} does not match {model.measurement_dim} rows")
    return z


def solve_innovation(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve S X = rhs for symmetric positive definite S, rejecting ill-conditioned S."""
    condition = float(np.linalg.cond(S))
    if not np.isfinite(condition) or condition > MAX_INNOVATION_CONDITION:
        raise SingularInnovationError(condition, MAX_INNOVATION_CONDITION)
    try:
        factor = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"residual covariance is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, rhs)


def joseph_covariance(P: np.ndarray, K: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """(I - K H) P (I - K H)' + K R K', symmetric PSD for any gain K."""
    A = np.eye(P.shape[0]) - K @ H
    return symmetrize(A @ P @ A.T + K @ R @ K.T)


def update(pred: GaussianEstimate, z, model: LinearModel) -> Tuple[GaussianEstimate, Innovation]:
    """Measurement update with the Joseph-form covariance.

    P = (I - K H) P (I - K H)' + K R K'
    """
    _check_state(pred, model)
    z = _as_measurement(z, model)
    H, R, P = model.H, model.R, pred.cov

    z_hat, S = measurement_prediction(pred, model)
    nu = z - z_hat
    # K' = S^-1 H P
    K = solve_innovation(S, H @ P).T

    mean = pred.mean + K @ nu
    return GaussianEstimate(mean, joseph_covariance(P, K, H, R)), Innovation(nu, S)


def initial_estimate(
    n_types: int,
    mean: Optional[Sequence[float]] = None,
    variance: float = 1.0,
) -> GaussianEstimate:
    """Uninformative start: 1/N per type (or the given mean), covariance variance * I."""
    if mean is None:
        x0 = np.full(n_types, 1.0 / n_types)
    else:
        x0 = np.asarray(mean, dtype=float)
        if x0.shape != (n_types,):
            raise DimensionError(f"initial mean has shape {x0.shape}, expected ({n_types},)")
    return GaussianEstimate(x0, variance * np.eye(n_types))
