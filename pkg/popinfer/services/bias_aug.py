"""Bias removal by state augmentation.

The state is extended with bias terms b that evolve by themselves:

    x^b = [x; b]
    F^b = [[F, B], [0, I]]
    H^b = [H, C]
    Q^b = blockdiag(Q, diag(bias_noise))

Only the original composition coordinates are constrained.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from popinfer.core.errors import DimensionError
from popinfer.services.constrained_kf import ConstraintSet
from popinfer.services.kalman import GaussianEstimate, LinearModel


@dataclass(frozen=True, eq=False)
class BiasSpec:
    """Coupling of ``n_bias`` bias terms into the dynamics (B) and measurements (C)."""

    n_bias: int
    B: np.ndarray
    C: np.ndarray
    bias_noise: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.n_bias < 0:
            raise DimensionError(f"n_bias must be >= 0, got {self.n_bias}")
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        noise = np.zeros(self.n_bias) if self.bias_noise is None else np.asarray(self.bias_noise, dtype=float).ravel()
        if noise.shape != (self.n_bias,):
            raise DimensionError(f"bias_noise needs {self.n_bias} entries, got {noise.size}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "bias_noise", noise)

    @classmethod
    def none(cls) -> "BiasSpec":
        return cls(0, np.zeros((0, 0)), np.zeros((0, 0)))

    @classmethod
    def measurement(cls, n_state: int, bias_noise: float = 0.0) -> "BiasSpec":
        """One bias term added to the scalar measurement: B = 0, C = 1."""
        return cls(1, np.zeros((n_state, 1)), np.ones((1, 1)), np.array([bias_noise]))

    def _check(self, state_dim: int, measurement_dim: Optional[int] = None) -> None:
        if self.n_bias == 0:
            return
        if self.B.shape != (state_dim, self.n_bias):
            raise DimensionError(f"B has shape {self.B.shape}, expected ({state_dim}, {self.n_bias})")
        if measurement_dim is not None and self.C.shape != (measurement_dim, self.n_bias):
            raise DimensionError(f"C has shape {self.C.shape}, expected ({measurement_dim}, {self.n_bias})")


def augment_model(model: LinearModel, spec: BiasSpec) -> LinearModel:
    if spec.n_bias == 0:
        return model
    spec._check(model.state_dim, model.measurement_dim)
    n, nb = model.state_dim, spec.n_bias

    F = np.zeros((n + nb, n + nb))
    F[:n, :n] = model.F
    F[:n, n:] = spec.B
    F[n:, n:] = np.eye(nb)

    Q = np.zeros((n + nb, n + nb))
    Q[:n, :n] = model.Q
    Q[n:, n:] = np.diag(spec.bias_noise)

    return LinearModel(F, Q, augment_row(model.H, spec), model.R)


def augment_row(H, spec: BiasSpec) -> np.ndarray:
    """[H, C] for a decision row or measurement matrix."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if spec.n_bias == 0:
        return H
    if spec.C.shape[0] != H.shape[0]:
        raise DimensionError(f"C has {spec.C.shape[0]} rows, H has {H.shape[0]}")
    return np.hstack([H, spec.C])


def augment_process_noise(Q: np.ndarray, spec: BiasSpec) -> np.ndarray:
    """Keep the composition block of Q, reset the bias block, zero the cross blocks."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if spec.n_bias == 0:
        return Q
    n = Q.shape[0] - spec.n_bias
    out = np.zeros_like(Q)
    out[:n, :n] = Q[:n, :n]
    out[n:, n:] = np.diag(spec.bias_noise)
    return out


def augment_constraints(constraints: ConstraintSet, spec: BiasSpec) -> ConstraintSet:
    if spec.n_bias == 0:
        return constraints
    equality = tuple(c.padded(c.dim + spec.n_bias) for c in constraints.equality)
    inequality = tuple(c.padded(c.dim + spec.n_bias) for c in constraints.inequality)
    return ConstraintSet(equality, inequality)


def augment_estimate(estimate: GaussianEstimate, spec: BiasSpec, prior_variance: float = 1.0) -> GaussianEstimate:
    """Append bias coordinates with mean 0 and variance ``prior_variance``."""
    if spec.n_bias == 0:
        return estimate
    n, nb = estimate.dim, spec.n_bias
    cov = np.zeros((n + nb, n + nb))
    cov[:n, :n] = estimate.cov
    cov[n:, n:] = prior_variance * np.eye(nb)
    return GaussianEstimate(np.concatenate([estimate.mean, np.zeros(nb)]), cov)


def extract(estimate: GaussianEstimate, spec: BiasSpec, state_dim: int) -> Tuple[GaussianEstimate, GaussianEstimate]:
    """Split an augmented estimate into its composition and bias marginals."""
    if estimate.dim != state_dim + spec.n_bias:
        raise DimensionError(
            f"estimate has dimension {estimate.dim}, expected {state_dim} + {spec.n_bias} bias terms"
        )
    n = state_dim
    composition = GaussianEstimate(estimate.mean[:n], estimate.cov[:n, :n])
    bias = GaussianEstimate(estimate.mean[n:], estimate.cov[n:, n:])
    return composition, bias
