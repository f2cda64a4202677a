"""Windowed covariance matching for the measurement and process noise.

R is the time average of nu nu' - H P_pred H' over the last W residuals.
Q is recovered from the empirical residual covariance S over the same
window by solving S = H (F P F' + Q) H' + R for Q with pseudo-inverses.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from popinfer.core.errors import DimensionError, InputError, NoiseNotReadyError
from popinfer.core.logging import get_logger
from popinfer.schemas.run import NoiseConfig
from popinfer.services.kalman import symmetrize

logger = get_logger(__name__)

DEFAULT_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class _Residual:
    nu: np.ndarray
    # H P_pred H'
    predicted: np.ndarray


class ResidualHistory:
    """Ring buffer of the last ``window`` (nu, H, P_pred) triples."""

    def __init__(self, window: int):
        if window < 2:
            raise InputError(f"noise window must be >= 2, got {window}")
        self.window = window
        self._entries: Deque[_Residual] = deque(maxlen=window)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) == self.window

    def push(self, nu, H, P_pred) -> None:
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        H = np.atleast_2d(np.asarray(H, dtype=float))
        P_pred = np.atleast_2d(np.asarray(P_pred, dtype=float))
        if H.shape[0] != nu.size or P_pred.shape != (H.shape[1], H.shape[1]):
            raise DimensionError(
                f"inconsistent residual entry: nu {nu.shape}, H {H.shape}, P {P_pred.shape}"
            )
        self._entries.append(_Residual(nu, H @ P_pred @ H.T))

    def _require_full(self) -> None:
        if not self.full:
            raise NoiseNotReadyError(f"residual window holds {len(self)} of {self.window} entries")

    def empirical_S(self) -> np.ndarray:
        """1/(W-1) sum nu nu'"""
        self._require_full()
        nus = np.stack([e.nu for e in self._entries])
        return symmetrize(nus.T @ nus / (self.window - 1))

    def innovation_excess(self) -> np.ndarray:
        """1/(W-1) sum (nu nu' - H P_pred H')"""
        self._require_full()
        predicted = np.sum(np.stack([e.predicted for e in self._entries]), axis=0)
        return symmetrize(self.empirical_S() - predicted / (self.window - 1))


def project_psd(matrix: np.ndarray, floor: float = DEFAULT_FLOOR, clamp_zero: bool = True) -> np.ndarray:
    """Symmetric eigenvalue repair.

    Eigenvalues below ``floor`` are raised to ``floor``; with
    ``clamp_zero=False`` only negative eigenvalues are, so exact zeros stay.
    """
    sym = symmetrize(np.atleast_2d(np.asarray(matrix, dtype=float)))
    vals, vecs = scipy.linalg.eigh(sym)
    low = vals < floor if clamp_zero else vals < 0
    if not low.any():
        return sym
    vals = np.where(low, floor, vals)
    return symmetrize((vecs * vals) @ vecs.T)


def estimate_R(hist: ResidualHistory, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Measurement-noise covariance from the residual window.

    Raises NoiseNotReadyError until the window is full.
    """
    return project_psd(hist.innovation_excess(), floor)


def estimate_Q(
    S: np.ndarray,
    H: np.ndarray,
    F: np.ndarray,
    P_prev: np.ndarray,
    R: np.ndarray,
    floor: float = DEFAULT_FLOOR,
    diagonal: bool = True,
) -> np.ndarray:
    """Process-noise covariance (H'H)+ H' (S - H F P F' H' - R) H (H'H)+.

    With ``diagonal`` the off-diagonal entries are zeroed. Negative
    diagonal entries (eigenvalues when not diagonal) become ``floor``.
    """
    S, H, F, P_prev, R = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (S, H, F, P_prev, R))
    n = F.shape[0]
    p = H.shape[0]
    if H.shape[1] != n or P_prev.shape != (n, n) or S.shape != (p, p) or R.shape != (p, p):
        raise DimensionError(
            f"inconsistent shapes: S {S.shape}, H {H.shape}, F {F.shape}, P {P_prev.shape}, R {R.shape}"
        )

    excess = S - H @ F @ P_prev @ F.T @ H.T - R
    G = scipy.linalg.pinv(H.T @ H)
    Q = symmetrize(G @ H.T @ excess @ H @ G)

    if diagonal:
        d = np.diag(Q).copy()
        d[d < 0] = floor
        return np.diag(d)
    return project_psd(Q, floor, clamp_zero=False)


def fallback_noise(
    warmup_increments: Sequence[float],
    dim: int,
    config: Optional[NoiseConfig] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Noise levels used until the residual window fills.

    R0 is the configured value or the sample variance of the warm-up
    increments (1.0 when that is undefined or zero). Q0 = q0_scale * R0 * I.
    """
    config = config or NoiseConfig()
    if config.r0 is not None:
        r0 = config.r0
    else:
        inc = np.asarray(warmup_increments, dtype=float)
        r0 = float(np.var(inc, ddof=1)) if inc.size >= 2 else 0.0
        if not np.isfinite(r0) or r0 <= 0:
            r0 = 1.0
    return np.array([[r0]]), config.q0_scale * r0 * np.eye(dim)


class CovarianceMatcher:
    """Owns a run's residual window and its current noise levels.

    ``observe`` is called once per step after the constrained update; the
    returned Q is the one to use for the next prediction.
    """

    def __init__(self, window: int, R0: np.ndarray, Q0: np.ndarray, config: Optional[NoiseConfig] = None):
        self.config = config or NoiseConfig()
        self.history = ResidualHistory(window)
        self.R = np.atleast_2d(np.asarray(R0, dtype=float))
        self.Q = np.atleast_2d(np.asarray(Q0, dtype=float))
        self._since_full = 0

    def observe(self, nu, H, P_pred, F, P_prev) -> Tuple[np.ndarray, np.ndarray]:
        self.history.push(nu, H, P_pred)
        if not self.history.full:
            return self.R, self.Q

        if self._since_full == 0:
            logger.debug("noise_window_full", window=self.history.window)
        due = self._since_full % self.config.update_every == 0
        self._since_full += 1
        if not due:
            return self.R, self.Q

        H = np.atleast_2d(np.asarray(H, dtype=float))
        self.R = estimate_R(self.history, self.config.floor)
        self.Q = estimate_Q(
            self.history.empirical_S(), H, F, P_prev, self.R,
            floor=self.config.floor, diagonal=self.config.diagonal_q,
        )
        return self.R, self.Q
