"""Log-return residuals, delta-method variances and calibration checks"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from popinfer.core.errors import InputError, LogDomainError
from popinfer.core.logging import get_logger
from popinfer.services.ensemble import EnsembleSummary
from popinfer.services.mg_model import PriceSeries

logger = get_logger(__name__)

DEFAULT_LEVELS = (2.0, 3.0)
BAND_SIGMAS = 3.0

REPORT_COLUMNS = ["k", "l", "l_hat", "l_resid", "var", "band", "sem_band", "rolling_accuracy"]


def log_return_residual(r_prev: float, z_obs: float, z_hat: float) -> Tuple[float, float, float]:
    """Observed log return l, predicted l_hat and residual l - l_hat."""
    for name, value in (("r_prev", r_prev), ("r_prev + z", r_prev + z_obs), ("r_prev + z_hat", r_prev + z_hat)):
        if not value > 0:
            raise LogDomainError(f"log of non-positive {name} = {value}")
    l = math.log1p(z_obs / r_prev)
    l_hat = math.log1p(z_hat / r_prev)
    return l, l_hat, l - l_hat


def delta_variance(S: float, r_prev: float) -> float:
    """First-order variance of the log-return residual: S / r_prev**2."""
    if S < 0:
        raise InputError(f"residual variance must be non-negative, got {S}")
    if r_prev <= 0:
        raise LogDomainError(f"previous price must be positive, got {r_prev}")
    return S / r_prev ** 2


@dataclass(frozen=True)
class CoverageRow:
    level: float
    fraction_outside: float
    bound: float
    passed: bool


@dataclass(frozen=True)
class CoverageResult:
    rows: Tuple[CoverageRow, ...]
    mean_residual: float
    mean_residual_sem: float
    n: int

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)


def coverage_check(
    residuals: Sequence[float],
    variances: Sequence[float],
    levels: Sequence[float] = DEFAULT_LEVELS,
) -> CoverageResult:
    """Fraction of residuals outside kappa standard deviations, per level.

    A level passes when the fraction is at most 1/kappa**2, the Chebyshev
    bound. Also reports the residual mean and its standard error.
    """
    res = np.asarray(residuals, dtype=float)
    var = np.asarray(variances, dtype=float)
    if res.size == 0:
        raise InputError("coverage check needs at least one residual")
    if res.shape != var.shape:
        raise InputError(f"{res.size} residuals but {var.size} variances")

    sigma = np.sqrt(var)
    rows = []
    for kappa in sorted(levels):
        fraction = float(np.mean(np.abs(res) > kappa * sigma))
        bound = 1.0 / kappa ** 2
        rows.append(CoverageRow(float(kappa), fraction, bound, fraction <= bound))

    sem = float(res.std(ddof=1) / math.sqrt(res.size)) if res.size > 1 else 0.0
    return CoverageResult(tuple(rows), float(res.mean()), sem, int(res.size))


def directional_accuracy(z: Sequence[float], z_hat: Sequence[float]) -> float:
    """Fraction of steps where sign(z_hat) == sign(z)."""
    z = np.asarray(z, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    if z.size == 0:
        raise InputError("directional accuracy needs at least one step")
    return float(np.mean(np.sign(z) == np.sign(z_hat)))


def rolling_accuracy(z: Sequence[float], z_hat: Sequence[float], window: int) -> np.ndarray:
    """Directional accuracy over a trailing window; NaN until the window fills."""
    if window < 1:
        raise InputError(f"rolling window must be >= 1, got {window}")
    hits = pd.Series(np.sign(np.asarray(z, dtype=float)) == np.sign(np.asarray(z_hat, dtype=float)), dtype=float)
    return hits.rolling(window, min_periods=window).mean().to_numpy()


@dataclass
class ResidualReport:
    """Per-step log-return residuals aligned with an ensemble summary."""

    k: np.ndarray
    l: np.ndarray
    l_hat: np.ndarray
    l_resid: np.ndarray
    var: np.ndarray
    band: np.ndarray
    sem_band: np.ndarray
    rolling_accuracy: np.ndarray
    coverage: CoverageResult
    directional_accuracy: float
    flagged_steps: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.coverage.passed

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({name: getattr(self, name) for name in REPORT_COLUMNS})

    def summary(self) -> Dict:
        return {
            "coverage": [
                {"level": row.level, "fraction_outside": row.fraction_outside,
                 "bound": row.bound, "passed": row.passed}
                for row in self.coverage.rows
            ],
            "mean_residual": self.coverage.mean_residual,
            "mean_residual_sem": self.coverage.mean_residual_sem,
            "directional_accuracy": self.directional_accuracy,
            "n_steps": int(len(self.k)),
            "n_flagged_steps": len(self.flagged_steps),
            "passed": self.passed,
        }


def build_report(
    summary: EnsembleSummary,
    series: PriceSeries,
    levels: Sequence[float] = DEFAULT_LEVELS,
    rolling_window: int = 50,
) -> ResidualReport:
    """Turn ensemble predictions into log-return residuals and calibration figures.

    Steps where a logarithm argument is not positive are flagged, left
    empty in the report and excluded from the aggregates.
    """
    k = np.asarray(summary.k, dtype=int)
    if k.size == 0:
        raise InputError("ensemble summary has no steps")
    if k.max() >= len(series):
        raise InputError(f"summary step {int(k.max())} is beyond the series of length {len(series)}")

    r_prev = series.rates[k - 1]
    z, z_hat, S = summary.z, summary.z_hat, summary.S

    valid = (r_prev + z > 0) & (r_prev + z_hat > 0)
    flagged = [int(step) for step in k[~valid]]
    for step in flagged:
        logger.warning("log_domain_step_flagged", k=step)

    with np.errstate(invalid="ignore", divide="ignore"):
        l = np.where(valid, np.log1p(z / r_prev), np.nan)
        l_hat = np.where(valid, np.log1p(z_hat / r_prev), np.nan)
    l_resid = l - l_hat
    var = np.where(valid, S / r_prev ** 2, np.nan)
    band = BAND_SIGMAS * np.sqrt(var)
    sem_band = np.where(valid, summary.sem / r_prev, np.nan)

    if not valid.any():
        raise InputError("every step was flagged; nothing to report")
    coverage = coverage_check(l_resid[valid], var[valid], levels)

    return ResidualReport(
        k=k,
        l=l,
        l_hat=l_hat,
        l_resid=l_resid,
        var=var,
        band=band,
        sem_band=sem_band,
        rolling_accuracy=rolling_accuracy(z, z_hat, rolling_window),
        coverage=coverage,
        directional_accuracy=directional_accuracy(z[valid], z_hat[valid]),
        flagged_steps=flagged,
    )
