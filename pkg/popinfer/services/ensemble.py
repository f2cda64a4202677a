"""Ensemble of constrained filter runs over random agent-type subsets"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from popinfer.config import settings
from popinfer.core.errors import EnsembleError, InputError, NumericalError
from popinfer.core.logging import get_logger
from popinfer.metrics import ACTIVE_CONSTRAINTS, FILTER_STEPS, INNER_ITERATIONS, RUN_DURATION, RUNS_TOTAL
from popinfer.schemas.run import BiasMode, RunConfig
from popinfer.schemas.subset import AgentSubset
from popinfer.services.bias_aug import (
    BiasSpec,
    augment_constraints,
    augment_estimate,
    augment_model,
    augment_process_noise,
    augment_row,
    extract,
)
from popinfer.services.constrained_kf import ConstraintSet, IterationControl, constrained_step
from popinfer.services.kalman import LinearModel, initial_estimate, measurement_prediction, predict
from popinfer.services.mg_model import (
    AgentType,
    PriceSeries,
    decision_matrix,
    sample_agent_subset,
    subset_to_schema,
)
from popinfer.services.noise_est import CovarianceMatcher, fallback_noise

logger = get_logger(__name__)


def derive_seed(master_seed: int, run_index: int) -> int:
    """Independent per-run seed derived from the master seed and the run index."""
    return int(np.random.SeedSequence([master_seed, run_index]).generate_state(1)[0])


def bias_spec_for(cfg: RunConfig) -> BiasSpec:
    if cfg.bias.mode == BiasMode.MEASUREMENT:
        return BiasSpec.measurement(cfg.subset_size, cfg.bias.bias_noise)
    return BiasSpec.none()


@dataclass
class RunRecord:
    """Per-step output of one filter run, aligned on the series index k."""

    run_index: int
    seed: int
    subset: AgentSubset
    k: np.ndarray
    z: np.ndarray
    z_hat: np.ndarray
    nu: np.ndarray
    S: np.ndarray
    x: np.ndarray
    active: List[Tuple[int, ...]] = field(default_factory=list)
    flagged: bool = False
    error: Optional[str] = None
    forecast: Optional[Dict[str, float]] = None

    @property
    def n_steps(self) -> int:
        return len(self.k)


@dataclass
class EnsembleSummary:
    """Equal-weight averages over the unflagged runs."""

    k: np.ndarray
    z: np.ndarray
    z_hat: np.ndarray
    S: np.ndarray
    sem: np.ndarray
    n_runs: int
    flagged: List[int] = field(default_factory=list)
    forecast: Optional[Dict[str, float]] = None


def run_single(
    series: PriceSeries,
    subset: Sequence[AgentType],
    cfg: RunConfig,
    seed: int = 0,
    run_index: int = 0,
) -> RunRecord:
    """One recursive filter pass over the series.

    For every step k after the warm-up: build the decision row from the
    outcomes before k, predict z_k, consume z_k in the constrained update,
    then re-estimate the noise levels. A numerical failure truncates the
    record and flags it.
    """
    n = len(subset)
    if n != cfg.subset_size:
        raise InputError(f"subset has {n} types, config expects {cfg.subset_size}")
    if len(series) <= cfg.warmup:
        raise InputError(f"series of length {len(series)} is too short for warm-up {cfg.warmup}")

    started = time.perf_counter()
    logger.info("run_started", run_index=run_index, seed=seed, subset_size=n)

    rng = np.random.default_rng(seed)
    z_all = series.increments
    # row i belongs to series index warmup + i; the last row is the forecast step
    rows = decision_matrix(subset, series.outcomes, cfg.horizon, cfg.tie_break, rng)

    spec = bias_spec_for(cfg)
    R0, Q0 = fallback_noise(z_all[:cfg.warmup - 1], n, cfg.noise)
    model = augment_model(LinearModel(np.eye(n), Q0, np.zeros((1, n)), R0), spec)
    constraints = augment_constraints(ConstraintSet.nonnegative(n), spec)
    estimate = augment_estimate(
        initial_estimate(n, cfg.initial.mean, cfg.initial.variance), spec, cfg.bias.prior_variance
    )
    matcher = CovarianceMatcher(cfg.window, model.R, model.Q, cfg.noise)
    ctrl = IterationControl(cfg.iteration.tol, cfg.iteration.max_iter)

    ks, zs, z_hats, nus, Ss, xs, actives = [], [], [], [], [], [], []
    active = frozenset()
    error = None

    for i, k in enumerate(range(cfg.warmup, len(series))):
        z_k = z_all[k - 1]
        model = model.with_measurement(augment_row(rows[i], spec))
        try:
            pred = predict(estimate, model)
            z_hat, S = measurement_prediction(pred, model)
            result = constrained_step(estimate, z_k, model, constraints, active, ctrl)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            error = f"step {k}: {exc}"
            logger.warning("run_flagged", run_index=run_index, k=k, error=str(exc))
            break

        FILTER_STEPS.inc()
        INNER_ITERATIONS.observe(result.iterations)
        ACTIVE_CONSTRAINTS.observe(len(result.active))
        logger.debug(
            "constrained_step_trace",
            k=k,
            j_iters=result.iterations,
            active_set=sorted(result.active),
            t_max_min=result.t_max_min,
        )

        ks.append(k)
        zs.append(z_k)
        z_hats.append(float(z_hat[0]))
        nus.append(float(result.innovation.nu[0]))
        Ss.append(float(S[0, 0]))
        xs.append(result.estimate.mean)
        actives.append(tuple(sorted(result.active)))

        R, Q = matcher.observe(result.innovation.nu, model.H, pred.cov, model.F, estimate.cov)
        model = model.with_noise(augment_process_noise(Q, spec), R)
        estimate, active = result.estimate, result.active

    forecast = None
    if error is None:
        model = model.with_measurement(augment_row(rows[-1], spec))
        z_hat, S = measurement_prediction(predict(estimate, model), model)
        forecast = {"k": len(series), "z_hat": float(z_hat[0]), "S": float(S[0, 0])}
        if spec.n_bias:
            _, bias = extract(estimate, spec, n)
            logger.info("bias_estimate", run_index=run_index, mean=bias.mean.tolist(),
                        variance=np.diag(bias.cov).tolist())

    duration = time.perf_counter() - started
    RUN_DURATION.observe(duration)
    RUNS_TOTAL.labels(status="flagged" if error else "ok").inc()
    logger.info("run_finished", run_index=run_index, steps=len(ks), flagged=error is not None,
                duration=round(duration, 3))

    dim = n + spec.n_bias
    return RunRecord(
        run_index=run_index,
        seed=seed,
        subset=subset_to_schema(subset, seed),
        k=np.array(ks, dtype=int),
        z=np.array(zs, dtype=float),
        z_hat=np.array(z_hats, dtype=float),
        nu=np.array(nus, dtype=float),
        S=np.array(Ss, dtype=float),
        x=np.array(xs, dtype=float).reshape(len(xs), dim),
        active=actives,
        flagged=error is not None,
        error=error,
        forecast=forecast,
    )


def _reduce(stack: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Column means and standard errors; constant columns reduce exactly."""
    m = stack.shape[0]
    constant = np.ptp(stack, axis=0) == 0
    mean = np.where(constant, stack[0], stack.mean(axis=0))
    if m == 1:
        return mean, np.zeros(stack.shape[1])
    sem = stack.std(axis=0, ddof=1) / np.sqrt(m)
    return mean, np.where(constant, 0.0, sem)


def average_runs(records: Sequence[RunRecord]) -> EnsembleSummary:
    """Equal-weight average of the unflagged runs.

    Records are reduced in run-index order, so the input order does not
    matter.
    """
    ordered = sorted(records, key=lambda r: r.run_index)
    valid = [r for r in ordered if not r.flagged]
    flagged = [r.run_index for r in ordered if r.flagged]
    if not valid:
        raise EnsembleError(f"all {len(ordered)} runs were flagged")

    k = valid[0].k
    for r in valid[1:]:
        if not np.array_equal(r.k, k):
            raise InputError(f"run {r.run_index} is not aligned with run {valid[0].run_index}")

    z_hat, sem = _reduce(np.vstack([r.z_hat for r in valid]))
    S, _ = _reduce(np.vstack([r.S for r in valid]))

    forecast = None
    if all(r.forecast is not None for r in valid):
        f_hat, f_sem = _reduce(np.array([[r.forecast["z_hat"]] for r in valid]))
        f_S, _ = _reduce(np.array([[r.forecast["S"]] for r in valid]))
        forecast = {"k": valid[0].forecast["k"], "z_hat": float(f_hat[0]), "S": float(f_S[0]),
                    "sem": float(f_sem[0])}

    return EnsembleSummary(
        k=k.copy(),
        z=valid[0].z.copy(),
        z_hat=z_hat,
        S=S,
        sem=sem,
        n_runs=len(valid),
        flagged=flagged,
        forecast=forecast,
    )


def orchestrate(
    series: PriceSeries,
    cfg: RunConfig,
    max_workers: Optional[int] = None,
) -> Tuple[EnsembleSummary, List[RunRecord]]:
    """Draw cfg.runs subsets, filter the series with each, and average.

    Subsets are drawn independently per run and may repeat.
    """
    seeds = [derive_seed(cfg.seed, j) for j in range(cfg.runs)]
    subsets = [sample_agent_subset(cfg.memory, cfg.subset_size, s) for s in seeds]
    workers = max_workers or settings.max_concurrent_runs
    logger.info("ensemble_started", runs=cfg.runs, memory=cfg.memory, subset_size=cfg.subset_size,
                workers=workers)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_single, series, subsets[j], cfg, seeds[j], j) for j in range(cfg.runs)]
        records = [f.result() for f in futures]

    summary = average_runs(records)
    if summary.flagged:
        logger.warning("ensemble_runs_flagged", flagged=summary.flagged)
    logger.info("ensemble_finished", runs=cfg.runs, valid=summary.n_runs)
    return summary, records
