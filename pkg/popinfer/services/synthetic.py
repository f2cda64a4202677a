"""Synthetic Minority Game market with a planted composition.

Every step after the warm-up the planted agent types score their
strategies over the last T outcomes, the price moves by

    z_k = H_k . x* + eps_k + beta,   eps_k ~ N(0, sigma_z**2)

and the winning outcome -sgn(z_k) extends the history.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from popinfer.core.errors import SynthesisError
from popinfer.core.logging import get_logger
from popinfer.schemas.synth import SynthSpec
from popinfer.services.mg_model import (
    AgentType,
    PriceSeries,
    build_decision_row,
    history_code,
    sample_agent_subset,
    winning_outcome,
)

logger = get_logger(__name__)

MAX_ATTEMPTS = 8


@dataclass
class SyntheticMarket:
    series: PriceSeries
    truth: List[Dict]
    types: List[AgentType]
    weights: np.ndarray
    sigma_z: float


class _NonPositivePrice(Exception):
    def __init__(self, k: int):
        self.k = k
        super().__init__(f"price at step {k} is not positive")


def planted_types(spec: SynthSpec) -> List[AgentType]:
    if spec.types is not None:
        return [AgentType.from_pair(spec.memory, a, b) for a, b in spec.types]
    return sample_agent_subset(spec.memory, spec.n_types, spec.seed)


def _simulate(spec: SynthSpec, types: List[AgentType], weights: np.ndarray, sigma: float):
    rng = np.random.default_rng(spec.seed)
    m, horizon = spec.memory, spec.horizon
    warm = m + horizon
    scale = float(weights.sum()) or 1.0

    if spec.initial_outcomes is not None:
        initial = list(spec.initial_outcomes)
    else:
        initial = [int(w) for w in rng.choice([-1, 1], size=warm)]

    rates = [spec.r0]
    outcomes: List[int] = []
    truth: List[Dict] = []

    def advance(k: int, z_model: float, row) -> None:
        r = rates[-1] + z_model
        if not r > 0:
            raise _NonPositivePrice(k)
        z = r - rates[-1]
        w = winning_outcome(z)
        rates.append(r)
        outcomes.append(w)
        truth.append({"k": k, "z": z, "w": w, "H": row})

    for k in range(1, warm + 1):
        # z = -w * scale reproduces the outcome w
        advance(k, -initial[k - 1] * scale, None)

    for k in range(warm + 1, spec.length):
        t = k - 1
        window = outcomes[t - horizon:t]
        histories = [history_code(outcomes[s - m:s]) for s in range(t - horizon, t)]
        current = history_code(outcomes[t - m:t])
        H = build_decision_row(types, window, histories, current, spec.tie_break, rng)
        eps = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
        advance(k, float(H @ weights) + eps + spec.bias, [int(h) for h in H])

    return np.array(rates), truth


def generate_synthetic(spec: SynthSpec) -> SyntheticMarket:
    """Generate a price series and its truth log, deterministically from the seed.

    A non-positive price discards the attempt; the noise level is halved
    and generation restarts from the same seed, up to MAX_ATTEMPTS times.
    """
    types = planted_types(spec)
    weights = np.asarray(spec.planted_weights, dtype=float)
    sigma = spec.noise_std

    for attempt in range(1, MAX_ATTEMPTS + 1):
        try:
            rates, truth = _simulate(spec, types, weights, sigma)
        except _NonPositivePrice as exc:
            if sigma == 0:
                raise SynthesisError(f"{exc} and there is no noise to reduce") from exc
            logger.warning("synthetic_price_nonpositive", attempt=attempt, sigma_z=sigma, k=exc.k)
            sigma /= 2
            continue
        logger.info("synthetic_generated", length=len(rates), types=len(types), sigma_z=sigma, attempts=attempt)
        return SyntheticMarket(PriceSeries(rates), truth, types, weights, sigma)

    raise SynthesisError(f"prices stayed non-positive after {MAX_ATTEMPTS} attempts")
