"""Minority Game agent model: strategies, agent types, scoring and decision rows.

Conventions:
    - Outcomes and decisions are +1 / -1.
    - A history is an m-bit integer; the most recent outcome is the least
      significant bit and +1 encodes as 1, -1 as 0.
    - A strategy table is a bit-packed integer of 2**m bits; bit h holds the
      decision for history h (1 -> +1, 0 -> -1).
    - An agent type is an unordered pair of distinct strategies stored in
      canonical order (table_a < table_b). Pairs are enumerated
      lexicographically on (table_a, table_b).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from popinfer.core.errors import InputError, StrategySpaceOverflowError
from popinfer.core.logging import get_logger
from popinfer.schemas.run import TieBreak
from popinfer.schemas.subset import AgentSubset

logger = get_logger(__name__)

# Largest memory whose strategy tables fit the bit-packed storage.
MAX_STORED_MEMORY = 5
# Largest memory pair_count will count.
MAX_COUNTED_MEMORY = 16
# Pair spaces up to this size are sampled with a full permutation.
_EXHAUSTIVE_SAMPLING_LIMIT = 1_000_000


def winning_outcome(z: float) -> int:
    """Decision that would have won at a step with price increment ``z``.

    w = -sgn(z); a zero increment resolves to +1.
    """
    return -1 if z > 0 else 1


def winning_outcomes(increments: Sequence[float]) -> np.ndarray:
    """Vectorised :func:`winning_outcome`."""
    z = np.asarray(increments, dtype=float)
    return np.where(z > 0, -1, 1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """Ordered positive prices r_0 .. r_{L-1} with optional timestamps."""

    rates: np.ndarray
    timestamps: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 1:
            raise InputError(f"price series must be one-dimensional, got shape {rates.shape}")
        bad = np.flatnonzero(~np.isfinite(rates) | (rates <= 0))
        if bad.size:
            raise InputError(f"prices must be finite and positive; offending indices {bad[:10].tolist()}")
        stamps = tuple(str(i) for i in range(rates.size)) if self.timestamps is None else tuple(self.timestamps)
        if len(stamps) != rates.size:
            raise InputError(f"{len(stamps)} timestamps for {rates.size} prices")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "timestamps", stamps)

    def __len__(self) -> int:
        return self.rates.size

    @property
    def increments(self) -> np.ndarray:
        """z_k = r_k - r_{k-1}; entry k-1 holds z_k."""
        return np.diff(self.rates)

    @property
    def outcomes(self) -> np.ndarray:
        return winning_outcomes(self.increments)


def history_code(outcomes: Sequence[int]) -> int:
    """Encode outcomes (oldest first) as an integer, most recent in bit 0."""
    code = 0
    for shift, w in enumerate(reversed(list(outcomes))):
        if w == 1:
            code |= 1 << shift
    return code


@dataclass(frozen=True, order=True)
class Strategy:
    """Lookup table from m-bit histories to a +1/-1 decision."""

    memory: int
    table: int

    def __post_init__(self):
        if self.memory < 1 or self.memory > MAX_STORED_MEMORY:
            raise InputError(f"memory must be in 1..{MAX_STORED_MEMORY}, got {self.memory}")
        if not 0 <= self.table < (1 << (1 << self.memory)):
            raise InputError(f"table {self.table} out of range for m={self.memory}")

    @property
    def size(self) -> int:
        return 1 << self.memory

    def decision(self, history: int) -> int:
        return 1 if (self.table >> history) & 1 else -1

    def negated(self) -> "Strategy":
        return Strategy(self.memory, self.table ^ ((1 << self.size) - 1))

    @cached_property
    def lookup(self) -> np.ndarray:
        """Decisions for every history as an int8 array of length 2**m."""
        bits = np.array([(self.table >> h) & 1 for h in range(self.size)], dtype=np.int8)
        return 2 * bits - 1


@dataclass(frozen=True, order=True)
class AgentType:
    """A canonical pair of distinct strategies with the same memory."""

    first: Strategy
    second: Strategy

    def __post_init__(self):
        if self.first.memory != self.second.memory:
            raise InputError("both strategies of an agent type must share the same memory")
        if self.first.table >= self.second.table:
            raise InputError("agent type strategies must be distinct and in canonical order")

    @classmethod
    def from_pair(cls, m: int, table_a: int, table_b: int) -> "AgentType":
        if table_a == table_b:
            raise InputError(f"agent type needs two distinct strategies, got {table_a} twice")
        lo, hi = sorted((table_a, table_b))
        return cls(Strategy(m, lo), Strategy(m, hi))

    @property
    def memory(self) -> int:
        return self.first.memory

    @property
    def strategies(self) -> tuple:
        return (self.first, self.second)

    def as_pair(self) -> List[int]:
        return [self.first.table, self.second.table]


# ── Per-step scoring ───────────────────────────────────────────────────────────

def score_strategy(strategy: Strategy, window: Sequence[int], histories: Sequence[int]) -> int:
    """Score a strategy over the outcome window: +1 per correct call, -1 per miss.

    ``histories[i]`` is the m-bit history that preceded ``window[i]``.
    """
    if len(window) != len(histories):
        raise InputError(
            f"window has {len(window)} outcomes but {len(histories)} histories were given"
        )
    return sum(1 if strategy.decision(h) == w else -1 for w, h in zip(window, histories))


def agent_decision(
    agent: AgentType,
    window: Sequence[int],
    histories: Sequence[int],
    current_history: int,
    tie_break: TieBreak = TieBreak.FIRST,
    rng: Optional[np.random.Generator] = None,
) -> int:
    """Decision of the agent's best-scoring strategy for the current history."""
    score_a = score_strategy(agent.first, window, histories)
    score_b = score_strategy(agent.second, window, histories)
    if score_a > score_b:
        chosen = agent.first
    elif score_b > score_a:
        chosen = agent.second
    elif tie_break == TieBreak.RANDOM:
        if rng is None:
            raise InputError("random tie-break needs a seeded generator")
        chosen = agent.strategies[int(rng.integers(2))]
    else:
        chosen = agent.first
    return chosen.decision(current_history)


def _common_memory(types: Sequence[AgentType]) -> int:
    if not types:
        raise InputError("at least one agent type is required")
    memories = {t.memory for t in types}
    if len(memories) != 1:
        raise InputError(f"agent types mix memory sizes {sorted(memories)}")
    return memories.pop()


def build_decision_row(
    types: Sequence[AgentType],
    window: Sequence[int],
    histories: Sequence[int],
    current_history: int,
    tie_break: TieBreak = TieBreak.FIRST,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Decision row H_k: one +1/-1 entry per agent type."""
    _common_memory(types)
    return np.array(
        [agent_decision(t, window, histories, current_history, tie_break, rng) for t in types],
        dtype=float,
    )


# ── Vectorised decision rows ───────────────────────────────────────────────────

def history_codes(outcomes: np.ndarray, m: int) -> np.ndarray:
    """History code preceding every position of an outcome sequence.

    Returns an array of length ``len(outcomes) + 1``; entry t encodes
    outcomes[t-m .. t-1] and is -1 where fewer than m outcomes precede t.
    """
    o = np.asarray(outcomes)
    n = len(o)
    codes = np.full(n + 1, -1, dtype=np.int64)
    if n < m:
        return codes
    bits = (o > 0).astype(np.int64)
    acc = np.zeros(n + 1 - m, dtype=np.int64)
    for j in range(1, m + 1):
        # bit j-1 holds the outcome j steps back
        acc |= bits[m - j:n + 1 - j] << (j - 1)
    codes[m:] = acc
    return codes


def decision_matrix(
    types: Sequence[AgentType],
    outcomes: Sequence[int],
    horizon: int,
    tie_break: TieBreak = TieBreak.FIRST,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Decision rows for every position t = m + T .. len(outcomes).

    Row i is the decision row for outcome position m + T + i; the last row
    belongs to the step after the final outcome. Equals
    :func:`build_decision_row` row by row under the deterministic tie-break.
    """
    m = _common_memory(types)
    o = np.asarray(outcomes, dtype=np.int64)
    n = len(o)
    start = m + horizon
    if n < start:
        raise InputError(f"need at least m + T = {start} outcomes, got {n}")
    if tie_break == TieBreak.RANDOM and rng is None:
        raise InputError("random tie-break needs a seeded generator")

    codes = history_codes(o, m)
    positions = np.arange(start, n + 1)
    coins = rng.random((len(positions), len(types))) < 0.5 if tie_break == TieBreak.RANDOM else None

    rows = np.empty((len(positions), len(types)), dtype=float)
    for col, agent in enumerate(types):
        decisions = []
        scores = []
        for strategy in agent.strategies:
            dec = np.zeros(n + 1, dtype=np.int64)
            dec[m:] = strategy.lookup[codes[m:]]
            correct = np.zeros(n + 1, dtype=np.int64)
            correct[m + 1:] = np.cumsum(dec[m:n] * o[m:n])
            # score at t sums positions t-T .. t-1
            scores.append(correct[positions] - correct[positions - horizon])
            decisions.append(dec[positions])
        pick_second = scores[1] > scores[0]
        tie = scores[1] == scores[0]
        if coins is not None:
            pick_second = pick_second | (tie & coins[:, col])
        rows[:, col] = np.where(pick_second, decisions[1], decisions[0])
    return rows


# ── Strategy space ─────────────────────────────────────────────────────────────

def strategy_count(m: int) -> int:
    """Number of distinct strategies with memory m: 2**(2**m)."""
    if m < 1:
        raise InputError(f"memory must be >= 1, got {m}")
    if m > MAX_COUNTED_MEMORY:
        raise StrategySpaceOverflowError(f"strategy space for m={m} exceeds the supported m <= {MAX_COUNTED_MEMORY}")
    return 1 << (1 << m)


def pair_count(m: int) -> int:
    """Number of agent types (unordered strategy pairs): C(2**(2**m), 2)."""
    s = strategy_count(m)
    return s * (s - 1) // 2


def _pairs_before(first: int, s: int) -> int:
    # pairs whose first table is < first
    return first * (2 * s - first - 1) // 2


def pair_at(m: int, index: int) -> AgentType:
    """Agent type at ``index`` in the lexicographic pair enumeration."""
    s = strategy_count(m)
    total = s * (s - 1) // 2
    if not 0 <= index < total:
        raise InputError(f"pair index {index} out of range [0, {total})")
    # largest a with pairs_before(a) <= index
    disc = (2 * s - 1) ** 2 - 8 * index
    a = max(0, ((2 * s - 1) - math.isqrt(disc)) // 2)
    while a > 0 and _pairs_before(a, s) > index:
        a -= 1
    while _pairs_before(a + 1, s) <= index:
        a += 1
    b = a + 1 + (index - _pairs_before(a, s))
    return AgentType(Strategy(m, a), Strategy(m, b))


def pair_index(agent: AgentType) -> int:
    """Inverse of :func:`pair_at`."""
    s = strategy_count(agent.memory)
    a, b = agent.first.table, agent.second.table
    return _pairs_before(a, s) + (b - a - 1)


def enumerate_pairs(m: int) -> Iterator[AgentType]:
    """All agent types for memory m in canonical order (small m only)."""
    s = strategy_count(m)
    for a in range(s):
        for b in range(a + 1, s):
            yield AgentType(Strategy(m, a), Strategy(m, b))


def sample_agent_subset(m: int, n: int, seed: int) -> List[AgentType]:
    """Draw n distinct agent types uniformly without replacement.

    Deterministic given the seed; returned in enumeration order. Supported for m <= 5, where every pair
    index fits a signed 64-bit integer.
    """
    if m > MAX_STORED_MEMORY:
        raise InputError(f"sampling supports m <= {MAX_STORED_MEMORY}, got {m}")
    total = pair_count(m)
    if n < 1:
        raise InputError(f"subset size must be >= 1, got {n}")
    if n > total:
        raise InputError(f"cannot draw {n} distinct types from {total} pairs at m={m}")

    rng = np.random.default_rng(seed)
    if total <= _EXHAUSTIVE_SAMPLING_LIMIT:
        indices = [int(i) for i in rng.choice(total, size=n, replace=False)]
    else:
        seen: dict = {}
        while len(seen) < n:
            idx = int(rng.integers(0, total, dtype=np.int64))
            seen.setdefault(idx, None)
        indices = list(seen)
    return [pair_at(m, i) for i in sorted(indices)]


def subset_to_schema(types: Sequence[AgentType], seed: int) -> AgentSubset:
    m = _common_memory(types)
    return AgentSubset(m=m, types=[tuple(t.as_pair()) for t in types], seed=seed)


def subset_from_schema(subset: AgentSubset) -> List[AgentType]:
    return [AgentType.from_pair(subset.m, a, b) for a, b in subset.types]
