"""Prometheus metrics definitions shared across the package"""
from prometheus_client import Counter, Histogram

RUNS_TOTAL = Counter(
    "popinfer_runs_total",
    "Total filter runs executed",
    ["status"],
)

FILTER_STEPS = Counter(
    "popinfer_filter_steps_total",
    "Total constrained filter steps",
)

INNER_ITERATIONS = Histogram(
    "popinfer_inner_iterations",
    "Active-set iterations per constrained step",
    buckets=(1, 2, 3, 4, 6, 8, 12, 20, 50),
)

ACTIVE_CONSTRAINTS = Histogram(
    "popinfer_active_constraints",
    "Active inequality constraints at the end of a step",
    buckets=(0, 1, 2, 3, 5, 8, 13, 21),
)

RUN_DURATION = Histogram(
    "popinfer_run_duration_seconds",
    "Wall time of a single filter run",
)

KKT_RANK_DEFICIENT = Counter(
    "popinfer_kkt_rank_deficient_total",
    "KKT systems that were rank deficient beyond constraint redundancy",
)
