"""
Test configuration and shared fixtures.

Environment variables are set BEFORE any popinfer import so that
pydantic-settings picks them up when Settings() is first instantiated.
"""
import os

# ── 1. Env vars (must come before any popinfer import) ────────────────────────
os.environ.setdefault("POPINFER_DEBUG", "false")
os.environ.setdefault("POPINFER_JSON_LOGS", "false")
os.environ.setdefault("POPINFER_MAX_CONCURRENT_RUNS", "2")
os.environ.setdefault("POPINFER_ROLLING_WINDOW", "20")

# ── 2. Normal imports (settings can now be safely read) ───────────────────────
import numpy as np
import pytest

from popinfer.schemas import BiasMode, RunConfig, SynthSpec
from popinfer.services.kalman import GaussianEstimate, LinearModel
from popinfer.services.synthetic import generate_synthetic

PLANTED_TYPES = [[3, 12], [5, 10], [0, 15]]
PLANTED_WEIGHTS = [0.6, 0.3, 0.1]


# ── Fixtures ──────────────────────────────────────────────────────────────────

@pytest.fixture
def rng():
    """Seeded generator for randomised property checks."""
    return np.random.default_rng(20240611)


@pytest.fixture
def random_gaussian_problem(rng):
    """Factory for random linear-Gaussian single steps with state dimension <= 5."""

    def make(n=None, p=None):
        n = n or int(rng.integers(1, 6))
        p = p or int(rng.integers(1, 4))
        A = rng.normal(size=(n, n))
        prior = GaussianEstimate(rng.normal(size=n), A @ A.T + 0.1 * np.eye(n))
        F = np.eye(n) + 0.1 * rng.normal(size=(n, n))
        B = rng.normal(size=(n, n))
        Q = 0.1 * (B @ B.T) + 0.01 * np.eye(n)
        H = rng.normal(size=(p, n))
        C = rng.normal(size=(p, p))
        R = C @ C.T + 0.1 * np.eye(p)
        z = rng.normal(size=p)
        return prior, LinearModel(F, Q, H, R), z

    return make


@pytest.fixture(scope="session")
def noiseless_market():
    """Single planted type with weight 1 and no noise: every z_k is exactly +-1."""
    spec = SynthSpec(memory=2, types=[[3, 12]], weights=[1.0], sigma_z=0.0, length=600, horizon=10, seed=3)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def planted_market():
    """Three planted types, noise at 10% of the weight sum."""
    spec = SynthSpec(memory=2, types=PLANTED_TYPES, weights=PLANTED_WEIGHTS, length=1500, horizon=10, seed=11)
    return generate_synthetic(spec)


@pytest.fixture
def planted_run_config():
    """Filter configuration matching the planted three-type market, no bias state."""
    return RunConfig(memory=2, subset_size=3, horizon=10, window=50, runs=1, seed=5,
                     bias={"mode": BiasMode.NONE})
