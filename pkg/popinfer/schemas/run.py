"""Pydantic schemas for inference run configuration"""
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class BiasMode(str, Enum):
    """Bias augmentation modes"""
    NONE = "none"  # No bias state
    MEASUREMENT = "measurement"  # One bias term added to the measurement (C = 1)


class TieBreak(str, Enum):
    """How an agent picks between equally scored strategies"""
    FIRST = "first"
    RANDOM = "random"


class BiasConfig(BaseModel):
    mode: BiasMode = BiasMode.MEASUREMENT
    bias_noise: float = Field(0.0, ge=0, description="Process-noise variance of the bias term")
    prior_variance: float = Field(1.0, gt=0, description="Initial variance of the bias estimate")


class IterationConfig(BaseModel):
    tol: float = Field(1e-9, gt=0, description="Convergence bound on the inner-iteration step")
    max_iter: int = Field(20, ge=1, description="Maximum active-set iterations per timestep")


class InitialConditions(BaseModel):
    mean: Optional[List[float]] = Field(None, description="Initial composition (default 1/N per type)")
    variance: float = Field(1.0, gt=0, description="P0 = variance * I")

    @model_validator(mode="after")
    def _non_negative_mean(self):
        if self.mean is not None and any(v < 0 for v in self.mean):
            raise ValueError("initial composition must be non-negative")
        return self


class NoiseConfig(BaseModel):
    r0: Optional[float] = Field(None, gt=0, description="Fallback R before the window fills")
    q0_scale: float = Field(1e-4, ge=0, description="Fallback Q = q0_scale * R0 * I")
    floor: float = Field(1e-8, gt=0, description="Eigenvalue floor for estimated covariances")
    diagonal_q: bool = Field(True, description="Zero the off-diagonal entries of Q-hat")
    update_every: int = Field(1, ge=1, description="Re-estimation cadence in steps")


class RunConfig(BaseModel):
    """Inference run configuration"""

    memory: int = Field(4, ge=1, le=5, description="Strategy memory m")
    subset_size: int = Field(5, ge=1, description="Agent types per run (N)")
    horizon: int = Field(10, ge=1, description="Scoring window T")
    window: int = Field(50, ge=2, description="Noise-estimation window W")
    runs: int = Field(100, ge=1, description="Ensemble size M")
    seed: int = Field(0, ge=0, description="Master seed")
    tie_break: TieBreak = TieBreak.FIRST

    bias: BiasConfig = Field(default_factory=BiasConfig)
    iteration: IterationConfig = Field(default_factory=IterationConfig)
    initial: InitialConditions = Field(default_factory=InitialConditions)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"memory": 2, "subset_size": 5, "horizon": 10, "window": 50, "runs": 25, "seed": 1,
                 "bias": {"mode": "measurement"}},
            ]
        }
    }

    @model_validator(mode="after")
    def _initial_mean_matches(self):
        mean = self.initial.mean
        if mean is not None and len(mean) != self.subset_size:
            raise ValueError(f"initial.mean has {len(mean)} entries, expected subset_size={self.subset_size}")
        return self

    @property
    def warmup(self) -> int:
        """Index of the first estimation step in the price series."""
        return self.memory + self.horizon + 1
