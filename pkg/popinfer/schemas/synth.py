"""Pydantic schema for the synthetic market generator"""
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from popinfer.schemas.run import TieBreak


class SynthSpec(BaseModel):
    """Planted-truth market specification"""

    memory: int = Field(2, ge=1, le=5)
    types: Optional[List[Tuple[int, int]]] = Field(None, description="Planted [tableA, tableB] pairs")
    n_types: int = Field(3, ge=1, description="Planted types to sample when 'types' is omitted")
    weights: Optional[List[float]] = Field(None, description="Planted composition x* (default all 1/n)")
    sigma_z: Optional[float] = Field(None, ge=0, description="Measurement noise std (default 0.1 * sum(weights))")
    bias: float = Field(0.0, description="Constant measurement offset beta")
    length: int = Field(2000, ge=3, description="Number of prices r_0 .. r_{L-1}")
    horizon: int = Field(10, ge=1, description="Scoring window T")
    seed: int = Field(0, ge=0)
    r0: float = Field(1000.0, gt=0, description="Initial price")
    initial_outcomes: Optional[List[int]] = Field(None, description="Warm-up outcomes (+1/-1), length m + T")
    tie_break: TieBreak = TieBreak.FIRST

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"memory": 2, "types": [[3, 12], [5, 10], [0, 15]], "weights": [0.6, 0.3, 0.1],
                 "length": 2000, "horizon": 10, "seed": 11},
            ]
        }
    }

    @model_validator(mode="after")
    def _consistent(self):
        n = len(self.types) if self.types is not None else self.n_types
        if self.weights is not None:
            if len(self.weights) != n:
                raise ValueError(f"weights has {len(self.weights)} entries, expected {n}")
            if any(w < 0 for w in self.weights):
                raise ValueError("planted weights must be non-negative")
        if self.length <= self.memory + self.horizon + 1:
            raise ValueError("length must exceed the warm-up m + T + 1")
        if self.initial_outcomes is not None:
            if len(self.initial_outcomes) != self.memory + self.horizon:
                raise ValueError("initial_outcomes must have exactly m + T entries")
            if any(w not in (-1, 1) for w in self.initial_outcomes):
                raise ValueError("initial_outcomes entries must be +1 or -1")
        return self

    @property
    def planted_weights(self) -> List[float]:
        n = len(self.types) if self.types is not None else self.n_types
        return list(self.weights) if self.weights is not None else [1.0 / n] * n

    @property
    def noise_std(self) -> float:
        if self.sigma_z is not None:
            return self.sigma_z
        return 0.1 * sum(self.planted_weights)
