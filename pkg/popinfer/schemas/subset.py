"""Pydantic schema for serialized agent subsets"""
from typing import List, Tuple

from pydantic import BaseModel, Field, field_validator


class AgentSubset(BaseModel):
    """A set of agent types, each a pair of bit-packed strategy tables."""

    m: int = Field(..., ge=1, le=5, description="Memory size shared by every strategy")
    types: List[Tuple[int, int]] = Field(..., min_length=1, description="[tableA, tableB] pairs")
    seed: int = Field(0, description="Seed the subset was drawn with")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"m": 1, "types": [[0, 1], [1, 3]], "seed": 7},
            ]
        }
    }

    @field_validator("types")
    @classmethod
    def _tables_in_range(cls, value, info):
        m = info.data.get("m")
        if m is None:
            return value
        limit = 1 << (1 << m)
        for a, b in value:
            if not (0 <= a < limit and 0 <= b < limit):
                raise ValueError(f"strategy table out of range for m={m}: {[a, b]}")
            if a == b:
                raise ValueError(f"agent type needs two distinct strategies: {[a, b]}")
        return value
