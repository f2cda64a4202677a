"""Pydantic schemas for configuration and serialized documents"""
from popinfer.schemas.run import (
    BiasConfig,
    BiasMode,
    InitialConditions,
    IterationConfig,
    NoiseConfig,
    RunConfig,
    TieBreak,
)
from popinfer.schemas.subset import AgentSubset
from popinfer.schemas.synth import SynthSpec

__all__ = [
    "AgentSubset",
    "BiasConfig",
    "BiasMode",
    "InitialConditions",
    "IterationConfig",
    "NoiseConfig",
    "RunConfig",
    "SynthSpec",
    "TieBreak",
]
