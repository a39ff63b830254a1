"""Data models for the engine."""

from .configs import SamplerConfig, TrainConfig
from .lattice import (
    DIRECTIONS,
    BoundaryCondition,
    Direction,
    IntensityGrid,
    ParticleLedger,
    RateField,
    total_intensity,
)
from .schedule import DegradationCurve, Schedule

__all__ = [
    "DIRECTIONS",
    "BoundaryCondition",
    "DegradationCurve",
    "Direction",
    "IntensityGrid",
    "ParticleLedger",
    "RateField",
    "SamplerConfig",
    "Schedule",
    "TrainConfig",
    "total_intensity",
]
