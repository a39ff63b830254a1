"""Run configuration models for sampling and training."""

from pathlib import Path
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .lattice import BoundaryCondition
from .schedule import Schedule

LossKind = Literal["l1", "likelihood"]


class SamplerConfig(BaseModel):
    """Reverse-time generation settings."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(..., ge=1, description="Lattice width W")
    height: int = Field(..., ge=1, description="Lattice height H")
    eps: float = Field(default=0.15, description="CFL tolerance")
    boundary: BoundaryCondition = Field(default=BoundaryCondition.PERIODIC)
    rate: float = Field(default=120.0, gt=0, description="Forward jump rate r")
    totals: Tuple[int, ...] = Field(..., min_length=1, description="Per-channel totals")
    mask: Optional[np.ndarray] = Field(default=None, description="Frozen pixels, (W, H) bool")
    max_steps: int = Field(default=200_000, ge=1, description="Safety bound on iterations")

    @field_validator("eps")
    @classmethod
    def validate_eps(cls, v: float) -> float:
        """CFL tolerance must lie strictly inside (0, 1)."""
        if not 0.0 < v < 1.0:
            raise ValueError("eps must satisfy 0 < eps < 1")
        return v

    @field_validator("totals")
    @classmethod
    def validate_totals(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(n < 0 for n in v):
            raise ValueError("Channel totals must be non-negative")
        return tuple(int(n) for n in v)

    @field_validator("mask", mode="before")
    @classmethod
    def validate_mask(cls, v) -> Optional[np.ndarray]:
        if v is None:
            return None
        mask = np.array(v, dtype=bool)
        mask.setflags(write=False)
        return mask

    @model_validator(mode="after")
    def validate_mask_shape(self) -> "SamplerConfig":
        if self.mask is not None and self.mask.shape != (self.width, self.height):
            raise ValueError(
                f"Mask shape {self.mask.shape} does not match lattice {(self.width, self.height)}"
            )
        return self

    @property
    def channels(self) -> int:
        return len(self.totals)


class TrainConfig(BaseModel):
    """Training loop settings."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    loss: LossKind = Field(default="l1", description="Rate-matching L1 or process likelihood")
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=8, ge=1)
    iterations: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    schedule: Schedule
    rate: float = Field(default=120.0, gt=0)
    boundary: BoundaryCondition = Field(default=BoundaryCondition.PERIODIC)
    dataset_path: Optional[Path] = Field(default=None)
    hidden: int = Field(default=32, ge=1, description="Feature maps per hidden layer")
    workers: int = Field(default=1, ge=1, description="Example-preparation threads")
    log_every: int = Field(default=100, ge=1)
