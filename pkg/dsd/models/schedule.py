"""Observation-time schedule and calibration curve models."""

from pathlib import Path
from typing import Dict, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ScheduleKind = Literal["logit", "poly", "cosine"]


class Schedule(BaseModel):
    """Observation times t_1 < ... < t_T = 1; t_0 = 0 is implicit."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: ScheduleKind = Field(..., description="Schedule family")
    params: Dict[str, float] = Field(default_factory=dict, description="Family parameters")
    times: np.ndarray = Field(..., description="t_1..t_T")

    @field_validator("times", mode="before")
    @classmethod
    def validate_times(cls, v) -> np.ndarray:
        times = np.array(v, dtype=np.float64).ravel()
        if times.size < 1:
            raise ValueError("Schedule needs at least one time")
        if not np.all(np.isfinite(times)) or times[0] <= 0.0:
            raise ValueError("Schedule times must be finite and positive")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("Schedule times must be strictly increasing")
        if times[-1] != 1.0:
            raise ValueError(f"Final schedule time must be exactly 1, got {times[-1]!r}")
        times.setflags(write=False)
        return times

    @property
    def T(self) -> int:
        return int(self.times.size)

    def time(self, k: int) -> float:
        """t_k for 0 <= k <= T."""
        if not 0 <= k <= self.T:
            raise IndexError(f"Step {k} outside 0..{self.T}")
        return 0.0 if k == 0 else float(self.times[k - 1])

    def delta(self, k: int) -> float:
        """t_k - t_{k-1} for 1 <= k <= T, used to weight the likelihood loss."""
        if not 1 <= k <= self.T:
            raise IndexError(f"Step {k} outside 1..{self.T}")
        return self.time(k) - self.time(k - 1)

    def to_csv(self, path: Union[str, Path]) -> None:
        ks = np.arange(1, self.T + 1)
        np.savetxt(
            path,
            np.column_stack([ks, self.times]),
            delimiter=",",
            header="k,t_k",
            comments="",
            fmt=["%d", "%.17g"],
        )


class DegradationCurve(BaseModel):
    """Mean SSIM between clean and corrupted samples at each observation step."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    steps: np.ndarray = Field(..., description="k = 0..T")
    times: np.ndarray = Field(..., description="t_k, with t_0 = 0")
    mean_ssim: np.ndarray
    stderr: np.ndarray

    @model_validator(mode="after")
    def validate_lengths(self) -> "DegradationCurve":
        n = len(self.steps)
        if not (len(self.times) == len(self.mean_ssim) == len(self.stderr) == n):
            raise ValueError("Degradation curve columns differ in length")
        return self

    def to_csv(self, path: Union[str, Path]) -> None:
        np.savetxt(
            path,
            np.column_stack([self.steps, self.times, self.mean_ssim, self.stderr]),
            delimiter=",",
            header="k,t_k,mean_ssim,stderr",
            comments="",
            fmt=["%d", "%.17g", "%.17g", "%.17g"],
        )
