"""Evaluation metrics: conservation audits, porosity and two-point correlation."""

import csv
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..core.errors import DataError, ShapeMismatchError
from ..core.logging import get_logger
from ..models.lattice import BoundaryCondition, IntensityGrid, check_same_shape

logger = get_logger(__name__)

PathLike = Union[str, Path]


class AuditReport(BaseModel):
    """Per-channel exact total comparison."""

    model_config = ConfigDict(frozen=True)

    before: Tuple[int, ...]
    after: Tuple[int, ...]

    @property
    def deltas(self) -> Tuple[int, ...]:
        return tuple(a - b for a, b in zip(self.after, self.before))

    @property
    def conserved(self) -> Tuple[bool, ...]:
        return tuple(d == 0 for d in self.deltas)

    @property
    def passed(self) -> bool:
        return all(self.conserved)

    def lines(self) -> List[str]:
        rows = [
            f"channel {c}: before={b} after={a} delta={d} {'OK' if ok else 'FAIL'}"
            for c, (b, a, d, ok) in enumerate(zip(self.before, self.after, self.deltas, self.conserved))
        ]
        rows.append(f"conservation: {'PASS' if self.passed else 'FAIL'}")
        return rows


def conservation_audit(before: IntensityGrid, after: IntensityGrid) -> AuditReport:
    """Exact per-channel comparison of totals before and after an operation."""
    check_same_shape(before, after)
    report = AuditReport(before=before.totals(), after=after.totals())
    if not report.passed:
        logger.warning("Conservation audit failed", deltas=report.deltas)
    return report


def totals_audit(grid: IntensityGrid, expected: Sequence[int]) -> AuditReport:
    """Compare ``grid`` against configured per-channel totals."""
    if len(expected) != grid.channels:
        raise ShapeMismatchError(f"Expected {grid.channels} totals, got {len(expected)}")
    return AuditReport(before=tuple(int(n) for n in expected), after=grid.totals())


def intensity_drift_percent(before: IntensityGrid, after: IntensityGrid) -> np.ndarray:
    """Per-channel 100 (after - before) / before; zero-total channels report 0 or inf."""
    check_same_shape(before, after)
    b = np.array(before.totals(), dtype=np.float64)
    a = np.array(after.totals(), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = 100.0 * (a - b) / b
    drift[(b == 0) & (a == b)] = 0.0
    drift[(b == 0) & (a != b)] = np.inf
    return drift


class Binarization(str, Enum):
    """How microstructure metrics treat pixels holding more than one unit."""

    STRICT = "strict"
    CLIP = "clip"


def stacked_pixels(grid: IntensityGrid) -> int:
    """Number of pixels holding more than one unit in any channel."""
    return int(np.any(grid.values > 1, axis=2).sum())


def binarize(grid: IntensityGrid, mode: Binarization = Binarization.STRICT) -> np.ndarray:
    """
    Pore indicator of ``grid`` as a 0/1 array.

    Generated images may stack several units on one pixel. ``CLIP`` counts
    such a pixel as pore phase (min(value, 1)); ``STRICT`` rejects it.

    Raises:
        DataError: In strict mode, if any value exceeds 1
    """
    mode = Binarization(mode)
    if mode is Binarization.CLIP:
        return np.minimum(grid.values, 1)
    if np.any(grid.values > 1):
        raise DataError(
            f"Metric needs a binary grid (values 0 or 1), {stacked_pixels(grid)} pixels hold more; "
            "use clip binarization for generated output"
        )
    return grid.values


def porosity(grid: IntensityGrid, binarization: Binarization = Binarization.STRICT) -> float:
    """Pore-phase fraction of the binarized grid."""
    return float(binarize(grid, binarization).mean())


def two_point_correlation(
    grid: IntensityGrid,
    max_lag: int,
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
    binarization: Binarization = Binarization.STRICT,
) -> np.ndarray:
    """
    S2(ρ) for ρ = 0..max_lag along x and y, averaged over both axes.

    Periodic grids wrap; no-flux grids average only over pairs that fit
    inside the domain. S2(0) equals the porosity.
    """
    values = binarize(grid, binarization)
    if grid.channels != 1:
        raise ShapeMismatchError(f"Two-point correlation needs one channel, got {grid.channels}")
    if not 0 <= max_lag < min(grid.width, grid.height):
        raise ValueError(f"max_lag must lie in [0, {min(grid.width, grid.height)}), got {max_lag}")

    field = values[:, :, 0].astype(np.float64)
    periodic = BoundaryCondition(boundary) is BoundaryCondition.PERIODIC
    s2 = np.zeros(max_lag + 1)
    for lag in range(max_lag + 1):
        per_axis = []
        for axis in (0, 1):
            if periodic:
                per_axis.append(np.mean(field * np.roll(field, lag, axis=axis)))
            else:
                n = field.shape[axis]
                head = np.take(field, np.arange(n - lag), axis=axis)
                tail = np.take(field, np.arange(lag, n), axis=axis)
                per_axis.append(np.mean(head * tail))
        s2[lag] = np.mean(per_axis)
    return s2


def mean_two_point_correlation(
    grids: Sequence[IntensityGrid],
    max_lag: int,
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
    binarization: Binarization = Binarization.STRICT,
) -> np.ndarray:
    """Mean S2 profile over ``grids``."""
    if not grids:
        raise ValueError("No grids to average")
    return np.mean([two_point_correlation(g, max_lag, boundary, binarization) for g in grids], axis=0)


def s2_deviation(
    generated: Sequence[IntensityGrid],
    reference: Sequence[IntensityGrid],
    max_lag: int,
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
    binarization: Binarization = Binarization.STRICT,
) -> float:
    """Mean absolute difference between the two sets' mean S2 profiles over lags 0..max_lag."""
    a = mean_two_point_correlation(generated, max_lag, boundary, binarization)
    b = mean_two_point_correlation(reference, max_lag, boundary, binarization)
    return float(np.mean(np.abs(a - b)))


def write_s2_csv(profile: np.ndarray, path: PathLike) -> None:
    """Write ``lag,S2`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lag", "S2"])
        for lag, value in enumerate(profile):
            writer.writerow([lag, repr(float(value))])
