"""Forward corruption: every intensity unit walks independently to time t."""

from typing import Optional, Tuple

import numpy as np

from ..core.config import get_settings
from ..core.errors import ZeroProbabilityError
from ..core.logging import get_logger
from ..models.lattice import BoundaryCondition, IntensityGrid, ParticleLedger
from ..models.schedule import Schedule
from .kernel import KernelBank, TransitionKernel, check_kernel_matches

logger = get_logger(__name__)

_MAX_REDRAWS = 100


def _move_channel(
    origins: np.ndarray, kernel: TransitionKernel, rng: np.random.Generator, floor: float
) -> np.ndarray:
    ox, oy = origins[:, 0], origins[:, 1]
    xs, ys = kernel.sample_many(ox, oy, rng)

    # Redraw particles whose realised position is too improbable for the reverse ratio.
    for _ in range(_MAX_REDRAWS):
        bad = np.flatnonzero(kernel.prob_many(ox, oy, xs, ys) < floor)
        if bad.size == 0:
            break
        logger.debug("Redrawing underflowing particles", count=int(bad.size))
        xs[bad], ys[bad] = kernel.sample_many(ox[bad], oy[bad], rng)
    else:
        raise ZeroProbabilityError(
            f"Could not draw positions above probability floor {floor} after {_MAX_REDRAWS} tries"
        )
    return np.stack([xs, ys], axis=1)


def corrupt(
    grid: IntensityGrid, kernel: TransitionKernel, rng: np.random.Generator
) -> Tuple[IntensityGrid, ParticleLedger]:
    """
    Move every particle of ``grid`` by one draw from ``kernel``.

    Channels never mix and per-channel totals are preserved exactly; the
    returned ledger pairs each particle's origin with its new position.
    """
    check_kernel_matches(kernel, grid)
    floor = get_settings().prob_floor
    start = ParticleLedger.from_grid(grid)
    currents = [_move_channel(o, kernel, rng, floor) for o in start.origins]
    ledger = start.with_currents(currents)
    corrupted = ledger.histogram("current")

    assert corrupted.totals() == grid.totals(), "corruption changed channel totals"
    logger.debug(
        "Corrupted grid",
        time=kernel.time,
        rate=kernel.rate,
        boundary=kernel.boundary.value,
        particles=sum(ledger.count(c) for c in range(ledger.channels)),
    )
    return corrupted, ledger


def corrupt_at_step(
    grid: IntensityGrid,
    schedule: Schedule,
    k: int,
    rate: float,
    boundary: BoundaryCondition,
    rng: np.random.Generator,
    bank: Optional[KernelBank] = None,
) -> Tuple[IntensityGrid, ParticleLedger, float]:
    """Corrupt ``grid`` to observation time t_k; also return Δt = t_k - t_{k-1}."""
    if not 1 <= k <= schedule.T:
        raise IndexError(f"Step k={k} outside 1..{schedule.T}")
    if bank is None:
        bank = KernelBank(grid.width, grid.height, rate, boundary, get_settings().kernel_cache_dir)
    elif (bank.width, bank.height, bank.rate, bank.boundary) != (
        grid.width,
        grid.height,
        float(rate),
        BoundaryCondition(boundary),
    ):
        raise ValueError("Kernel bank does not match grid, rate or boundary")
    corrupted, ledger = corrupt(grid, bank.get(schedule.time(k)), rng)
    return corrupted, ledger, schedule.delta(k)
