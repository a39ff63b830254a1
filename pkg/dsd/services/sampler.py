"""Reverse-time generation by binomial τ-leaping with a CFL-adaptive step.

Each step evaluates the predictor once, picks ``τ = min(t, ε / max rate)``,
draws ``Binomial(n, min(1, τ Σ_ν̄ r̄))`` movers per pixel and channel and splits
them across directions with ``Multinomial(p_ν̄ ∝ r̄_ν̄)``. Binomial draws never
exceed occupancy, so populations stay non-negative and totals are conserved.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from ..core.errors import MaxStepsExceededError, NonFiniteRateError, ShapeMismatchError
from ..core.logging import get_logger
from ..core.rng import derive_rng
from ..models.configs import SamplerConfig
from ..models.lattice import DIRECTIONS, BoundaryCondition, IntensityGrid, RateField, shift_coords
from .forward import corrupt
from .kernel import TransitionKernel, kernel_for
from .rate_model import LedgerAwarePredictor, RatePredictor

logger = get_logger(__name__)

PathLike = Union[str, Path]


class TraceRow(NamedTuple):
    step: int
    t: float
    tau: float
    max_rate: float
    totals: tuple


def write_trace(rows: Sequence[TraceRow], path: PathLike) -> None:
    """Per-step trace CSV; channel totals are joined with ';'."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "tau", "max_rate", "total_intensity_per_channel"])
        for row in rows:
            writer.writerow(
                [row.step, repr(row.t), repr(row.tau), repr(row.max_rate), ";".join(map(str, row.totals))]
            )


def init_noise(
    width: int,
    height: int,
    channels: int,
    totals: Sequence[int],
    kernel_1: TransitionKernel,
    rng: np.random.Generator,
) -> IntensityGrid:
    """Fully corrupted start: scatter each channel's units, then move them with the t=1 kernel."""
    if len(totals) != channels:
        raise ValueError(f"Expected {channels} channel totals, got {len(totals)}")
    if (kernel_1.width, kernel_1.height) != (width, height):
        raise ShapeMismatchError("t=1 kernel does not match the requested lattice")
    values = np.zeros((width, height, channels), dtype=np.int64)
    uniform = np.full(width * height, 1.0 / (width * height))
    for c, total in enumerate(totals):
        values[:, :, c] = rng.multinomial(int(total), uniform).reshape(width, height)
    noise, _ = corrupt(IntensityGrid(values=values), kernel_1, rng)
    return noise


def admissible_mask(
    boundary: BoundaryCondition, width: int, height: int, frozen: Optional[np.ndarray] = None
) -> np.ndarray:
    """(4, W, H) 0/1 factors: no jumps through NoFlux walls or into/out of frozen pixels."""
    xs, ys = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
    mask = np.zeros((len(DIRECTIONS), width, height))
    for d in DIRECTIONS:
        nx, ny, valid = shift_coords(xs, ys, d, boundary, width, height)
        if frozen is not None:
            valid = valid & ~frozen & ~frozen[nx, ny]
        mask[d.index] = valid
    return mask


def _rate_array(rates: Union[RateField, np.ndarray]) -> np.ndarray:
    values = rates.values if isinstance(rates, RateField) else np.asarray(rates, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteRateError("Rates contain NaN or infinite entries")
    if np.any(values < 0):
        raise NonFiniteRateError("Rates contain negative entries")
    return values


def cfl_step(rates: Union[RateField, np.ndarray], t: float, eps: float) -> float:
    """τ = min(t, ε / max rate); τ = t when every rate is zero."""
    values = _rate_array(rates)
    if not t > 0:
        raise ValueError(f"Current time must be positive, got {t}")
    peak = float(values.max()) if values.size else 0.0
    if peak == 0.0:
        return float(t)
    return float(min(t, eps / peak))


def draw_moves(
    grid: IntensityGrid,
    rates: Union[RateField, np.ndarray],
    tau: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mover counts per (direction, x, y, c) for one leap of length ``tau``."""
    values = _rate_array(rates)
    if values.shape != (len(DIRECTIONS),) + grid.shape:
        raise ShapeMismatchError(f"Rates {values.shape} do not fit grid {grid.shape}")
    total = values.sum(axis=0)
    p_move = np.clip(tau * total, 0.0, 1.0)
    movers = rng.binomial(grid.values, p_move)

    live = total > 0
    split = np.full(values.shape, 0.25)
    split[:, live] = values[:, live] / total[live]
    counts = rng.multinomial(movers, np.moveaxis(split, 0, -1))
    return np.moveaxis(counts, -1, 0).astype(np.int64)


def apply_moves(grid: IntensityGrid, moves: np.ndarray, boundary: BoundaryCondition) -> IntensityGrid:
    """Move counted units to their neighbours; moves across NoFlux walls must be zero."""
    values = grid.values - moves.sum(axis=0)
    for d in DIRECTIONS:
        incoming = moves[d.index]
        if boundary is BoundaryCondition.NOFLUX:
            xs, ys = np.meshgrid(np.arange(grid.width), np.arange(grid.height), indexing="ij")
            _, _, valid = shift_coords(xs, ys, d, boundary, grid.width, grid.height)
            assert not np.any(incoming[~valid]), "move through a no-flux wall"
        values = values + np.roll(incoming, shift=(d.dx, d.dy), axis=(0, 1))
    assert np.all(values >= 0), "negative population"
    return IntensityGrid(values=values)


def tau_leap_step(
    grid: IntensityGrid,
    rates: Union[RateField, np.ndarray],
    tau: float,
    rng: np.random.Generator,
    mask: Optional[np.ndarray] = None,
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
) -> IntensityGrid:
    """One binomial leap; ``mask`` marks frozen pixels that neither emit nor receive."""
    values = _rate_array(rates)
    if values.shape != (len(DIRECTIONS),) + grid.shape:
        raise ShapeMismatchError(f"Rates {values.shape} do not fit grid {grid.shape}")
    values = values * admissible_mask(boundary, grid.width, grid.height, mask)[..., None]
    moves = draw_moves(grid, values, tau, rng)
    stepped = apply_moves(grid, moves, boundary)
    assert stepped.totals() == grid.totals(), "leap changed channel totals"
    return stepped


def _run(
    predictor: RatePredictor,
    grid: IntensityGrid,
    config: SamplerConfig,
    rng: np.random.Generator,
    trace: Optional[List[TraceRow]],
) -> IntensityGrid:
    admissible = admissible_mask(config.boundary, config.width, config.height, config.mask)[..., None]
    totals = grid.totals()
    t = 1.0
    step = 0
    while t > 0.0:
        if step >= config.max_steps:
            raise MaxStepsExceededError(config.max_steps, t)
        predicted = predictor(grid, t)
        if predicted.shape != (len(DIRECTIONS),) + grid.shape:
            raise ShapeMismatchError(f"Predictor returned {predicted.shape} for grid {grid.shape}")
        rates = predicted.values * admissible
        tau = cfl_step(rates, t, config.eps)

        moves = draw_moves(grid, rates, tau, rng)
        if isinstance(predictor, LedgerAwarePredictor):
            predictor.observe(moves, rng)
        grid = apply_moves(grid, moves, config.boundary)
        assert grid.totals() == totals, "leap changed channel totals"

        peak = float(rates.max()) if rates.size else 0.0
        if trace is not None:
            trace.append(TraceRow(step, t, tau, peak, grid.totals()))
        logger.debug("Leap", step=step, t=t, tau=tau, max_rate=peak)
        t = t - tau if tau < t else 0.0
        step += 1

    logger.debug("Reverse run finished", steps=step, totals=totals)
    return grid


def generate(
    predictor: RatePredictor,
    config: SamplerConfig,
    rng: np.random.Generator,
    trace: Optional[List[TraceRow]] = None,
) -> IntensityGrid:
    """Run the reverse process from t=1 to t=0 and return the generated grid.

    Raises:
        ValueError: If ``config.mask`` is set; frozen regions go through :func:`inpaint`
    """
    if config.mask is not None:
        raise ValueError("generate() does not take a frozen mask; use inpaint() for masked regions")
    kernel_1 = kernel_for(config.boundary, config.width, config.height, config.rate, 1.0)
    if isinstance(predictor, LedgerAwarePredictor):
        grid = predictor.prime(kernel_1, rng)
        if grid.totals() != config.totals:
            raise ValueError(f"Oracle ledger totals {grid.totals()} differ from config {config.totals}")
    else:
        grid = init_noise(config.width, config.height, config.channels, config.totals, kernel_1, rng)
    return _run(predictor, grid, config, rng, trace)


def generate_batch(
    make_predictor: Callable[[int], RatePredictor],
    config: SamplerConfig,
    count: int,
    seed: int,
    threads: int = 1,
) -> List[IntensityGrid]:
    """``count`` independent generations; image i uses the stream keyed (seed, i)."""

    def one(index: int) -> IntensityGrid:
        return generate(make_predictor(index), config, derive_rng(seed, "generate", index))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        images = list(pool.map(one, range(count)))
    logger.info("Generated batch", count=count, totals=config.totals, eps=config.eps)
    return images


def inpaint(
    predictor: RatePredictor,
    partial: IntensityGrid,
    mask: np.ndarray,
    region_totals: Sequence[int],
    config: SamplerConfig,
    rng: np.random.Generator,
) -> IntensityGrid:
    """
    Regenerate the free region of ``partial`` with exact per-channel totals.

    Frozen pixels (``mask`` True) keep their values bit-for-bit; no unit
    crosses the mask boundary in either direction.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (partial.width, partial.height):
        raise ShapeMismatchError(f"Mask {mask.shape} does not match grid {(partial.width, partial.height)}")
    if len(region_totals) != partial.channels:
        raise ValueError(f"Expected {partial.channels} region totals, got {len(region_totals)}")
    if isinstance(predictor, LedgerAwarePredictor):
        raise ValueError("Inpainting needs a learned predictor, not a ledger oracle")

    free = ~mask
    n_free = int(free.sum())
    values = partial.values.copy()
    values[free] = 0
    for c, total in enumerate(region_totals):
        if total < 0:
            raise ValueError("Region totals must be non-negative")
        if total and not n_free:
            raise ValueError("Positive region total but every pixel is frozen")
        if n_free:
            values[:, :, c][free] = rng.multinomial(int(total), np.full(n_free, 1.0 / n_free))
    start = IntensityGrid(values=values)

    run_config = config.model_copy(
        update={
            "width": partial.width,
            "height": partial.height,
            "mask": mask,
            "totals": start.totals(),
        }
    )
    result = _run(predictor, start, run_config, rng, None)
    assert np.array_equal(result.values[mask], partial.values[mask]), "frozen region changed"
    return result
