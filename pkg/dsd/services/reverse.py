"""Exact reverse-time jump rates.

A particle that started at o and sits at x at time t jumps along ν̄ at rate
``r p_t(x + ν̄ | o) / p_t(x | o)``. Particles move independently, so the rate
of the first jump out of a pixel is the sum of its residents' rates.
"""

from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from ..core.codec import pack_container, unpack_container
from ..core.config import get_settings
from ..core.errors import KernelFormatError, ZeroProbabilityError
from ..core.logging import get_logger
from ..models.lattice import (
    DIRECTIONS,
    Direction,
    IntensityGrid,
    ParticleLedger,
    RateField,
    shift_coords,
)
from .kernel import TransitionKernel, check_kernel_matches

logger = get_logger(__name__)

PathLike = Union[str, Path]
Pixel = Tuple[int, int]

RATES_MAGIC = b"DSDR"
_HEADER_FMT = "III"


def particle_rates(
    kernel: TransitionKernel,
    origins: np.ndarray,
    currents: np.ndarray,
    rate: float,
    floor: Optional[float] = None,
) -> np.ndarray:
    """
    Per-particle reverse rates, shape (4, N), axis 0 in Direction order.

    Raises:
        ZeroProbabilityError: If some particle sits where its kernel row is 0
    """
    floor = get_settings().prob_floor if floor is None else floor
    ox, oy = origins[:, 0], origins[:, 1]
    cx, cy = currents[:, 0], currents[:, 1]
    here = kernel.prob_many(ox, oy, cx, cy)
    if np.any(here <= 0.0):
        bad = int(np.flatnonzero(here <= 0.0)[0])
        raise ZeroProbabilityError(
            f"Particle at {tuple(currents[bad])} has zero probability from origin {tuple(origins[bad])}"
        )
    here = np.maximum(here, floor)

    out = np.zeros((len(DIRECTIONS), len(origins)))
    for direction in DIRECTIONS:
        nx, ny, valid = shift_coords(cx, cy, direction, kernel.boundary, kernel.width, kernel.height)
        there = kernel.prob_many(ox, oy, nx, ny)
        out[direction.index] = np.where(valid, rate * there / here, 0.0)
    return out


def per_particle_rate(
    kernel: TransitionKernel,
    origin: Pixel,
    current: Pixel,
    direction: Direction,
    rate: float,
) -> float:
    """Reverse rate of one particle (origin -> current) jumping along ``direction``."""
    rates = particle_rates(
        kernel,
        np.array([origin], dtype=np.int64),
        np.array([current], dtype=np.int64),
        rate,
    )
    return float(rates[direction.index, 0])


def oracle_rates(
    ledger: ParticleLedger,
    grid_t: IntensityGrid,
    kernel: TransitionKernel,
    rate: float,
) -> RateField:
    """Aggregate per-particle rates onto the pixels the particles currently occupy."""
    check_kernel_matches(kernel, grid_t)
    ledger.check_against(grid_t, "current")

    values = np.zeros((len(DIRECTIONS), grid_t.width, grid_t.height, grid_t.channels))
    for c in range(ledger.channels):
        origins, currents = ledger.origins[c], ledger.currents[c]
        if len(origins) == 0:
            continue
        rates = particle_rates(kernel, origins, currents, rate)
        for d in range(len(DIRECTIONS)):
            np.add.at(values[d, :, :, c], (currents[:, 0], currents[:, 1]), rates[d])
    return RateField(values=values)


def encode_rate_field(field: RateField) -> bytes:
    """Serialize ``field`` as a ``DSDR`` container, direction-major then x, y, c."""
    payload = field.values.astype("<f8").tobytes()
    return pack_container(RATES_MAGIC, _HEADER_FMT, (field.width, field.height, field.channels), payload)


def decode_rate_field(data: bytes) -> RateField:
    """
    Decode a ``DSDR`` container.

    Raises:
        KernelFormatError: On bad magic, version or payload size
        ChecksumMismatchError: If the CRC32 does not match
    """
    (width, height, channels), payload = unpack_container(data, RATES_MAGIC, _HEADER_FMT)
    values = np.frombuffer(payload, dtype="<f8")
    expected = len(DIRECTIONS) * width * height * channels
    if values.size != expected:
        raise KernelFormatError(f"Rate payload holds {values.size} values, expected {expected}")
    return RateField(values=values.reshape(len(DIRECTIONS), width, height, channels))


def save_rate_field(field: RateField, path: PathLike) -> None:
    """Write a ``DSDR`` container (direction-major, then x, y, c)."""
    Path(path).write_bytes(encode_rate_field(field))


def load_rate_field(path: PathLike) -> RateField:
    """Read a rate field written by :func:`save_rate_field`."""
    return decode_rate_field(Path(path).read_bytes())
