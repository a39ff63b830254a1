"""Lattice data models: grids, directions, boundaries, ledgers and rate fields."""

from enum import Enum
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.errors import LedgerMismatchError, NonFiniteRateError, ShapeMismatchError

INT64_MAX = 2**63 - 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class Direction(Enum):
    """Unit displacement of a nearest-neighbour jump."""

    PLUS_X = (1, 0)
    MINUS_X = (-1, 0)
    PLUS_Y = (0, 1)
    MINUS_Y = (0, -1)

    @property
    def dx(self) -> int:
        return self.value[0]

    @property
    def dy(self) -> int:
        return self.value[1]

    @property
    def index(self) -> int:
        """Position along axis 0 of a RateField."""
        return _DIRECTION_INDEX[self]

    def reverse(self) -> "Direction":
        return Direction((-self.dx, -self.dy))


DIRECTIONS: Tuple[Direction, ...] = tuple(Direction)
_DIRECTION_INDEX = {d: i for i, d in enumerate(DIRECTIONS)}


class BoundaryCondition(str, Enum):
    """Lattice edge rule shared by forward corruption, reverse rates and sampling."""

    NOFLUX = "noflux"
    PERIODIC = "periodic"

    @property
    def code(self) -> int:
        return 0 if self is BoundaryCondition.NOFLUX else 1

    @classmethod
    def from_code(cls, code: int) -> "BoundaryCondition":
        if code not in (0, 1):
            raise ValueError(f"Unknown boundary code {code}")
        return cls.NOFLUX if code == 0 else cls.PERIODIC


def shift_coords(
    xs: np.ndarray,
    ys: np.ndarray,
    direction: Direction,
    boundary: BoundaryCondition,
    width: int,
    height: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Neighbour coordinates one jump away in ``direction``.

    Returns:
        (nx, ny, valid); under NoFlux ``valid`` is False where the jump would
        leave the domain and the coordinates there are clipped in range.
    """
    nx = np.asarray(xs) + direction.dx
    ny = np.asarray(ys) + direction.dy
    if boundary is BoundaryCondition.PERIODIC:
        return nx % width, ny % height, np.ones(nx.shape, dtype=bool)
    valid = (nx >= 0) & (nx < width) & (ny >= 0) & (ny < height)
    return np.clip(nx, 0, width - 1), np.clip(ny, 0, height - 1), valid


def neighbor(
    pixel: Tuple[int, int],
    direction: Direction,
    boundary: BoundaryCondition,
    width: int,
    height: int,
) -> Optional[Tuple[int, int]]:
    """Single-pixel version of :func:`shift_coords`; ``None`` outside a NoFlux domain."""
    nx, ny, valid = shift_coords(
        np.array(pixel[0]), np.array(pixel[1]), direction, boundary, width, height
    )
    if not bool(valid):
        return None
    return int(nx), int(ny)


class IntensityGrid(BaseModel):
    """W x H x C field of non-negative integer intensities, indexed [x, y, c]."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(..., description="int64 array of shape (W, H, C)")

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v) -> np.ndarray:
        """Coerce to a read-only int64 (W, H, C) array of non-negative integers."""
        array = np.asarray(v)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3 or min(array.shape) < 1:
            raise ValueError(f"Grid must be (W, H, C) with positive sizes, got {array.shape}")
        if array.dtype.kind == "f":
            if not np.all(np.isfinite(array)) or not np.all(array == np.round(array)):
                raise ValueError("Grid values must be integers")
        elif array.dtype.kind not in "iub":
            raise ValueError(f"Unsupported grid dtype {array.dtype}")
        if np.any(array < 0):
            raise ValueError("Grid values must be non-negative")
        if array.dtype.kind == "u" and array.size and array.max() > INT64_MAX:
            raise ValueError("Grid value exceeds int64 range")
        return _frozen(array.astype(np.int64))

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "IntensityGrid":
        return cls(values=np.zeros((width, height, channels), dtype=np.int64))

    @classmethod
    def from_array(cls, array) -> "IntensityGrid":
        """Validated grid from any (W, H) or (W, H, C) integer-valued array."""
        return cls(values=array)

    @property
    def width(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    def total_intensity(self, channel: int) -> int:
        """Exact integer sum over all pixels of one channel."""
        if not 0 <= channel < self.channels:
            raise IndexError(f"Channel {channel} out of range for {self.channels} channels")
        total = int(self.values[:, :, channel].sum(dtype=np.uint64))
        assert total <= INT64_MAX, "channel total overflows int64"
        return total

    def totals(self) -> Tuple[int, ...]:
        return tuple(self.total_intensity(c) for c in range(self.channels))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IntensityGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]


def total_intensity(grid: IntensityGrid, channel: int) -> int:
    """Exact integer sum of ``grid`` over all pixels of ``channel``."""
    return grid.total_intensity(channel)


def check_same_shape(a: IntensityGrid, b: IntensityGrid) -> None:
    """Require two grids of identical (W, H, C).

    Raises:
        ShapeMismatchError: If the shapes differ
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Grid shapes differ: {a.shape} vs {b.shape}")


class ParticleLedger(BaseModel):
    """Per-channel (origin, current) pixel pairs, one row per particle."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    origins: Tuple[np.ndarray, ...] = Field(..., description="per channel (N_c, 2) int64")
    currents: Tuple[np.ndarray, ...] = Field(..., description="per channel (N_c, 2) int64")

    @field_validator("origins", "currents", mode="before")
    @classmethod
    def validate_pairs(cls, v) -> Tuple[np.ndarray, ...]:
        arrays = []
        for item in v:
            array = np.asarray(item, dtype=np.int64).reshape(-1, 2)
            arrays.append(_frozen(array))
        return tuple(arrays)

    @model_validator(mode="after")
    def validate_consistency(self) -> "ParticleLedger":
        if len(self.origins) != len(self.currents):
            raise ValueError("Ledger origin and current channel counts differ")
        for c, (o, x) in enumerate(zip(self.origins, self.currents)):
            if o.shape != x.shape:
                raise ValueError(f"Channel {c}: {len(o)} origins but {len(x)} currents")
            for name, arr in (("origin", o), ("current", x)):
                if len(arr) and (
                    arr[:, 0].min() < 0
                    or arr[:, 0].max() >= self.width
                    or arr[:, 1].min() < 0
                    or arr[:, 1].max() >= self.height
                ):
                    raise ValueError(f"Channel {c}: {name} position outside the lattice")
        return self

    @classmethod
    def from_grid(cls, grid: IntensityGrid) -> "ParticleLedger":
        """Ledger with every particle still at its origin, in pixel-index order."""
        origins = []
        for c in range(grid.channels):
            counts = grid.values[:, :, c].ravel()
            flat = np.repeat(np.arange(counts.size), counts)
            xs, ys = np.unravel_index(flat, (grid.width, grid.height))
            origins.append(np.stack([xs, ys], axis=1))
        return cls(width=grid.width, height=grid.height, origins=origins, currents=origins)

    @property
    def channels(self) -> int:
        return len(self.origins)

    def count(self, channel: int) -> int:
        return len(self.origins[channel])

    def histogram(self, which: Literal["origin", "current"] = "current") -> IntensityGrid:
        """Occupancy grid of origin or current positions."""
        pairs = self.origins if which == "origin" else self.currents
        values = np.zeros((self.width, self.height, self.channels), dtype=np.int64)
        for c, arr in enumerate(pairs):
            np.add.at(values[:, :, c], (arr[:, 0], arr[:, 1]), 1)
        return IntensityGrid(values=values)

    def with_currents(self, currents) -> "ParticleLedger":
        return ParticleLedger(
            width=self.width, height=self.height, origins=self.origins, currents=currents
        )

    def check_against(self, grid: IntensityGrid, which: Literal["origin", "current"] = "current") -> None:
        """Raise unless the ledger histogram equals ``grid`` exactly."""
        if (grid.width, grid.height, grid.channels) != (self.width, self.height, self.channels):
            raise LedgerMismatchError(
                f"Ledger is {self.width}x{self.height}x{self.channels}, grid is {grid.shape}"
            )
        hist = self.histogram(which)
        if not np.array_equal(hist.values, grid.values):
            bad = int(np.count_nonzero(hist.values != grid.values))
            raise LedgerMismatchError(f"Ledger {which} histogram differs from grid at {bad} sites")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParticleLedger):
            return NotImplemented
        return (
            (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
            and all(np.array_equal(a, b) for a, b in zip(self.origins, other.origins))
            and all(np.array_equal(a, b) for a, b in zip(self.currents, other.currents))
        )

    __hash__ = None  # type: ignore[assignment]


class RateField(BaseModel):
    """Non-negative reverse-jump rates indexed (direction, x, y, c)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(..., description="float64 array of shape (4, W, H, C)")

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v) -> np.ndarray:
        array = np.asarray(v, dtype=np.float64)
        if array.ndim != 4 or array.shape[0] != len(DIRECTIONS):
            raise ValueError(f"Rate field must be (4, W, H, C), got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteRateError("Rate field contains non-finite entries")
        if np.any(array < 0):
            raise NonFiniteRateError("Rate field contains negative entries")
        return _frozen(array)

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "RateField":
        return cls(values=np.zeros((len(DIRECTIONS), width, height, channels)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.values.shape

    def max_rate(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RateField):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]
