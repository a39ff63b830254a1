"""Forward transition kernels of the single-particle jump process.

A particle jumps to each of its four neighbours at rate ``r``. Its generator
is ``r (L_x ⊗ I + I ⊗ L_y)`` with 1D lattice Laplacians ``L``, so the kernel
``exp(t Q)`` factorises into 1D pieces:

* Periodic: ``L`` is circulant with eigenvalues ``-4 sin²(π m / N)``; the whole
  2D kernel is one inverse FFT of the decay factors.
* NoFlux: ``L`` is the reflecting-walk tridiagonal matrix; each 1D kernel comes
  from its symmetric eigendecomposition.
"""

import hashlib
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr
from scipy.linalg import eigh_tridiagonal

from ..core.codec import pack_container, unpack_container
from ..core.errors import KernelFormatError, ShapeMismatchError
from ..core.logging import get_logger
from ..models.lattice import BoundaryCondition, IntensityGrid

logger = get_logger(__name__)

PathLike = Union[str, Path]
Pixel = Tuple[int, int]

KERNEL_MAGIC = b"DSDK"
_HEADER_FMT = "BIIdd"
_SAMPLE_CHUNK = 1 << 16


class TransitionKernel(BaseModel):
    """p_t(x', y' | x0, y0) for one boundary condition, rate and time."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    boundary: BoundaryCondition
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    rate: float = Field(..., ge=0)
    time: float = Field(..., ge=0)
    table: Optional[np.ndarray] = Field(default=None, description="Periodic: (W, H) by displacement")
    kx: Optional[np.ndarray] = Field(default=None, description="NoFlux: (W, W), row = source x")
    ky: Optional[np.ndarray] = Field(default=None, description="NoFlux: (H, H), row = source y")

    _tables: dict = PrivateAttr(default_factory=dict)

    @property
    def is_periodic(self) -> bool:
        return self.boundary is BoundaryCondition.PERIODIC

    def matches(self, grid: IntensityGrid) -> bool:
        return (grid.width, grid.height) == (self.width, self.height)

    def prob_many(
        self, sx: np.ndarray, sy: np.ndarray, dx: np.ndarray, dy: np.ndarray
    ) -> np.ndarray:
        """Vectorised p_t((dx, dy) | (sx, sy))."""
        if self.is_periodic:
            return self.table[(dx - sx) % self.width, (dy - sy) % self.height]
        return self.kx[sx, dx] * self.ky[sy, dy]

    def row(self, source: Pixel) -> np.ndarray:
        """Destination distribution from ``source`` as a (W, H) array."""
        x0, y0 = _check_pixel(self, source)
        if self.is_periodic:
            return np.roll(self.table, shift=(x0, y0), axis=(0, 1))
        return np.outer(self.kx[x0], self.ky[y0])

    def _sampling_tables(self) -> Tuple:
        tables = self._tables.get("cdf")
        if tables is None:
            if self.is_periodic:
                tables = (_cdf_with_last(self.table.ravel()),)
            else:
                tables = (_cdf_rows(self.kx), _cdf_rows(self.ky))
            self._tables["cdf"] = tables
        return tables

    def sample_many(
        self, xs: np.ndarray, ys: np.ndarray, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Draw one destination per source pixel by inverse-CDF sampling."""
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        if xs.size == 0:
            return xs.copy(), ys.copy()
        if self.is_periodic:
            cum, last = self._sampling_tables()[0]
            u = rng.random(xs.size)
            flat = np.minimum(np.searchsorted(cum, u, side="right"), last)
            ox, oy = np.unravel_index(flat, (self.width, self.height))
            return (xs + ox) % self.width, (ys + oy) % self.height

        (cx, lastx), (cy, lasty) = self._sampling_tables()
        ux = rng.random(xs.size)
        uy = rng.random(ys.size)
        return _draw_rows(cx, lastx, xs, ux), _draw_rows(cy, lasty, ys, uy)


def _cdf_with_last(p: np.ndarray) -> Tuple[np.ndarray, int]:
    positive = np.flatnonzero(p > 0)
    return np.cumsum(p), int(positive[-1])


def _cdf_rows(k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    last = np.array([np.flatnonzero(row > 0)[-1] for row in k], dtype=np.int64)
    return np.cumsum(k, axis=1), last


def _draw_rows(cum: np.ndarray, last: np.ndarray, src: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.empty(src.size, dtype=np.int64)
    for start in range(0, src.size, _SAMPLE_CHUNK):
        sl = slice(start, start + _SAMPLE_CHUNK)
        idx = np.sum(cum[src[sl]] <= u[sl, None], axis=1)
        out[sl] = np.minimum(idx, last[src[sl]])
    return out


def _check_pixel(kernel: TransitionKernel, pixel: Pixel) -> Pixel:
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < kernel.width and 0 <= y < kernel.height):
        raise ValueError(f"Pixel {pixel} outside {kernel.width}x{kernel.height} lattice")
    return x, y


def _check_args(width: int, height: int, rate: float, time: float) -> None:
    if width < 1 or height < 1:
        raise ValueError(f"Lattice must be at least 1x1, got {width}x{height}")
    if not (np.isfinite(rate) and rate >= 0 and np.isfinite(time) and time >= 0):
        raise ValueError(f"Rate and time must be finite and non-negative, got r={rate}, t={time}")


def _normalize_rows(k: np.ndarray) -> np.ndarray:
    k = np.clip(k, 0.0, None)
    return k / k.sum(axis=-1, keepdims=True)


def periodic_kernel(width: int, height: int, rate: float, time: float) -> TransitionKernel:
    """Periodic-boundary kernel from one inverse 2D FFT of the spectral decay factors."""
    _check_args(width, height, rate, time)
    if rate * time == 0.0:
        table = np.zeros((width, height))
        table[0, 0] = 1.0
    else:
        sx = np.sin(np.pi * np.arange(width) / width) ** 2
        sy = np.sin(np.pi * np.arange(height) / height) ** 2
        decay = np.exp(-4.0 * rate * time * (sx[:, None] + sy[None, :]))
        table = np.fft.ifft2(decay).real
        # exact displacement-negation symmetry
        neg_x = (-np.arange(width)) % width
        neg_y = (-np.arange(height)) % height
        table = 0.5 * (table + table[np.ix_(neg_x, neg_y)])
        table = np.clip(table, 0.0, None)
        table /= table.sum()
    table.setflags(write=False)
    return TransitionKernel(
        boundary=BoundaryCondition.PERIODIC,
        width=width,
        height=height,
        rate=rate,
        time=time,
        table=table,
    )


def reflecting_generator_bands(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of the 1D reflecting-walk generator."""
    diag = np.full(n, -2.0)
    if n == 1:
        diag[0] = 0.0
    else:
        diag[0] = diag[-1] = -1.0
    return diag, np.ones(n - 1)


def _reflecting_kernel_1d(n: int, rt: float) -> np.ndarray:
    if n == 1 or rt == 0.0:
        return np.eye(n)
    diag, off = reflecting_generator_bands(n)
    eigvals, eigvecs = eigh_tridiagonal(diag, off)
    k = (eigvecs * np.exp(rt * eigvals)) @ eigvecs.T
    return _normalize_rows(0.5 * (k + k.T))


def noflux_kernel(width: int, height: int, rate: float, time: float) -> TransitionKernel:
    """No-flux kernel as the tensor product of two 1D reflecting-walk exponentials."""
    _check_args(width, height, rate, time)
    kx = _reflecting_kernel_1d(width, rate * time)
    ky = _reflecting_kernel_1d(height, rate * time)
    kx.setflags(write=False)
    ky.setflags(write=False)
    return TransitionKernel(
        boundary=BoundaryCondition.NOFLUX,
        width=width,
        height=height,
        rate=rate,
        time=time,
        kx=kx,
        ky=ky,
    )


def kernel_for(
    boundary: BoundaryCondition, width: int, height: int, rate: float, time: float
) -> TransitionKernel:
    """Build the kernel for ``boundary``."""
    if BoundaryCondition(boundary) is BoundaryCondition.PERIODIC:
        return periodic_kernel(width, height, rate, time)
    return noflux_kernel(width, height, rate, time)


def transition_prob(kernel: TransitionKernel, source: Pixel, target: Pixel) -> float:
    """p_t(target | source)."""
    sx, sy = _check_pixel(kernel, source)
    tx, ty = _check_pixel(kernel, target)
    return float(kernel.prob_many(np.array(sx), np.array(sy), np.array(tx), np.array(ty)))


def sample_destination(kernel: TransitionKernel, source: Pixel, rng: np.random.Generator) -> Pixel:
    """Draw one destination for a particle starting at ``source``."""
    x0, y0 = _check_pixel(kernel, source)
    xs, ys = kernel.sample_many(np.array([x0]), np.array([y0]), rng)
    return int(xs[0]), int(ys[0])


def dense_matrix(kernel: TransitionKernel) -> np.ndarray:
    """Full (WH x WH) transition matrix, source index ``x * H + y``."""
    w, h = kernel.width, kernel.height
    xs, ys = np.unravel_index(np.arange(w * h), (w, h))
    return kernel.prob_many(xs[:, None], ys[:, None], xs[None, :], ys[None, :])


def max_row_deviation(kernel: TransitionKernel) -> float:
    """Largest |row sum - 1| over all source pixels."""
    if kernel.is_periodic:
        return float(abs(kernel.table.sum() - 1.0))
    sums = np.outer(kernel.kx.sum(axis=1), kernel.ky.sum(axis=1))
    return float(np.abs(sums - 1.0).max())


def check_kernel_matches(kernel: TransitionKernel, grid: IntensityGrid) -> None:
    """Raise ShapeMismatchError unless the kernel was built for the grid's W x H."""
    if not kernel.matches(grid):
        raise ShapeMismatchError(
            f"Kernel is {kernel.width}x{kernel.height}, grid is {grid.width}x{grid.height}"
        )


def encode_kernel(kernel: TransitionKernel) -> bytes:
    """
    Serialize a kernel as a ``DSDK`` container.

    The header carries boundary code, W, H, r and t; the payload is the
    displacement table (periodic) or Kx followed by Ky (no-flux), as
    little-endian float64, with a trailing CRC32.
    """
    if kernel.is_periodic:
        payload = kernel.table.astype("<f8").tobytes()
    else:
        payload = kernel.kx.astype("<f8").tobytes() + kernel.ky.astype("<f8").tobytes()
    header = (kernel.boundary.code, kernel.width, kernel.height, kernel.rate, kernel.time)
    return pack_container(KERNEL_MAGIC, _HEADER_FMT, header, payload)


def decode_kernel(data: bytes) -> TransitionKernel:
    """Inverse of :func:`encode_kernel`; verifies magic, version and CRC32."""
    (code, width, height, rate, time), payload = unpack_container(data, KERNEL_MAGIC, _HEADER_FMT)
    try:
        boundary = BoundaryCondition.from_code(code)
    except ValueError as e:
        raise KernelFormatError(str(e)) from e

    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if boundary is BoundaryCondition.PERIODIC:
        if values.size != width * height:
            raise KernelFormatError(f"Payload holds {values.size} values, expected {width * height}")
        table = values.reshape(width, height)
        table.setflags(write=False)
        return TransitionKernel(
            boundary=boundary, width=width, height=height, rate=rate, time=time, table=table
        )
    if values.size != width * width + height * height:
        raise KernelFormatError(
            f"Payload holds {values.size} values, expected {width * width + height * height}"
        )
    kx = values[: width * width].reshape(width, width)
    ky = values[width * width :].reshape(height, height)
    kx.setflags(write=False)
    ky.setflags(write=False)
    return TransitionKernel(
        boundary=boundary, width=width, height=height, rate=rate, time=time, kx=kx, ky=ky
    )


def dump_kernel(kernel: TransitionKernel, path: PathLike) -> None:
    """Write a kernel dump (``DSDK`` container)."""
    Path(path).write_bytes(encode_kernel(kernel))


def load_kernel(path: PathLike) -> TransitionKernel:
    """Read a kernel dump written by :func:`dump_kernel`."""
    return decode_kernel(Path(path).read_bytes())


class KernelBank:
    """Memoised kernels for one (W, H, r, boundary), optionally cached on disk."""

    def __init__(
        self,
        width: int,
        height: int,
        rate: float,
        boundary: BoundaryCondition,
        cache_dir: Optional[PathLike] = None,
    ):
        self.width = width
        self.height = height
        self.rate = float(rate)
        self.boundary = BoundaryCondition(boundary)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._kernels: Dict[float, TransitionKernel] = {}
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_path(self, time: float) -> Path:
        key = struct.pack("<BIIdd", self.boundary.code, self.width, self.height, self.rate, time)
        digest = hashlib.sha256(key).hexdigest()[:16]
        return self.cache_dir / f"{self.boundary.value}-{self.width}x{self.height}-{digest}.dsdk"

    def get(self, time: float) -> TransitionKernel:
        time = float(time)
        kernel = self._kernels.get(time)
        if kernel is not None:
            return kernel

        path = self._cache_path(time) if self.cache_dir is not None else None
        if path is not None and path.exists():
            try:
                kernel = load_kernel(path)
                logger.debug("Kernel cache hit", path=str(path), time=time)
            except KernelFormatError as e:
                logger.warning("Discarding corrupt kernel cache entry", path=str(path), error=str(e))
                kernel = None
        if kernel is None:
            kernel = kernel_for(self.boundary, self.width, self.height, self.rate, time)
            if path is not None:
                dump_kernel(kernel, path)
        self._kernels[time] = kernel
        return kernel

    def precompute(self, times) -> None:
        """Build every kernel in ``times`` up front."""
        for t in times:
            self.get(float(t))
        logger.info(
            "Kernels ready",
            count=len(self._kernels),
            boundary=self.boundary.value,
            width=self.width,
            height=self.height,
            rate=self.rate,
        )
