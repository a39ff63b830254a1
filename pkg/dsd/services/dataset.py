"""Toy datasets: synthetic binary blobs and PGM/PPM directories."""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from ..core.config import get_settings
from ..core.errors import DataError, DatasetError
from ..core.logging import get_logger
from ..core.rng import derive_rng
from ..models.lattice import IntensityGrid
from .lattice_io import read_image, save_image

logger = get_logger(__name__)

PathLike = Union[str, Path]


def synth_blobs(
    width: int,
    height: int,
    count: int,
    target_porosity: float,
    correlation_length: float,
    seed: int,
) -> List[IntensityGrid]:
    """
    Binary two-phase microstructures with exact porosity.

    Each sample smooths white noise with a periodic Gaussian filter of width
    ``correlation_length`` and sets the round(target W H) largest values to 1,
    ties broken by lower pixel index.
    """
    if not 0.0 < target_porosity < 1.0:
        raise DatasetError(f"Target porosity must lie in (0, 1), got {target_porosity}")
    if correlation_length < 0:
        raise DatasetError(f"Correlation length must be non-negative, got {correlation_length}")
    n_pixels = width * height
    ones = int(round(target_porosity * n_pixels))
    if not 0 < ones < n_pixels:
        raise DatasetError(
            f"Porosity {target_porosity} on {width}x{height} gives {ones} of {n_pixels} pixels"
        )

    grids = []
    index = np.arange(n_pixels)
    for i in range(count):
        rng = derive_rng(seed, "blobs", i)
        field = rng.standard_normal((width, height))
        if correlation_length > 0:
            field = gaussian_filter(field, sigma=correlation_length, mode="wrap")
        order = np.lexsort((index, -field.ravel()))
        values = np.zeros(n_pixels, dtype=np.int64)
        values[order[:ones]] = 1
        grids.append(IntensityGrid(values=values.reshape(width, height, 1)))

    logger.info(
        "Synthesised blobs",
        count=count,
        width=width,
        height=height,
        porosity=ones / n_pixels,
        correlation_length=correlation_length,
    )
    return grids


def _load_one(path: Path) -> Tuple[IntensityGrid, int]:
    try:
        return read_image(path)
    except DataError as e:
        raise DatasetError(f"{path.name}: {e}") from e
    except OSError as e:
        raise DatasetError(f"{path.name}: unreadable ({e.strerror or e})") from e


def load_dir_with_maxval(
    path: PathLike, glob: str = "*.p[gp]m", threads: Optional[int] = None
) -> Tuple[List[IntensityGrid], int]:
    """
    Like :func:`load_dir`, also returning the largest header maxval of the files.

    Returns:
        (grids, maxval); maxval is 0 for an empty directory.

    Raises:
        DatasetError: If the directory is missing, a file is unreadable or
            dimensions disagree
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")
    files = sorted(p for p in root.glob(glob) if p.is_file())
    if not files:
        logger.warning("Dataset directory is empty", path=str(root), glob=glob)
        return [], 0

    with ThreadPoolExecutor(max_workers=threads or get_settings().threads) as pool:
        loaded = list(pool.map(_load_one, files))
    grids = [grid for grid, _ in loaded]
    maxval = max(m for _, m in loaded)

    shape = grids[0].shape
    for file, grid in zip(files, grids):
        if grid.shape != shape:
            raise DatasetError(f"{file.name} is {grid.shape}, expected {shape} like {files[0].name}")
    logger.info("Loaded dataset", path=str(root), count=len(grids), shape=shape, maxval=maxval)
    return grids, maxval


def load_dir(path: PathLike, glob: str = "*.p[gp]m", threads: Optional[int] = None) -> List[IntensityGrid]:
    """All images matching ``glob`` in lexicographic filename order; dimensions must agree."""
    return load_dir_with_maxval(path, glob, threads)[0]


def save_dir(
    grids: Sequence[IntensityGrid], path: PathLike, prefix: str = "sample", maxval: Optional[int] = None
) -> List[Path]:
    """Write numbered PGM (one channel) or PPM (three channels) files.

    ``maxval`` goes into every header; binary datasets are written with 1.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for i, grid in enumerate(grids):
        suffix = ".pgm" if grid.channels == 1 else ".ppm"
        target = root / f"{prefix}_{i:05d}{suffix}"
        save_image(grid, target, maxval)
        written.append(target)
    return written


def totals_at_quantiles(
    dataset: Sequence[IntensityGrid], quantiles: Sequence[float], channel: int = 0
) -> List[int]:
    """Total intensities taken from the dataset's own totals at each quantile."""
    if not dataset:
        raise DatasetError("Dataset is empty")
    if any(not 0.0 <= q <= 1.0 for q in quantiles):
        raise ValueError(f"Quantiles must lie in [0, 1], got {list(quantiles)}")
    totals = np.array([g.total_intensity(channel) for g in dataset], dtype=np.int64)
    picked = np.quantile(totals, np.asarray(quantiles, dtype=np.float64), method="inverted_cdf")
    return [int(v) for v in np.atleast_1d(picked)]
