"""Bit-exact grid and ledger I/O.

Images use binary PGM (P5, one channel) and PPM (P6, three channels).
Samples are stored as read: no rescaling, 16-bit samples big-endian.
"""

from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from ..core.errors import DataError, ImageFormatError
from ..core.logging import get_logger
from ..models.lattice import IntensityGrid, ParticleLedger

logger = get_logger(__name__)

PathLike = Union[str, Path]

_CHANNELS = {b"P5": 1, b"P6": 3}
_MAGIC = {1: b"P5", 3: b"P6"}
_WHITESPACE = b" \t\n\r\x0b\x0c"


def _skip_separators(data: bytes, pos: int) -> int:
    """Skip whitespace and '#' comments; at least one separator is required."""
    start = pos
    while pos < len(data):
        if data[pos] in _WHITESPACE:
            pos += 1
        elif data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            break
    if pos == start:
        raise ImageFormatError("Missing whitespace in header", pos)
    return pos


def _read_int(data: bytes, pos: int, name: str) -> Tuple[int, int]:
    end = pos
    while end < len(data) and data[end : end + 1].isdigit():
        end += 1
    if end == pos:
        if pos >= len(data):
            raise ImageFormatError(f"Header ends before {name}", pos)
        raise ImageFormatError(f"Malformed header: expected {name}", pos)
    return int(data[pos:end]), end


def decode_netpbm(data: bytes) -> Tuple[IntensityGrid, int]:
    """Decode PGM/PPM bytes into a grid and the header maxval."""
    magic = data[:2]
    if magic not in _CHANNELS:
        raise ImageFormatError(f"Unsupported magic number {magic!r}", 0)
    channels = _CHANNELS[magic]

    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        pos = _skip_separators(data, pos)
        value, pos = _read_int(data, pos, name)
        fields.append(value)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError("Malformed header: zero dimension", pos)
    if not 1 <= maxval <= 65535:
        raise ImageFormatError(f"Malformed header: maxval {maxval} outside 1..65535", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ImageFormatError("Malformed header: expected whitespace after maxval", pos)
    pos += 1

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise ImageFormatError(
            f"Truncated payload: expected {expected} bytes, found {len(payload)}", len(data)
        )
    if len(data) > pos + expected:
        logger.warning("Ignoring trailing bytes after image payload", extra_bytes=len(data) - pos - expected)

    samples = np.frombuffer(payload, dtype=dtype).astype(np.int64)
    if samples.size and samples.max() > maxval:
        offset = pos + int(np.argmax(samples > maxval)) * dtype.itemsize
        raise ImageFormatError(f"Sample exceeds maxval {maxval}", offset)
    rows = samples.reshape(height, width, channels)
    return IntensityGrid.from_array(rows.transpose(1, 0, 2)), maxval


def parse_netpbm(data: bytes) -> IntensityGrid:
    """Decode PGM/PPM bytes into a grid."""
    return decode_netpbm(data)[0]


def encode_netpbm(grid: IntensityGrid, maxval: Optional[int] = None) -> bytes:
    """Encode a one- or three-channel grid as PGM/PPM bytes."""
    if grid.channels not in _MAGIC:
        raise DataError(f"PGM/PPM hold 1 or 3 channels, grid has {grid.channels}")
    peak = int(grid.values.max())
    if maxval is None:
        maxval = 255 if peak <= 255 else 65535
    if not 1 <= maxval <= 65535:
        raise ValueError(f"maxval {maxval} outside 1..65535")
    if peak > maxval:
        raise DataError(f"Grid value {peak} exceeds maxval {maxval}")

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    rows = grid.values.transpose(1, 0, 2).astype(dtype)
    header = b"%s\n%d %d\n%d\n" % (_MAGIC[grid.channels], grid.width, grid.height, maxval)
    return header + rows.tobytes()


def read_image(path: PathLike) -> Tuple[IntensityGrid, int]:
    """Read a binary PGM (P5) or PPM (P6) file exactly, keeping its maxval.

    The maxval is the dynamic range SSIM is measured against.
    """
    path = Path(path)
    grid, maxval = decode_netpbm(path.read_bytes())
    logger.debug("Loaded image", path=str(path), shape=grid.shape, maxval=maxval)
    return grid, maxval


def load_image(path: PathLike) -> IntensityGrid:
    """Read a binary PGM (P5) or PPM (P6) file exactly."""
    return read_image(path)[0]


def save_image(grid: IntensityGrid, path: PathLike, maxval: Optional[int] = None) -> None:
    """Write ``grid`` so that ``load_image`` returns it bit-exactly."""
    path = Path(path)
    path.write_bytes(encode_netpbm(grid, maxval))
    logger.debug("Saved image", path=str(path), shape=grid.shape)


def save_ledger(ledger: ParticleLedger, path: PathLike) -> None:
    """Store a ledger as an ``.npz`` archive."""
    arrays = {
        "dims": np.array([ledger.width, ledger.height, ledger.channels], dtype=np.int64),
    }
    for c in range(ledger.channels):
        arrays[f"origins_{c}"] = ledger.origins[c]
        arrays[f"currents_{c}"] = ledger.currents[c]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_ledger(path: PathLike) -> ParticleLedger:
    """Read a ledger written by :func:`save_ledger`."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            width, height, channels = (int(v) for v in archive["dims"])
            origins: List[np.ndarray] = [archive[f"origins_{c}"] for c in range(channels)]
            currents: List[np.ndarray] = [archive[f"currents_{c}"] for c in range(channels)]
    except (KeyError, ValueError, OSError) as e:
        raise DataError(f"Unreadable ledger {path}: {e}") from e
    try:
        return ParticleLedger(width=width, height=height, origins=origins, currents=currents)
    except ValueError as e:
        raise DataError(f"Inconsistent ledger {path}: {e}") from e
