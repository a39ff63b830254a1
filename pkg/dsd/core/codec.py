"""Binary container utilities including CRC32 payload validation.

Kernel dumps, rate fields and model checkpoints share one layout::

    magic (4 bytes) | version u32 | header fields | payload | CRC32(payload) u32

All integers and floats are little-endian.
"""

import struct
import zlib
from typing import Tuple

from .errors import ChecksumMismatchError, KernelFormatError
from .logging import get_logger

logger = get_logger(__name__)

FORMAT_VERSION = 1
_CRC = struct.Struct("<I")


def payload_checksum(payload: bytes) -> int:
    """CRC32 of a payload as an unsigned 32-bit integer."""
    return zlib.crc32(payload) & 0xFFFFFFFF


def verify_checksum(payload: bytes, expected: int) -> bool:
    """
    Verify the CRC32 trailer of a container payload.

    Args:
        payload: Raw payload bytes
        expected: Checksum read from the trailer

    Returns:
        True if the checksum matches

    Raises:
        ChecksumMismatchError: If the checksum does not match
    """
    actual = payload_checksum(payload)
    if actual != expected:
        logger.warning(
            "Container checksum mismatch",
            expected=f"{expected:08x}",
            actual=f"{actual:08x}",
            payload_size=len(payload),
        )
        raise ChecksumMismatchError(
            f"Payload checksum {actual:08x} does not match trailer {expected:08x}"
        )
    return True


def pack_container(magic: bytes, header_fmt: str, header: Tuple, payload: bytes) -> bytes:
    """Assemble a container from its header fields and payload."""
    if len(magic) != 4:
        raise ValueError("Container magic must be 4 bytes")
    head = magic + struct.pack("<I" + header_fmt, FORMAT_VERSION, *header)
    return head + payload + _CRC.pack(payload_checksum(payload))


def unpack_container(data: bytes, magic: bytes, header_fmt: str) -> Tuple[Tuple, bytes]:
    """
    Split a container into header fields and payload.

    Args:
        data: Whole file contents
        magic: Expected 4-byte magic
        header_fmt: struct format of the fields after the version

    Returns:
        (header fields, payload bytes)

    Raises:
        KernelFormatError: Bad magic, unsupported version or truncated data
        ChecksumMismatchError: If the payload is corrupt
    """
    head = struct.Struct("<I" + header_fmt)
    start = len(magic)
    if len(data) < start + head.size + _CRC.size:
        raise KernelFormatError(f"Container truncated: {len(data)} bytes")
    if data[:start] != magic:
        raise KernelFormatError(
            f"Bad magic {data[:start]!r}, expected {magic!r}"
        )
    version, *fields = head.unpack_from(data, start)
    if version != FORMAT_VERSION:
        raise KernelFormatError(f"Unsupported format version {version}")

    payload = data[start + head.size : len(data) - _CRC.size]
    (expected,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    verify_checksum(payload, expected)
    return tuple(fields), payload
