"""Exception hierarchy.

Every engine error carries the process exit code the CLI reports for it:
2 for usage errors, 3 for bad input data, 4 for numerical failures.
"""

from typing import Optional


class DSDError(Exception):
    """Base exception for engine errors."""

    exit_code = 1


class UsageError(DSDError):
    """Raised for invalid command-line usage."""

    exit_code = 2


class DataError(DSDError):
    """Raised when input data is malformed or inconsistent."""

    exit_code = 3


class ImageFormatError(DataError):
    """Raised when a PGM/PPM file cannot be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class KernelFormatError(DataError):
    """Raised when a binary container has a bad header."""
    pass


class ChecksumMismatchError(KernelFormatError):
    """Raised when a container payload fails its CRC32 check."""
    pass


class ShapeMismatchError(DataError):
    """Raised when arrays that must agree in shape do not."""
    pass


class LedgerMismatchError(DataError):
    """Raised when a particle ledger disagrees with a grid."""
    pass


class DatasetError(DataError):
    """Raised for unusable dataset directories or generation parameters."""
    pass


class NumericalError(DSDError):
    """Raised when a computation produces non-finite or impossible values."""

    exit_code = 4


class NonFiniteRateError(NumericalError):
    """Raised when a rate field holds NaN, infinite or negative entries."""
    pass


class ZeroProbabilityError(NumericalError):
    """Raised when a realised particle position has zero kernel probability."""
    pass


class InfiniteLossError(NumericalError):
    """Raised when the likelihood loss diverges (zero prediction, positive truth)."""
    pass


class TrainingDivergedError(NumericalError):
    """Raised when a training iteration produces a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"Non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class MaxStepsExceededError(NumericalError):
    """Raised when the sampler hits its step bound before reaching t = 0."""

    def __init__(self, max_steps: int, t: float, message: Optional[str] = None):
        super().__init__(message or f"Sampler exceeded {max_steps} steps with t = {t:.6g} remaining")
        self.max_steps = max_steps
        self.t = t
