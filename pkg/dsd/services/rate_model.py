"""Rate predictors: the protocol, the ledger oracle and a toy convolutional model."""

from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core.codec import pack_container, unpack_container
from ..core.errors import (
    InfiniteLossError,
    KernelFormatError,
    LedgerMismatchError,
    ShapeMismatchError,
)
from ..core.logging import get_logger
from ..models.configs import LossKind
from ..models.lattice import (
    DIRECTIONS,
    BoundaryCondition,
    IntensityGrid,
    ParticleLedger,
    RateField,
    shift_coords,
)
from .forward import corrupt
from .kernel import TransitionKernel, kernel_for
from .reverse import oracle_rates, particle_rates

logger = get_logger(__name__)

PathLike = Union[str, Path]

MODEL_MAGIC = b"DSDM"
_HEADER_FMT = "IIIIBd"
_SCALE_QUANTILE = 99.0


@runtime_checkable
class RatePredictor(Protocol):
    """Maps a corrupted grid and a time in (0, 1] to a (4, W, H, C) rate field."""

    def __call__(self, grid: IntensityGrid, t: float) -> RateField: ...


@runtime_checkable
class LedgerAwarePredictor(Protocol):
    """Predictor that tracks particle identities through a reverse run."""

    def __call__(self, grid: IntensityGrid, t: float) -> RateField: ...

    def prime(self, kernel_1: TransitionKernel, rng: np.random.Generator) -> IntensityGrid: ...

    def observe(self, moves: np.ndarray, rng: np.random.Generator) -> None: ...


def _pick_movers(
    pool: np.ndarray, weights: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    positive = weights > 0
    if int(positive.sum()) >= count:
        return rng.choice(pool, size=count, replace=False, p=weights / weights.sum())
    rest = rng.choice(pool[~positive], size=count - int(positive.sum()), replace=False)
    return np.concatenate([pool[positive], rest])


class OraclePredictor:
    """
    Exact reverse rates from a particle ledger.

    ``prime`` corrupts the clean grid to t=1 (or reuses a given ledger) and
    ``observe`` assigns each leap's mover counts to individual particles,
    weighted by their own rates, so the ledger follows the sampled grid.
    """

    def __init__(
        self,
        rate: float,
        boundary: BoundaryCondition,
        clean: Optional[IntensityGrid] = None,
        ledger: Optional[ParticleLedger] = None,
    ):
        if clean is None and ledger is None:
            raise LedgerMismatchError("Oracle needs a clean grid or a ledger")
        self.rate = float(rate)
        self.boundary = BoundaryCondition(boundary)
        self.clean = clean if clean is not None else ledger.histogram("origin")
        self.ledger = ledger
        self._kernel: Optional[TransitionKernel] = None

    @classmethod
    def from_clean(cls, grid: IntensityGrid, rate: float, boundary: BoundaryCondition) -> "OraclePredictor":
        return cls(rate, boundary, clean=grid)

    @classmethod
    def from_ledger(
        cls, ledger: ParticleLedger, rate: float, boundary: BoundaryCondition
    ) -> "OraclePredictor":
        return cls(rate, boundary, ledger=ledger)

    def prime(self, kernel_1: TransitionKernel, rng: np.random.Generator) -> IntensityGrid:
        if self.ledger is None:
            corrupted, self.ledger = corrupt(self.clean, kernel_1, rng)
            return corrupted
        return self.ledger.histogram("current")

    def __call__(self, grid: IntensityGrid, t: float) -> RateField:
        if self.ledger is None:
            raise LedgerMismatchError("Oracle has no ledger; call prime() first")
        self._kernel = kernel_for(self.boundary, grid.width, grid.height, self.rate, t)
        return oracle_rates(self.ledger, grid, self._kernel, self.rate)

    def observe(self, moves: np.ndarray, rng: np.random.Generator) -> None:
        """Move ledger particles to match ``moves`` (direction, x, y, c) counts."""
        if self.ledger is None or self._kernel is None:
            raise LedgerMismatchError("observe() called before the oracle was evaluated")
        width, height = self.ledger.width, self.ledger.height
        updated: List[np.ndarray] = []
        for c in range(self.ledger.channels):
            origins, currents = self.ledger.origins[c], self.ledger.currents[c]
            new = currents.copy()
            if len(origins):
                rates = particle_rates(self._kernel, origins, currents, self.rate)
                site = currents[:, 0] * height + currents[:, 1]
                taken = np.zeros(len(origins), dtype=bool)
                for d in DIRECTIONS:
                    counts = moves[d.index, :, :, c]
                    for x, y in zip(*np.nonzero(counts)):
                        pool = np.flatnonzero((site == x * height + y) & ~taken)
                        chosen = _pick_movers(pool, rates[d.index, pool], int(counts[x, y]), rng)
                        taken[chosen] = True
                        nx, ny, _ = shift_coords(
                            currents[chosen, 0], currents[chosen, 1], d, self.boundary, width, height
                        )
                        new[chosen, 0], new[chosen, 1] = nx, ny
            updated.append(new)
        self.ledger = self.ledger.with_currents(updated)


def oracle_predictor(
    rate: float,
    boundary: BoundaryCondition,
    clean: Optional[IntensityGrid] = None,
    ledger: Optional[ParticleLedger] = None,
) -> OraclePredictor:
    """Ground-truth predictor for verification runs."""
    return OraclePredictor(rate, boundary, clean=clean, ledger=ledger)


class ToyConvModel(nn.Module):
    """
    Two 3x3 hidden conv layers and a softplus output with 4C maps.

    Input is the C intensity channels divided by ``scale`` plus one constant
    channel holding t. Padding is circular for periodic lattices and zero
    for no-flux ones.
    """

    def __init__(
        self,
        channels: int,
        hidden: int = 32,
        boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
        scale: float = 1.0,
        width: int = 0,
        height: int = 0,
    ):
        super().__init__()
        if channels < 1 or hidden < 1:
            raise ValueError(f"channels and hidden must be positive, got {channels}, {hidden}")
        if not scale > 0:
            raise ValueError(f"Normalisation scale must be positive, got {scale}")
        self.channels = channels
        self.hidden = hidden
        self.boundary = BoundaryCondition(boundary)
        self.width = width
        self.height = height
        padding_mode = "circular" if self.boundary is BoundaryCondition.PERIODIC else "zeros"

        def conv(n_in: int, n_out: int) -> nn.Conv2d:
            return nn.Conv2d(n_in, n_out, 3, padding=1, padding_mode=padding_mode, dtype=torch.float64)

        self.conv_in = conv(channels + 1, hidden)
        self.conv_hidden = conv(hidden, hidden)
        self.conv_out = conv(hidden, len(DIRECTIONS) * channels)
        self.register_buffer("scale", torch.tensor(float(scale), dtype=torch.float64))

    def zero_output(self) -> None:
        """Zero the output layer so every prediction is softplus(0) = ln 2."""
        with torch.no_grad():
            self.conv_out.weight.zero_()
            self.conv_out.bias.zero_()

    def forward(self, counts: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """(B, C, W, H) counts and (B,) times -> (B, 4, C, W, H) rates."""
        batch, _, width, height = counts.shape
        time_channel = t.to(torch.float64).view(batch, 1, 1, 1).expand(batch, 1, width, height)
        h = torch.cat([counts / self.scale, time_channel], dim=1)
        h = F.silu(self.conv_in(h))
        h = F.silu(self.conv_hidden(h))
        out = F.softplus(self.conv_out(h))
        return out.view(batch, len(DIRECTIONS), self.channels, width, height)


def grids_to_tensor(grids: Sequence[IntensityGrid]) -> torch.Tensor:
    """Stack grids as (B, C, W, H) float64."""
    stacked = np.stack([g.values for g in grids]).astype(np.float64)
    return torch.from_numpy(np.ascontiguousarray(stacked.transpose(0, 3, 1, 2)))


def rates_to_tensor(fields: Sequence[RateField]) -> torch.Tensor:
    """Stack rate fields as (B, 4, C, W, H) float64."""
    stacked = np.stack([f.values for f in fields])
    return torch.from_numpy(np.ascontiguousarray(stacked.transpose(0, 1, 4, 2, 3)))


def _check_compatible(model: ToyConvModel, grid: IntensityGrid, t: float) -> None:
    if grid.channels != model.channels:
        raise ShapeMismatchError(f"Model expects {model.channels} channels, grid has {grid.channels}")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"Time must lie in (0, 1], got {t}")


def forward_pass(model: ToyConvModel, grid: IntensityGrid, t: float) -> RateField:
    """
    Predict reverse rates for one grid at time ``t`` without tracking gradients.

    Args:
        model: Trained or freshly built toy model
        grid: Corrupted grid with the model's channel count
        t: Observation time in (0, 1]

    Returns:
        Non-negative rate field of shape (4, W, H, C)
    """
    _check_compatible(model, grid, t)
    with torch.no_grad():
        out = model(grids_to_tensor([grid]), torch.tensor([t], dtype=torch.float64))
    return RateField(values=out[0].numpy().transpose(0, 2, 3, 1))


def loss_tensor(pred: torch.Tensor, truth: torch.Tensor, kind: LossKind, dt: torch.Tensor) -> torch.Tensor:
    """Batch-mean loss for (B, 4, C, W, H) predictions; ``dt`` is (B,)."""
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"Prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if kind == "l1":
        return (pred - truth).abs().flatten(1).mean(dim=1).mean()
    per_example = (pred - torch.xlogy(truth, pred)).flatten(1).sum(dim=1)
    return (dt.to(torch.float64) * per_example).mean()


def backward_pass(
    model: ToyConvModel,
    grid: IntensityGrid,
    t: float,
    kind: LossKind,
    truth: RateField,
    dt: float,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss value and its gradient for every named parameter."""
    _check_compatible(model, grid, t)
    if truth.shape != (len(DIRECTIONS),) + grid.shape:
        raise ShapeMismatchError(f"Truth {truth.shape} does not fit grid {grid.shape}")
    if kind == "likelihood" and not dt > 0:
        raise ValueError(f"Δt must be positive, got {dt}")

    model.zero_grad()
    pred = model(grids_to_tensor([grid]), torch.tensor([t], dtype=torch.float64))
    loss = loss_tensor(pred, rates_to_tensor([truth]), kind, torch.tensor([dt], dtype=torch.float64))
    if not torch.isfinite(loss):
        raise InfiniteLossError(f"{kind} loss is {loss.item()}")
    loss.backward()
    grads = {name: p.grad.detach().numpy().copy() for name, p in model.named_parameters()}
    return float(loss.item()), grads


class ToyPredictor:
    """RatePredictor backed by a ToyConvModel."""

    def __init__(self, model: ToyConvModel):
        self.model = model.eval()

    def __call__(self, grid: IntensityGrid, t: float) -> RateField:
        return forward_pass(self.model, grid, t)


def normalization_scale(dataset: Sequence[IntensityGrid]) -> float:
    """99th-percentile pixel value over the dataset (1 if that is 0)."""
    if not dataset:
        raise ValueError("Cannot derive a normalisation scale from an empty dataset")
    pooled = np.concatenate([g.values.ravel() for g in dataset])
    scale = float(np.percentile(pooled, _SCALE_QUANTILE))
    return scale if scale > 0 else 1.0


def encode_checkpoint(model: ToyConvModel) -> bytes:
    """Serialize architecture dims, normalization scale and float64 weights as a ``DSDM`` container."""
    header = (
        model.width,
        model.height,
        model.channels,
        model.hidden,
        model.boundary.code,
        float(model.scale.item()),
    )
    params = [p.detach().numpy().astype("<f8").ravel() for p in model.parameters()]
    payload = np.concatenate(params).tobytes() if params else b""
    return pack_container(MODEL_MAGIC, _HEADER_FMT, header, payload)


def decode_checkpoint(data: bytes) -> ToyConvModel:
    """Rebuild a model from :func:`encode_checkpoint` output; CRC32 is verified first."""
    (width, height, channels, hidden, code, scale), payload = unpack_container(
        data, MODEL_MAGIC, _HEADER_FMT
    )
    try:
        boundary = BoundaryCondition.from_code(code)
        model = ToyConvModel(channels, hidden, boundary, scale, width, height)
    except ValueError as e:
        raise KernelFormatError(f"Bad model header: {e}") from e

    flat = np.frombuffer(payload, dtype="<f8")
    expected = sum(p.numel() for p in model.parameters())
    if flat.size != expected:
        raise KernelFormatError(f"Model payload holds {flat.size} values, expected {expected}")
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset : offset + n].astype(np.float64)).view_as(p))
            offset += n
    return model


def save_checkpoint(model: ToyConvModel, path: PathLike) -> None:
    """Write a ``DSDM`` container: dims, boundary, scale, then f64 parameters."""
    Path(path).write_bytes(encode_checkpoint(model))
    logger.info("Checkpoint saved", path=str(path), parameters=sum(p.numel() for p in model.parameters()))


def load_checkpoint(path: PathLike) -> ToyConvModel:
    """Read a ``DSDM`` checkpoint file."""
    return decode_checkpoint(Path(path).read_bytes())
