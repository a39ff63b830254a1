"""Training loop for the toy rate model.

Each iteration draws a batch of (image, k) pairs, corrupts the images to
t_k, computes exact reverse rates from the particle ledgers and takes one
plain SGD step on the configured loss.
"""

import csv
import math
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path
from typing import Deque, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import torch

from ..core.config import get_settings
from ..core.errors import DatasetError, ShapeMismatchError, TrainingDivergedError
from ..core.logging import get_logger
from ..core.rng import child_seed, derive_rng
from ..models.configs import TrainConfig
from ..models.lattice import IntensityGrid, RateField
from .forward import corrupt_at_step
from .kernel import KernelBank
from .rate_model import ToyConvModel, grids_to_tensor, loss_tensor, normalization_scale, rates_to_tensor
from .reverse import oracle_rates

logger = get_logger(__name__)

PathLike = Union[str, Path]


class Example(NamedTuple):
    corrupted: IntensityGrid
    truth: RateField
    t: float
    dt: float


class HistoryRow(NamedTuple):
    iteration: int
    loss: float


def build_model(dataset: Sequence[IntensityGrid], cfg: TrainConfig) -> ToyConvModel:
    """Fresh model sized for ``dataset`` with its normalisation scale; init is seeded by ``cfg.seed``."""
    if not dataset:
        raise DatasetError("Training dataset is empty")
    first = dataset[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return ToyConvModel(
            channels=first.channels,
            hidden=cfg.hidden,
            boundary=cfg.boundary,
            scale=normalization_scale(dataset),
            width=first.width,
            height=first.height,
        )


def _check_dataset(dataset: Sequence[IntensityGrid], model: ToyConvModel) -> Tuple[int, int]:
    if not dataset:
        raise DatasetError("Training dataset is empty")
    shape = dataset[0].shape
    for i, grid in enumerate(dataset):
        if grid.shape != shape:
            raise ShapeMismatchError(f"Dataset item {i} has shape {grid.shape}, expected {shape}")
    if shape[2] != model.channels:
        raise ShapeMismatchError(f"Model expects {model.channels} channels, dataset has {shape[2]}")
    return shape[0], shape[1]


def train(
    model: ToyConvModel,
    dataset: Sequence[IntensityGrid],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[ToyConvModel, List[HistoryRow]]:
    """
    Fit ``model`` in place and return it with the per-iteration loss history.

    Raises:
        TrainingDivergedError: If an iteration produces a non-finite loss
    """
    width, height = _check_dataset(dataset, model)
    schedule = cfg.schedule
    bank = KernelBank(width, height, cfg.rate, cfg.boundary, get_settings().kernel_cache_dir)
    bank.precompute(schedule.times)
    seed = child_seed(rng)

    def prepare(iteration: int) -> List[Example]:
        stream = derive_rng(seed, "train", iteration)
        batch = []
        for _ in range(cfg.batch_size):
            grid = dataset[int(stream.integers(len(dataset)))]
            k = int(stream.integers(1, schedule.T + 1))
            corrupted, ledger, dt = corrupt_at_step(
                grid, schedule, k, cfg.rate, cfg.boundary, stream, bank
            )
            t = schedule.time(k)
            truth = oracle_rates(ledger, corrupted, bank.get(t), cfg.rate)
            batch.append(Example(corrupted, truth, t, dt))
        return batch

    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    model.train()
    history: List[HistoryRow] = []
    window = 2 * cfg.workers

    logger.info(
        "Training started",
        loss=cfg.loss,
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        schedule=schedule.kind,
        T=schedule.T,
        dataset=len(dataset),
    )
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        pending: Deque[Future] = deque()
        submitted = 0
        for iteration in range(cfg.iterations):
            while submitted < cfg.iterations and len(pending) < window:
                pending.append(pool.submit(prepare, submitted))
                submitted += 1
            batch = pending.popleft().result()

            counts = grids_to_tensor([ex.corrupted for ex in batch])
            truth = rates_to_tensor([ex.truth for ex in batch])
            times = torch.tensor([ex.t for ex in batch], dtype=torch.float64)
            dts = torch.tensor([ex.dt for ex in batch], dtype=torch.float64)

            loss = loss_tensor(model(counts, times), truth, cfg.loss, dts)
            value = float(loss.item())
            if not math.isfinite(value):
                logger.error("Training diverged", iteration=iteration, loss=value)
                raise TrainingDivergedError(iteration, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            history.append(HistoryRow(iteration, value))
            if iteration % cfg.log_every == 0 or iteration == cfg.iterations - 1:
                logger.info("Training progress", iteration=iteration, loss=value)

    model.width, model.height = width, height
    model.eval()
    return model, history


def write_history(history: Sequence[HistoryRow], path: PathLike) -> None:
    """Write ``iter,loss`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss"])
        for row in history:
            writer.writerow([row.iteration, repr(row.loss)])
