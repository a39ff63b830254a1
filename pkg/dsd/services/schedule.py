"""Observation-time schedules, SSIM and schedule calibration."""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_expit, logit

from ..core.config import get_settings
from ..core.errors import UsageError
from ..core.logging import get_logger
from ..core.rng import derive_rng
from ..models.lattice import BoundaryCondition, IntensityGrid, check_same_shape
from ..models.schedule import DegradationCurve, Schedule
from .kernel import KernelBank

logger = get_logger(__name__)

COSINE_OFFSET = 0.008


def logit_schedule(T: int, tau1: float = 7.5, tau2: float = 2.5) -> Schedule:
    """
    Logit-spaced observation times.

    t_k solves ``logit(exp(-tau2 t_k)) = [(k-1) logit(e^-tau2) - (T-k) logit(e^-tau1)] / (T-1)``,
    inverted in closed form as ``t_k = -log(expit(rhs)) / tau2``.
    """
    if T < 2:
        raise ValueError(f"Logit schedule needs T >= 2, got {T}")
    if not (tau1 > 0 and tau2 > 0):
        raise ValueError(f"logit argument exp(-tau) must lie in (0, 1); got tau1={tau1}, tau2={tau2}")

    k = np.arange(1, T + 1, dtype=np.float64)
    lo = logit(math.exp(-tau1))
    hi = logit(math.exp(-tau2))
    rhs = ((k - 1) * hi - (T - k) * lo) / (T - 1)
    times = -log_expit(rhs) / tau2
    times[-1] = 1.0
    return Schedule(kind="logit", params={"T": T, "tau1": tau1, "tau2": tau2}, times=times)


def polynomial_schedule(T: int, n: int) -> Schedule:
    """t_k = (k / T)^n."""
    if T < 1 or n < 1:
        raise ValueError(f"Polynomial schedule needs T >= 1 and n >= 1, got T={T}, n={n}")
    times = (np.arange(1, T + 1, dtype=np.float64) / T) ** n
    times[-1] = 1.0
    return Schedule(kind="poly", params={"T": T, "n": n}, times=times)


def cosine_schedule(T: int, offset: float = COSINE_OFFSET) -> Schedule:
    """Cosine heuristic: t_k = 1 - f(k)/f(0), f(k) = cos²(((k/T) + s)/(1 + s) · π/2)."""
    if T < 2:
        raise ValueError(f"Cosine schedule needs T >= 2, got {T}")

    def f(k: np.ndarray) -> np.ndarray:
        return np.cos((k / T + offset) / (1 + offset) * math.pi / 2) ** 2

    k = np.arange(1, T + 1, dtype=np.float64)
    times = 1.0 - f(k) / f(np.zeros(1))
    times[-1] = 1.0
    return Schedule(kind="cosine", params={"T": T, "s": offset}, times=times)


def parse_schedule_spec(spec: str, **defaults: float) -> Schedule:
    """
    Build a schedule from ``kind[:key=value,...]``.

    Examples: ``logit:T=2000,tau1=7.5,tau2=2.5``, ``poly:T=100,n=7``,
    ``cosine:T=100`` or just ``logit`` with fields taken from ``defaults``.
    """
    kind, _, rest = spec.partition(":")
    params: Dict[str, float] = {k: v for k, v in defaults.items() if v is not None}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"Malformed schedule field {item!r} in {spec!r}")
        try:
            params[key.strip()] = float(value)
        except ValueError as e:
            raise UsageError(f"Non-numeric schedule field {item!r}") from e

    kind = kind.strip().lower()
    try:
        T = int(params["T"])
        if kind == "logit":
            return logit_schedule(T, params.get("tau1", 7.5), params.get("tau2", 2.5))
        if kind in ("poly", "polynomial"):
            return polynomial_schedule(T, int(params.get("n", 1)))
        if kind == "cosine":
            return cosine_schedule(T)
    except KeyError as e:
        raise UsageError(f"Schedule {spec!r} is missing field {e}") from e
    except ValueError as e:
        raise UsageError(str(e)) from e
    raise UsageError(f"Unknown schedule kind {kind!r}; use logit, poly or cosine")


def _channel_ssim(a: np.ndarray, b: np.ndarray, window: int, data_range: float) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = (min(window, a.shape[0]), min(window, a.shape[1]))

    def local_mean(x: np.ndarray) -> np.ndarray:
        return sliding_window_view(x, win).mean(axis=(-2, -1))

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def ssim(
    a: IntensityGrid,
    b: IntensityGrid,
    data_range: Optional[float] = None,
    window: Optional[int] = None,
) -> float:
    """
    Structural similarity with uniform square windows, averaged over channels.

    Windows slide over every fully contained position. ``data_range`` defaults
    to the larger peak of the two grids (at least 1); pass the file maxval for
    image data.
    """
    check_same_shape(a, b)
    window = window or get_settings().ssim_window
    if data_range is None:
        data_range = float(max(a.values.max(), b.values.max(), 1))
    if not data_range > 0:
        raise ValueError(f"SSIM data range must be positive, got {data_range}")
    va = a.values.astype(np.float64)
    vb = b.values.astype(np.float64)
    scores = [_channel_ssim(va[:, :, c], vb[:, :, c], window, data_range) for c in range(a.channels)]
    return float(np.mean(scores))


def unevenness(curve: DegradationCurve) -> float:
    """Max consecutive |ΔSSIM| over the mean consecutive |ΔSSIM|; 1 is perfectly even."""
    steps = np.abs(np.diff(np.asarray(curve.mean_ssim, dtype=np.float64)))
    mean = steps.mean() if steps.size else 0.0
    return float(steps.max() / mean) if mean > 0 else float("inf")


def calibrate(
    samples: Sequence[IntensityGrid],
    schedule: Schedule,
    rate: float,
    boundary: BoundaryCondition,
    seed: int,
    data_range: Optional[float] = None,
    threads: Optional[int] = None,
    bank: Optional[KernelBank] = None,
) -> DegradationCurve:
    """
    Mean SSIM between each sample and its corruption at every observation time.

    Each (sample, k) pair draws from its own keyed stream, and per-step means are
    reduced in sample order, so the curve is independent of ``threads``.
    ``data_range`` should be the files' maxval; see :func:`ssim` for the fallback.
    """
    from .forward import corrupt

    if not samples:
        raise ValueError("Calibration needs at least one sample")
    first = samples[0]
    bank = bank or KernelBank(first.width, first.height, rate, boundary, get_settings().kernel_cache_dir)
    bank.precompute(schedule.times)
    threads = threads or get_settings().threads

    def score(index: int) -> List[float]:
        grid = samples[index]
        row = [1.0]
        for k in range(1, schedule.T + 1):
            rng = derive_rng(seed, "calibrate", index, k)
            corrupted, _ = corrupt(grid, bank.get(schedule.time(k)), rng)
            row.append(ssim(grid, corrupted, data_range=data_range))
        return row

    with ThreadPoolExecutor(max_workers=threads) as pool:
        table = np.array(list(pool.map(score, range(len(samples)))))

    n = table.shape[0]
    mean = table.mean(axis=0)
    stderr = table.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    steps = np.arange(schedule.T + 1)
    times = np.array([schedule.time(int(k)) for k in steps])
    logger.info(
        "Calibration finished",
        schedule=schedule.kind,
        samples=n,
        T=schedule.T,
        final_ssim=float(mean[-1]),
    )
    return DegradationCurve(steps=steps, times=times, mean_ssim=mean, stderr=stderr)


def curve_summary(curve: DegradationCurve) -> Tuple[float, float]:
    """(final mean SSIM, unevenness) for log lines and reports."""
    return float(curve.mean_ssim[-1]), unevenness(curve)
