"""Training objectives evaluated against ground-truth reverse rates.

The likelihood objective is the quantity minimised during training,
``Δt Σ (pred - truth log pred)``, which is stationary exactly at pred = truth.
Zero-truth entries contribute ``pred`` alone (0 log p is taken as 0).
"""

import numpy as np

from ..core.errors import InfiniteLossError, ShapeMismatchError
from ..models.lattice import RateField


def _check_shapes(pred: RateField, truth: RateField) -> None:
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"Rate fields differ in shape: {pred.shape} vs {truth.shape}")


def rate_matching_l1(pred: RateField, truth: RateField) -> float:
    """Mean absolute rate difference over all (direction, x, y, c)."""
    _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred.values - truth.values)))


def likelihood_loss(pred: RateField, truth: RateField, dt: float) -> float:
    """Δt · Σ (pred - truth · ln pred)."""
    _check_shapes(pred, truth)
    if not dt > 0:
        raise ValueError(f"Δt must be positive, got {dt}")
    p, r = pred.values, truth.values
    positive = r > 0
    if np.any(p[positive] <= 0):
        raise InfiniteLossError("Prediction is zero where the true rate is positive")
    log_term = np.zeros_like(p)
    log_term[positive] = r[positive] * np.log(p[positive])
    return float(dt * np.sum(p - log_term))
