"""Tests for rate predictors, the toy model and checkpoints."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings as hyp_settings, strategies as st

from dsd.core.codec import pack_container
from dsd.core.errors import (
    ChecksumMismatchError,
    InfiniteLossError,
    KernelFormatError,
    LedgerMismatchError,
    ShapeMismatchError,
)
from dsd.models.lattice import BoundaryCondition, IntensityGrid, ParticleLedger, RateField
from dsd.services.forward import corrupt
from dsd.services.kernel import kernel_for, periodic_kernel
from dsd.services.rate_model import (
    MODEL_MAGIC,
    LedgerAwarePredictor,
    OraclePredictor,
    RatePredictor,
    ToyConvModel,
    ToyPredictor,
    backward_pass,
    decode_checkpoint,
    encode_checkpoint,
    forward_pass,
    load_checkpoint,
    normalization_scale,
    save_checkpoint,
)
from dsd.services.reverse import oracle_rates
from dsd.services.sampler import apply_moves, draw_moves


@pytest.fixture
def model():
    torch.manual_seed(0)
    return ToyConvModel(channels=1, hidden=4, boundary=BoundaryCondition.PERIODIC, scale=3.0, width=6, height=6)


@pytest.fixture
def grid(rng):
    return IntensityGrid(values=rng.integers(0, 5, size=(6, 6, 1)))


class TestToyConvModel:
    """Test cases for the convolutional rate model."""

    def test_zero_output_predicts_ln2(self, model, grid):
        """A zeroed output layer gives softplus(0) = ln 2 everywhere."""
        model.zero_output()
        field = forward_pass(model, grid, 0.5)
        np.testing.assert_allclose(field.values, math.log(2.0), rtol=1e-12)

    def test_output_shape(self, rng):
        """Predictions have shape (4, W, H, C)."""
        torch.manual_seed(1)
        rgb = ToyConvModel(channels=3, hidden=5)
        grid = IntensityGrid(values=rng.integers(0, 3, size=(5, 4, 3)))
        assert forward_pass(rgb, grid, 1.0).shape == (4, 5, 4, 3)

    def test_periodic_model_is_translation_equivariant(self, model, grid):
        """Shifting the input shifts the periodic model's output."""
        shifted = IntensityGrid(values=np.roll(grid.values, shift=(1, 2), axis=(0, 1)))
        a = forward_pass(model, grid, 0.3).values
        b = forward_pass(model, shifted, 0.3).values
        np.testing.assert_allclose(np.roll(a, shift=(1, 2), axis=(1, 2)), b, atol=1e-12)

    def test_noflux_model_uses_zero_padding(self, grid):
        """No-flux models pad with zeros."""
        torch.manual_seed(2)
        flat = ToyConvModel(channels=1, hidden=4, boundary=BoundaryCondition.NOFLUX)
        assert flat.conv_in.padding_mode == "zeros"
        assert forward_pass(flat, grid, 0.3).shape == (4, 6, 6, 1)

    def test_time_outside_unit_interval(self, model, grid):
        """Times outside (0, 1] are rejected."""
        for t in (0.0, 1.5):
            with pytest.raises(ValueError):
                forward_pass(model, grid, t)

    def test_channel_mismatch(self, model):
        """A grid with the wrong channel count is rejected."""
        with pytest.raises(ShapeMismatchError):
            forward_pass(model, IntensityGrid.zeros(6, 6, 2), 0.5)

    def test_invalid_construction(self):
        """Zero channels and a zero scale are invalid."""
        with pytest.raises(ValueError):
            ToyConvModel(channels=0)
        with pytest.raises(ValueError):
            ToyConvModel(channels=1, scale=0.0)

    def test_predictor_protocol(self, model):
        """The toy predictor is a rate predictor but not ledger-aware."""
        predictor = ToyPredictor(model)
        assert isinstance(predictor, RatePredictor)
        assert not isinstance(predictor, LedgerAwarePredictor)


class TestBackwardPass:
    """Test cases for loss gradients."""

    @pytest.mark.parametrize("kind", ["l1", "likelihood"])
    def test_gradients_match_finite_differences(self, kind, model, grid, rng):
        """Autograd gradients agree with central differences."""
        truth = RateField(values=rng.uniform(0.2, 2.0, size=(4, 6, 6, 1)))
        _, grads = backward_pass(model, grid, 0.4, kind, truth, 0.05)
        h = 1e-5
        params = dict(model.named_parameters())
        for name in ("conv_in.weight", "conv_hidden.bias", "conv_out.weight"):
            flat = params[name].data.view(-1)
            for index in map(int, rng.choice(flat.numel(), size=3, replace=False)):
                original = flat[index].item()
                with torch.no_grad():
                    flat[index] = original + h
                plus, _ = backward_pass(model, grid, 0.4, kind, truth, 0.05)
                with torch.no_grad():
                    flat[index] = original - h
                minus, _ = backward_pass(model, grid, 0.4, kind, truth, 0.05)
                with torch.no_grad():
                    flat[index] = original
                numeric = (plus - minus) / (2 * h)
                analytic = grads[name].reshape(-1)[index]
                assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-9)

    def test_returns_gradient_for_every_parameter(self, model, grid):
        """Every named parameter gets a gradient."""
        truth = RateField(values=np.ones((4, 6, 6, 1)))
        loss, grads = backward_pass(model, grid, 0.4, "l1", truth, 0.1)
        assert loss >= 0
        assert set(grads) == {name for name, _ in model.named_parameters()}

    def test_zero_prediction_with_positive_truth(self, model, grid):
        """A vanishing prediction under the likelihood loss is an infinite loss."""
        with torch.no_grad():
            model.conv_out.weight.zero_()
            model.conv_out.bias.fill_(-1000.0)
        truth = RateField(values=np.ones((4, 6, 6, 1)))
        with pytest.raises(InfiniteLossError):
            backward_pass(model, grid, 0.4, "likelihood", truth, 0.1)

    def test_truth_shape_checked(self, model, grid):
        """Target rates must fit the grid."""
        with pytest.raises(ShapeMismatchError):
            backward_pass(model, grid, 0.4, "l1", RateField.zeros(5, 6), 0.1)

    def test_likelihood_needs_positive_dt(self, model, grid):
        """The likelihood loss needs a positive step length."""
        with pytest.raises(ValueError):
            backward_pass(model, grid, 0.4, "likelihood", RateField.zeros(6, 6), 0.0)


class TestCheckpoint:
    """Test cases for the DSDM model container."""

    def test_round_trip_preserves_predictions(self, tmp_path, model, grid):
        """A reloaded checkpoint keeps its header and predictions."""
        path = tmp_path / "model.dsdm"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert (loaded.width, loaded.height, loaded.channels, loaded.hidden) == (6, 6, 1, 4)
        assert loaded.boundary is BoundaryCondition.PERIODIC
        assert loaded.scale.item() == 3.0
        assert forward_pass(loaded, grid, 0.7) == forward_pass(model, grid, 0.7)

    def test_corrupted_payload(self, model):
        """A flipped payload bit fails the checksum."""
        data = bytearray(encode_checkpoint(model))
        data[60] ^= 0x10
        with pytest.raises(ChecksumMismatchError):
            decode_checkpoint(bytes(data))

    def test_bad_boundary_code(self):
        """An unknown boundary code is a format error."""
        data = pack_container(MODEL_MAGIC, "IIIIBd", (4, 4, 1, 2, 7, 1.0), b"")
        with pytest.raises(KernelFormatError):
            decode_checkpoint(data)

    def test_payload_size_checked(self, model):
        """A payload of the wrong size is a format error."""
        data = pack_container(MODEL_MAGIC, "IIIIBd", (6, 6, 1, 4, 1, 3.0), b"\x00" * 16)
        with pytest.raises(KernelFormatError):
            decode_checkpoint(data)

    def test_normalization_scale(self):
        """The scale is the 99th percentile pixel value, 1 for empty data."""
        dataset = [IntensityGrid(values=np.arange(100).reshape(10, 10, 1))]
        assert normalization_scale(dataset) == pytest.approx(98.01)
        assert normalization_scale([IntensityGrid.zeros(3, 3)]) == 1.0
        with pytest.raises(ValueError):
            normalization_scale([])


class TestOraclePredictor:
    """Test cases for the ledger-backed predictor."""

    def test_needs_grid_or_ledger(self):
        """An oracle needs a clean grid or a ledger."""
        with pytest.raises(LedgerMismatchError):
            OraclePredictor(1.0, BoundaryCondition.PERIODIC)

    def test_call_before_prime(self, small_grid):
        """A clean-grid oracle must be primed before use."""
        oracle = OraclePredictor.from_clean(small_grid, 1.0, BoundaryCondition.PERIODIC)
        with pytest.raises(LedgerMismatchError):
            oracle(small_grid, 0.5)

    def test_matches_oracle_rates(self, small_grid, rng):
        """Oracle predictions equal the ledger rates at the same time."""
        kernel = periodic_kernel(5, 4, 2.0, 0.6)
        corrupted, ledger = corrupt(small_grid, kernel, rng)
        oracle = OraclePredictor.from_ledger(ledger, 2.0, BoundaryCondition.PERIODIC)
        assert isinstance(oracle, LedgerAwarePredictor)
        assert oracle.prime(kernel_for(BoundaryCondition.PERIODIC, 5, 4, 2.0, 1.0), rng) == corrupted
        assert oracle(corrupted, 0.6) == oracle_rates(ledger, corrupted, kernel, 2.0)

    def test_prime_corrupts_clean_grid(self, rgb_grid, rng):
        """Priming corrupts the clean grid and keeps the ledger consistent."""
        oracle = OraclePredictor.from_clean(rgb_grid, 5.0, BoundaryCondition.NOFLUX)
        noise = oracle.prime(kernel_for(BoundaryCondition.NOFLUX, 4, 4, 5.0, 1.0), rng)
        assert noise.totals() == rgb_grid.totals()
        oracle.ledger.check_against(rgb_grid, "origin")
        oracle.ledger.check_against(noise, "current")

    def test_observe_keeps_ledger_in_step(self, rgb_grid, rng):
        """Observed moves keep the ledger matching the grid."""
        kernel_1 = kernel_for(BoundaryCondition.PERIODIC, 4, 4, 3.0, 1.0)
        oracle = OraclePredictor.from_clean(rgb_grid, 3.0, BoundaryCondition.PERIODIC)
        grid = oracle.prime(kernel_1, rng)
        for t in (1.0, 0.8, 0.6, 0.4):
            rates = oracle(grid, t)
            moves = draw_moves(grid, rates, 0.1, rng)
            oracle.observe(moves, rng)
            grid = apply_moves(grid, moves, BoundaryCondition.PERIODIC)
            oracle.ledger.check_against(grid, "current")

    def test_observe_before_call(self, small_grid):
        """Observing before any prediction is refused."""
        oracle = OraclePredictor.from_ledger(
            ParticleLedger.from_grid(small_grid), 1.0, BoundaryCondition.PERIODIC
        )
        with pytest.raises(LedgerMismatchError):
            oracle.observe(np.zeros((4, 5, 4, 1), dtype=np.int64), np.random.default_rng(0))


@hyp_settings(max_examples=20, deadline=None)
@given(
    counts=st.lists(st.integers(min_value=0, max_value=200), min_size=16, max_size=16),
    t=st.floats(min_value=1e-6, max_value=1.0),
)
def test_predictions_are_non_negative_and_finite(counts, t):
    """Predictions are finite and non-negative for any counts."""
    torch.manual_seed(3)
    model = ToyConvModel(channels=1, hidden=3)
    field = forward_pass(model, IntensityGrid(values=np.array(counts).reshape(4, 4, 1)), t)
    assert np.all(field.values >= 0)
    assert np.all(np.isfinite(field.values))
