"""Tests for forward corruption."""

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st
from scipy import stats

from dsd.core.errors import ShapeMismatchError
from dsd.core.rng import derive_rng
from dsd.models.lattice import BoundaryCondition, IntensityGrid
from dsd.services.forward import corrupt, corrupt_at_step
from dsd.services.kernel import KernelBank, kernel_for, periodic_kernel
from dsd.services.schedule import logit_schedule, polynomial_schedule


def _point_source(width: int, height: int, x: int, y: int, count: int) -> IntensityGrid:
    values = np.zeros((width, height, 1), dtype=np.int64)
    values[x, y, 0] = count
    return IntensityGrid(values=values)


class TestCorrupt:
    """Test cases for single-kernel corruption."""

    @pytest.mark.parametrize("boundary", list(BoundaryCondition))
    def test_totals_conserved_and_ledger_consistent(self, boundary, rgb_grid, rng):
        """Corruption keeps every channel total and both ledger histograms."""
        kernel = kernel_for(boundary, 4, 4, 120.0, 0.05)
        corrupted, ledger = corrupt(rgb_grid, kernel, rng)
        assert corrupted.totals() == rgb_grid.totals()
        ledger.check_against(rgb_grid, "origin")
        ledger.check_against(corrupted, "current")

    @pytest.mark.parametrize("boundary", list(BoundaryCondition))
    def test_every_ledger_entry_is_reachable(self, boundary, rng):
        """Each recorded move has positive kernel probability from its origin."""
        values = rng.integers(0, 5, size=(8, 7, 2))
        grid = IntensityGrid(values=values)
        kernel = kernel_for(boundary, 8, 7, 120.0, 0.01)
        _, ledger = corrupt(grid, kernel, rng)
        for origins, currents in zip(ledger.origins, ledger.currents):
            probs = kernel.prob_many(origins[:, 0], origins[:, 1], currents[:, 0], currents[:, 1])
            assert np.all(probs > 0)

    @pytest.mark.parametrize("boundary", list(BoundaryCondition))
    def test_composition_matches_single_corruption(self, boundary):
        """Corrupting to t1 then by t2 matches corrupting to t1 + t2 in distribution."""
        grid = _point_source(6, 6, 1, 4, 20_000)
        t1, t2, rate = 0.2, 0.3, 1.0
        once, _ = corrupt(grid, kernel_for(boundary, 6, 6, rate, t1), derive_rng(1, "first"))
        twice, _ = corrupt(once, kernel_for(boundary, 6, 6, rate, t2), derive_rng(1, "second"))
        direct, _ = corrupt(grid, kernel_for(boundary, 6, 6, rate, t1 + t2), derive_rng(1, "direct"))

        table = np.stack([twice.values.ravel(), direct.values.ravel()])
        table = table[:, table.sum(axis=0) > 0]
        _, pvalue, _, _ = stats.chi2_contingency(table)
        assert pvalue > 0.001

    def test_time_zero_is_identity(self, small_grid, rng):
        """A zero-time kernel leaves every unit where it was."""
        corrupted, ledger = corrupt(small_grid, periodic_kernel(5, 4, 120.0, 0.0), rng)
        assert corrupted == small_grid
        assert all(np.array_equal(o, c) for o, c in zip(ledger.origins, ledger.currents))

    def test_empty_grid(self, rng):
        """An all-zero grid corrupts to itself with an empty ledger."""
        grid = IntensityGrid.zeros(3, 3)
        corrupted, ledger = corrupt(grid, periodic_kernel(3, 3, 1.0, 1.0), rng)
        assert corrupted == grid
        assert ledger.count(0) == 0

    def test_kernel_size_must_match(self, small_grid, rng):
        """A kernel built for another lattice is rejected."""
        with pytest.raises(ShapeMismatchError):
            corrupt(small_grid, periodic_kernel(4, 4, 1.0, 1.0), rng)

    def test_same_seed_same_result(self, rgb_grid):
        """Identical streams give identical corruptions."""
        kernel = periodic_kernel(4, 4, 10.0, 0.1)
        a, _ = corrupt(rgb_grid, kernel, derive_rng(7, "x"))
        b, _ = corrupt(rgb_grid, kernel, derive_rng(7, "x"))
        assert a == b

    def test_long_time_single_particle_is_uniform(self, rng):
        """After a long time units spread uniformly over a periodic lattice."""
        grid = _point_source(6, 6, 2, 3, 20_000)
        corrupted, _ = corrupt(grid, periodic_kernel(6, 6, 120.0, 1.0), rng)
        counts = corrupted.values[:, :, 0].ravel()
        assert stats.chisquare(counts).pvalue > 0.001

    def test_displacement_variance_matches_rate(self, rng):
        """Per-axis displacement variance is 2 r t away from the wrap."""
        width = height = 41
        rate, time = 2.0, 1.0
        grid = _point_source(width, height, 20, 20, 50_000)
        _, ledger = corrupt(grid, periodic_kernel(width, height, rate, time), rng)
        dx = ledger.currents[0][:, 0] - 20
        assert np.var(dx) == pytest.approx(2 * rate * time, rel=0.05)


class TestCorruptAtStep:
    """Test cases for schedule-indexed corruption."""

    def test_returns_delta_t(self, small_grid, rng):
        """The third result is t_k - t_{k-1}."""
        schedule = polynomial_schedule(4, 1)
        _, _, dt = corrupt_at_step(small_grid, schedule, 2, 1.0, BoundaryCondition.PERIODIC, rng)
        assert dt == 0.25

    def test_step_outside_range(self, small_grid, rng):
        """Steps 0 and T + 1 are not observation indices."""
        schedule = polynomial_schedule(4, 1)
        for k in (0, 5):
            with pytest.raises(IndexError):
                corrupt_at_step(small_grid, schedule, k, 1.0, BoundaryCondition.PERIODIC, rng)

    def test_uses_supplied_bank(self, small_grid, rng):
        """Kernels come from the bank that is passed in."""
        schedule = logit_schedule(10)
        bank = KernelBank(5, 4, 3.0, BoundaryCondition.NOFLUX)
        corrupted, ledger, _ = corrupt_at_step(
            small_grid, schedule, 10, 3.0, BoundaryCondition.NOFLUX, rng, bank
        )
        assert corrupted.totals() == small_grid.totals()
        assert bank.get(1.0).time == 1.0

    def test_mismatched_bank_rejected(self, small_grid, rng):
        """A bank for another boundary condition is refused."""
        bank = KernelBank(5, 4, 3.0, BoundaryCondition.NOFLUX)
        with pytest.raises(ValueError):
            corrupt_at_step(
                small_grid, polynomial_schedule(3, 1), 1, 3.0, BoundaryCondition.PERIODIC, rng, bank
            )


@hyp_settings(max_examples=25, deadline=None)
@given(
    counts=st.lists(st.integers(min_value=0, max_value=6), min_size=12, max_size=12),
    time=st.floats(min_value=0.0, max_value=2.0),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
    periodic=st.booleans(),
)
def test_corruption_conserves_every_channel(counts, time, seed, periodic):
    """Any grid, time and seed keeps exact per-channel totals."""
    grid = IntensityGrid(values=np.array(counts).reshape(2, 3, 2))
    boundary = BoundaryCondition.PERIODIC if periodic else BoundaryCondition.NOFLUX
    corrupted, ledger = corrupt(grid, kernel_for(boundary, 2, 3, 5.0, time), derive_rng(seed))
    assert corrupted.totals() == grid.totals()
    ledger.check_against(corrupted, "current")
