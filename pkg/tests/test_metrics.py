"""Tests for audits and microstructure statistics."""

import numpy as np
import pytest

from dsd.core.errors import DataError, ShapeMismatchError
from dsd.models.lattice import BoundaryCondition, IntensityGrid
from dsd.services.metrics import (
    Binarization,
    binarize,
    conservation_audit,
    intensity_drift_percent,
    mean_two_point_correlation,
    porosity,
    s2_deviation,
    stacked_pixels,
    totals_audit,
    two_point_correlation,
    write_s2_csv,
)


def _checkerboard(n: int) -> IntensityGrid:
    return IntensityGrid(values=(np.add.outer(np.arange(n), np.arange(n)) % 2)[:, :, None])


class TestAudits:
    """Test cases for conservation audits."""

    def test_conserved(self, rgb_grid):
        """Equal totals pass with zero deltas and PASS lines."""
        report = conservation_audit(rgb_grid, rgb_grid)
        assert report.passed
        assert report.deltas == (0, 0, 0)
        assert report.lines()[0] == "channel 0: before=3 after=3 delta=0 OK"
        assert report.lines()[-1] == "conservation: PASS"

    def test_violation(self, small_grid):
        """A changed total fails and is reported per channel."""
        values = small_grid.values.copy()
        values[1, 1, 0] += 2
        report = conservation_audit(small_grid, IntensityGrid(values=values))
        assert not report.passed
        assert report.deltas == (2,)
        assert report.lines()[0].endswith("FAIL")
        assert report.lines()[-1] == "conservation: FAIL"

    def test_totals_audit(self, rgb_grid):
        """Grids are audited against expected totals of the right length."""
        assert totals_audit(rgb_grid, (3, 4, 5)).passed
        assert not totals_audit(rgb_grid, (3, 4, 6)).passed
        with pytest.raises(ShapeMismatchError):
            totals_audit(rgb_grid, (3, 4))

    def test_drift(self):
        """Drift is a percentage of the starting total, infinite from zero."""
        before = IntensityGrid(values=np.array([[[10, 0, 0]]]))
        after = IntensityGrid(values=np.array([[[12, 0, 1]]]))
        drift = intensity_drift_percent(before, after)
        assert drift[0] == pytest.approx(20.0)
        assert drift[1] == 0.0
        assert drift[2] == np.inf

    def test_shapes_must_match(self, small_grid):
        """Audits need grids of the same shape."""
        with pytest.raises(ShapeMismatchError):
            conservation_audit(small_grid, IntensityGrid.zeros(4, 4))


class TestPorosity:
    """Test cases for porosity."""

    def test_all_ones(self):
        """A full grid has porosity 1."""
        assert porosity(IntensityGrid(values=np.ones((5, 5, 1)))) == 1.0

    def test_quarter(self):
        """An 8x8 block in 16x16 has porosity 1/4."""
        values = np.zeros((16, 16, 1), dtype=np.int64)
        values[:8, :8] = 1
        assert porosity(IntensityGrid(values=values)) == 64 / 256

    def test_non_binary_rejected(self, small_grid):
        """Porosity refuses stacked pixels by default."""
        with pytest.raises(DataError):
            porosity(small_grid)


class TestTwoPointCorrelation:
    """Test cases for S2 profiles."""

    @pytest.mark.parametrize("boundary", list(BoundaryCondition))
    def test_all_ones(self, boundary):
        """A full grid has S2 equal to 1 at every lag."""
        grid = IntensityGrid(values=np.ones((6, 6, 1)))
        np.testing.assert_array_equal(two_point_correlation(grid, 5, boundary), np.ones(6))

    def test_checkerboard_alternates(self):
        """A checkerboard alternates between 1/2 and 0."""
        s2 = two_point_correlation(_checkerboard(8), 6)
        np.testing.assert_allclose(s2[0::2], 0.5)
        np.testing.assert_allclose(s2[1::2], 0.0)

    def test_lag_zero_is_porosity(self, rng):
        """S2 at lag 0 is the porosity for both boundaries."""
        grid = IntensityGrid(values=rng.integers(0, 2, size=(9, 7, 1)))
        for boundary in BoundaryCondition:
            assert two_point_correlation(grid, 3, boundary)[0] == pytest.approx(porosity(grid))

    def test_noflux_uses_pairs_inside_domain(self):
        """No-flux S2 averages over pairs inside the lattice."""
        values = np.zeros((4, 4, 1), dtype=np.int64)
        values[0, :] = 1
        values[3, :] = 1
        grid = IntensityGrid(values=values)
        # lag 3 along x pairs rows 0 and 3 only; along y every row pairs with itself
        s2 = two_point_correlation(grid, 3, BoundaryCondition.NOFLUX)
        assert s2[3] == pytest.approx((1.0 + 0.5) / 2)
        periodic = two_point_correlation(grid, 3, BoundaryCondition.PERIODIC)
        assert periodic[3] != s2[3]

    def test_lag_out_of_range(self):
        """Lags must be shorter than the smaller side."""
        with pytest.raises(ValueError):
            two_point_correlation(_checkerboard(4), 4)

    def test_needs_single_channel(self):
        """S2 is defined for one channel only."""
        with pytest.raises(ShapeMismatchError):
            two_point_correlation(IntensityGrid.zeros(4, 4, 3), 1)

    def test_deviation_between_sets(self):
        """Deviation is the mean absolute gap between mean profiles."""
        ones = [IntensityGrid(values=np.ones((4, 4, 1)))]
        zeros = [IntensityGrid.zeros(4, 4)]
        assert s2_deviation(ones, ones, 3) == 0.0
        assert s2_deviation(ones, zeros, 3) == 1.0
        np.testing.assert_allclose(mean_two_point_correlation(ones + zeros, 2), 0.5)

    def test_csv(self, tmp_path):
        """The S2 CSV has a header and one row per lag."""
        path = tmp_path / "s2.csv"
        write_s2_csv(np.array([0.5, 0.25]), path)
        assert path.read_text().splitlines() == ["lag,S2", "0,0.5", "1,0.25"]


class TestBinarization:
    """Test cases for metrics on grids with stacked units."""

    def _stacked(self) -> IntensityGrid:
        values = np.zeros((4, 4, 1), dtype=np.int64)
        values[0, 0] = 3
        values[1, 2] = 1
        values[2, 2] = 2
        return IntensityGrid(values=values)

    def test_stacked_pixels(self):
        """Pixels above one unit are counted once each."""
        assert stacked_pixels(self._stacked()) == 2
        assert stacked_pixels(_checkerboard(4)) == 0

    def test_clip_caps_at_one(self):
        """Clip binarization replaces every positive count by 1."""
        clipped = binarize(self._stacked(), Binarization.CLIP)
        assert clipped.max() == 1
        assert clipped.sum() == 3

    def test_strict_rejects_stacking(self):
        """Strict binarization refuses stacked pixels and says how many."""
        with pytest.raises(DataError, match="2 pixels"):
            binarize(self._stacked(), Binarization.STRICT)
        with pytest.raises(DataError):
            porosity(self._stacked())

    def test_mode_accepts_plain_strings(self):
        """Modes can be passed by value, as the command line does."""
        assert porosity(self._stacked(), "clip") == 3 / 16

    def test_clip_metrics_match_clipped_grid(self):
        """S2 under clip equals S2 of the explicitly clipped grid."""
        grid = self._stacked()
        clipped = IntensityGrid(values=np.minimum(grid.values, 1))
        np.testing.assert_array_equal(
            two_point_correlation(grid, 3, binarization=Binarization.CLIP),
            two_point_correlation(clipped, 3),
        )
        assert s2_deviation([grid], [clipped], 3, binarization=Binarization.CLIP) == 0.0
