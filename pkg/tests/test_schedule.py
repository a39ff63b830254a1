"""Tests for observation schedules, SSIM and calibration."""

import math

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st
from scipy.special import logit

from dsd.core.errors import ShapeMismatchError, UsageError
from dsd.models.lattice import BoundaryCondition, IntensityGrid
from dsd.models.schedule import DegradationCurve, Schedule
from dsd.services.dataset import synth_blobs
from dsd.services.schedule import (
    calibrate,
    cosine_schedule,
    logit_schedule,
    parse_schedule_spec,
    polynomial_schedule,
    ssim,
    unevenness,
)


class TestLogitSchedule:
    """Test cases for logit-spaced observation times."""

    def test_first_time_closed_form(self):
        """t_1 equals -ln(1 - e^-tau1) / tau2."""
        schedule = logit_schedule(2000, 7.5, 2.5)
        expected = -math.log(1 - math.exp(-7.5)) / 2.5
        assert schedule.time(1) == pytest.approx(expected, rel=1e-12)
        assert schedule.time(1) == pytest.approx(2.213e-4, rel=1e-3)

    def test_times_satisfy_defining_relation(self):
        """logit(e^(-tau2 t_k)) interpolates linearly between its endpoints."""
        T, tau1, tau2 = 50, 7.5, 2.5
        schedule = logit_schedule(T, tau1, tau2)
        lo, hi = logit(math.exp(-tau1)), logit(math.exp(-tau2))
        for k in range(1, T):
            rhs = ((k - 1) * hi - (T - k) * lo) / (T - 1)
            assert logit(math.exp(-tau2 * schedule.time(k))) == pytest.approx(rhs, abs=1e-9)

    @pytest.mark.parametrize("T", [10, 100, 2000])
    def test_strictly_increasing_and_ends_at_one(self, T):
        """Times are positive, strictly increasing and end exactly at 1."""
        times = logit_schedule(T).times
        assert np.all(np.diff(times) > 0)
        assert times[-1] == 1.0
        assert times[0] > 0

    def test_invalid_arguments(self):
        """T < 2 and non-positive tau values are rejected."""
        with pytest.raises(ValueError):
            logit_schedule(1)
        with pytest.raises(ValueError):
            logit_schedule(10, tau1=0.0)


class TestOtherSchedules:
    """Test cases for polynomial and cosine schedules."""

    def test_linear(self):
        """Degree one gives evenly spaced times."""
        assert polynomial_schedule(4, 1).times.tolist() == [0.25, 0.5, 0.75, 1.0]

    def test_seventh_power_midpoint(self):
        """Degree seven puts the midpoint at 2^-7."""
        assert polynomial_schedule(2000, 7).time(1000) == 0.0078125

    def test_cosine_matches_direct_formula(self):
        """Cosine times are 1 - alpha_bar with offset 0.008."""
        T, s = 100, 0.008
        schedule = cosine_schedule(T)

        def alpha_bar(k):
            return math.cos(((k / T) + s) / (1 + s) * math.pi / 2) ** 2 / math.cos(
                s / (1 + s) * math.pi / 2
            ) ** 2

        assert schedule.time(50) == pytest.approx(1 - alpha_bar(50), rel=1e-12)
        assert schedule.time(T) == 1.0
        assert np.all(np.diff(schedule.times) > 0)

    def test_delta_uses_implicit_zero(self):
        """t_0 is 0, so the first delta is t_1."""
        schedule = polynomial_schedule(4, 1)
        assert schedule.time(0) == 0.0
        assert schedule.delta(1) == 0.25
        assert schedule.delta(3) == 0.25

    def test_schedule_model_rejects_bad_times(self):
        """Decreasing times or a last time below 1 are invalid."""
        with pytest.raises(ValueError):
            Schedule(kind="poly", params={}, times=np.array([0.5, 0.4, 1.0]))
        with pytest.raises(ValueError):
            Schedule(kind="poly", params={}, times=np.array([0.5, 0.9]))

    def test_csv_output(self, tmp_path):
        """The schedule CSV has a header plus one row per step."""
        path = tmp_path / "schedule.csv"
        polynomial_schedule(3, 2).to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,t_k"
        assert len(lines) == 4


class TestScheduleSpec:
    """Test cases for schedule spec strings."""

    def test_full_spec(self):
        """Every field can be given in the spec string."""
        schedule = parse_schedule_spec("logit:T=20,tau1=6,tau2=2")
        assert schedule.kind == "logit"
        assert schedule.T == 20
        assert schedule.params["tau1"] == 6.0

    def test_kind_with_defaults(self):
        """A bare kind takes its fields from the defaults."""
        schedule = parse_schedule_spec("poly", T=10, n=3)
        assert schedule.time(5) == pytest.approx(0.125)

    def test_spec_overrides_defaults(self):
        """Fields in the string win over defaults."""
        assert parse_schedule_spec("cosine:T=12", T=99).T == 12

    @pytest.mark.parametrize("spec", ["bogus:T=5", "logit:T", "logit:T=abc", "poly:n=2"])
    def test_malformed(self, spec):
        """Unknown kinds, bad fields and missing fields are usage errors."""
        with pytest.raises(UsageError):
            parse_schedule_spec(spec)


class TestSSIM:
    """Test cases for the structural similarity index."""

    def test_identity_is_one(self, rng):
        """A grid compared with itself scores 1."""
        grid = IntensityGrid(values=rng.integers(0, 9, size=(12, 10, 2)))
        assert ssim(grid, grid) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self, rng):
        """SSIM does not depend on argument order."""
        a = IntensityGrid(values=rng.integers(0, 5, size=(10, 10, 1)))
        b = IntensityGrid(values=rng.integers(0, 5, size=(10, 10, 1)))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_inverted_checkerboard_is_negative(self):
        """Anti-correlated structure gives a negative score."""
        board = (np.add.outer(np.arange(16), np.arange(16)) % 2)[:, :, None]
        assert ssim(IntensityGrid(values=board), IntensityGrid(values=1 - board)) < 0

    def test_shape_mismatch(self):
        """Grids of different shape are rejected."""
        with pytest.raises(ShapeMismatchError):
            ssim(IntensityGrid.zeros(4, 4), IntensityGrid.zeros(4, 5))

    def test_small_grids_use_whole_image_window(self):
        """Grids smaller than the window still give a score in [-1, 1]."""
        a = IntensityGrid(values=np.array([[[1], [0]], [[0], [1]]]))
        assert -1.0 <= ssim(a, IntensityGrid(values=1 - a.values)) <= 1.0

    def test_explicit_data_range_differs_from_peak(self):
        """A file maxval below the data peak changes the score; the default is the peak."""
        clean = synth_blobs(8, 8, 1, 0.25, 1.0, seed=4)[0]
        stacked = clean.values.copy()
        stacked[0, 0, 0] = 3
        stacked[5, 5, 0] = 2
        noisy = IntensityGrid(values=stacked)
        peak = float(noisy.values.max())
        assert peak == 3.0
        assert ssim(clean, noisy) == ssim(clean, noisy, data_range=peak)
        assert ssim(clean, noisy, data_range=1.0) != pytest.approx(ssim(clean, noisy), abs=1e-6)

    def test_non_positive_data_range(self, small_grid):
        """The dynamic range must be positive."""
        with pytest.raises(ValueError):
            ssim(small_grid, small_grid, data_range=0.0)


class TestCalibration:
    """Test cases for schedule calibration."""

    def test_curve_shape_and_clean_start(self):
        """The curve has T + 1 points starting from SSIM 1 with zero spread."""
        samples = synth_blobs(8, 8, 3, 0.25, 1.0, seed=1)
        schedule = polynomial_schedule(5, 2)
        curve = calibrate(samples, schedule, 4.0, BoundaryCondition.PERIODIC, seed=3)
        assert len(curve.mean_ssim) == schedule.T + 1
        assert curve.mean_ssim[0] == 1.0
        assert curve.stderr[0] == 0.0
        assert curve.times[-1] == 1.0

    @pytest.mark.parametrize("boundary", list(BoundaryCondition))
    def test_ssim_never_rises_beyond_noise(self, boundary):
        """Mean SSIM does not increase between steps by more than two standard errors."""
        samples = synth_blobs(16, 16, 16, 0.25, 1.5, seed=5)
        curve = calibrate(samples, polynomial_schedule(10, 1), 2.0, boundary, seed=6, data_range=1.0)
        mean, stderr = curve.mean_ssim, curve.stderr
        rises = np.diff(mean)
        allowed = 2 * np.sqrt(stderr[:-1] ** 2 + stderr[1:] ** 2) + 1e-12
        assert np.all(rises <= allowed)
        assert mean[-1] < mean[1] < 1.0

    def test_logit_degrades_more_evenly_than_linear(self):
        """At the default rate the logit schedule is less uneven than linear times."""
        samples = synth_blobs(16, 16, 24, 0.25, 1.5, seed=7)
        scores = {
            name: unevenness(
                calibrate(samples, schedule, 120.0, BoundaryCondition.PERIODIC, seed=8, data_range=1.0)
            )
            for name, schedule in (
                ("logit", logit_schedule(40)),
                ("poly1", polynomial_schedule(40, 1)),
            )
        }
        assert scores["logit"] < scores["poly1"]

    def test_unevenness_of_one_step_collapse_is_T(self):
        """A curve that drops entirely in its first step scores T."""
        T = 8
        ssim_values = np.r_[1.0, np.zeros(T)]
        curve = DegradationCurve(
            steps=np.arange(T + 1), times=np.linspace(0, 1, T + 1), mean_ssim=ssim_values, stderr=np.zeros(T + 1)
        )
        assert unevenness(curve) == pytest.approx(T)

    def test_data_range_changes_the_curve(self):
        """Calibration passes its data range down to SSIM."""
        samples = synth_blobs(8, 8, 3, 0.5, 1.0, seed=1)
        schedule = polynomial_schedule(3, 1)
        unit = calibrate(samples, schedule, 4.0, BoundaryCondition.PERIODIC, seed=3, data_range=1.0)
        wide = calibrate(samples, schedule, 4.0, BoundaryCondition.PERIODIC, seed=3, data_range=255.0)
        assert np.all(wide.mean_ssim[1:] > unit.mean_ssim[1:])

    def test_independent_of_thread_count(self):
        """Worker count does not change the curve."""
        samples = synth_blobs(8, 8, 4, 0.25, 1.0, seed=2)
        schedule = polynomial_schedule(4, 1)
        one = calibrate(samples, schedule, 4.0, BoundaryCondition.NOFLUX, seed=9, threads=1)
        many = calibrate(samples, schedule, 4.0, BoundaryCondition.NOFLUX, seed=9, threads=4)
        np.testing.assert_array_equal(one.mean_ssim, many.mean_ssim)

    def test_csv_header(self, tmp_path):
        """The curve CSV starts with k,t_k,mean_ssim,stderr."""
        curve = DegradationCurve(
            steps=np.arange(3),
            times=np.array([0.0, 0.5, 1.0]),
            mean_ssim=np.array([1.0, 0.5, 0.1]),
            stderr=np.zeros(3),
        )
        path = tmp_path / "curve.csv"
        curve.to_csv(path)
        assert path.read_text().splitlines()[0] == "k,t_k,mean_ssim,stderr"

    def test_unevenness_of_linear_curve_is_one(self):
        """Equal SSIM steps give unevenness 1."""
        curve = DegradationCurve(
            steps=np.arange(5),
            times=np.linspace(0, 1, 5),
            mean_ssim=np.linspace(1, 0, 5),
            stderr=np.zeros(5),
        )
        assert unevenness(curve) == pytest.approx(1.0)

    def test_empty_samples_rejected(self):
        """Calibration needs at least one sample."""
        with pytest.raises(ValueError):
            calibrate([], polynomial_schedule(3, 1), 1.0, BoundaryCondition.PERIODIC, seed=0)


@hyp_settings(max_examples=30, deadline=None)
@given(T=st.integers(min_value=2, max_value=400), n=st.integers(min_value=1, max_value=7))
def test_every_schedule_is_increasing(T, n):
    """All schedule kinds are strictly increasing and end at 1."""
    for schedule in (logit_schedule(T), polynomial_schedule(T, n), cosine_schedule(T)):
        assert np.all(np.diff(schedule.times) > 0)
        assert schedule.times[-1] == 1.0
