"""Tests for representability sweeps and the FL-from-sigma selector."""

import numpy as np
import pytest

from fxpquant.errors import ConfigError, DomainError
from fxpquant.formats import FixFormat
from fxpquant.stats import (
    SweepConfig,
    argmin_csv,
    cell_seed,
    error_grid_csv,
    fit_threshold_line,
    fl_from_std,
    relative_error,
    rectify,
    sample_gaussian,
    sweep,
    threshold_sigmas,
    thresholds_csv,
)


class TestSampling:
    def test_sample_std_close(self):
        v = sample_gaussian(1.0, 10_000, seed=3)
        assert abs(np.std(v) - 1.0) < 0.03

    def test_sigma_must_be_positive(self):
        with pytest.raises(DomainError):
            sample_gaussian(0.0, 100, seed=0)
        with pytest.raises(DomainError):
            sample_gaussian(-1.0, 100, seed=0)

    def test_seed_determinism(self):
        a = sample_gaussian(2.0, 1000, seed=7)
        b = sample_gaussian(2.0, 1000, seed=7)
        assert np.array_equal(a, b)

    def test_rectify(self):
        assert np.array_equal(rectify(np.array([-1.0, 2.0])), [0.0, 2.0])
        assert np.array_equal(rectify(-np.ones(5)), np.zeros(5))
        v = np.array([0.0, 1.0, 3.0])
        assert np.array_equal(rectify(v), v)


class TestRelativeError:
    def test_zero_for_representable(self):
        fmt = FixFormat(8, 4, signed=True)
        v = np.array([-2.0, 0.5, 3.0625, 7.9375])
        assert relative_error(v, fmt) == 0.0

    def test_saturation_dominates_for_huge_values(self):
        fmt = FixFormat(8, 4, signed=True)
        v = np.full(100, 1e6)
        assert relative_error(v, fmt) == pytest.approx(1.0, rel=1e-4)

    def test_all_zero_rejected(self):
        with pytest.raises(DomainError):
            relative_error(np.zeros(10), FixFormat(8, 4, True))

    def test_sigma_one_signed_fl5_small(self):
        v = sample_gaussian(1.0, 10_000, seed=5)
        assert relative_error(v, FixFormat(8, 5, signed=True)) < 0.01

    def test_scale_covariance_under_power_of_two(self):
        rng = np.random.default_rng(9)
        v = rng.uniform(0.01, 0.9, 2000)  # no saturation at either format
        e1 = relative_error(2.0 * v, FixFormat(8, 6, False))
        e2 = relative_error(v, FixFormat(8, 7, False))
        assert e1 == e2


class TestSelector:
    def test_selector_constants(self):
        assert fl_from_std(40.0, signed=True) == 0
        assert fl_from_std(1.0, signed=True) == 5
        assert fl_from_std(70.0, signed=False) == 0

    def test_clamping(self):
        assert fl_from_std(0.01, signed=False) == 8  # raw formula gives 12
        assert fl_from_std(0.01, signed=True) == 7
        assert fl_from_std(1e6, signed=True) == 0

    def test_domain(self):
        with pytest.raises(DomainError):
            fl_from_std(0.0, signed=True)

    def test_log_step_structure(self):
        # halving sigma raises the unclamped FL by exactly one
        for sigma in (0.7, 1.3, 5.0, 17.0):
            assert fl_from_std(sigma / 2, True) == fl_from_std(sigma, True) + 1


class TestSweep:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SweepConfig(sigma_grid=np.array([1.0, 0.5]))
        with pytest.raises(ConfigError):
            SweepConfig(sigma_grid=np.array([-1.0, 1.0]))
        with pytest.raises(ConfigError):
            SweepConfig(n_samples=50)

    def test_deterministic_bit_for_bit(self):
        cfg = SweepConfig(sigma_grid=np.logspace(-1, 1, 8), n_samples=2000, seed=11)
        t1, t2 = sweep(cfg), sweep(cfg)
        assert np.array_equal(t1.errors, t2.errors)
        assert np.array_equal(t1.opt_fl, t2.opt_fl)

    def test_cell_seed_is_order_free(self):
        # the row sample depends only on (seed, row index)
        a = sample_gaussian(1.0, 100, cell_seed(5, 3))
        b = sample_gaussian(1.0, 100, cell_seed(5, 3))
        assert np.array_equal(a, b)

    def test_signed_sweep_under_one_percent(self):
        cfg = SweepConfig(sigma_grid=np.logspace(np.log10(0.1), np.log10(40.0), 25), seed=1)
        table = sweep(cfg)
        assert table.min_error.max() < 0.01

    def test_unsigned_sweep_under_one_percent(self):
        cfg = SweepConfig(
            sigma_grid=np.logspace(np.log10(0.1), np.log10(100.0), 25),
            signed=False,
            seed=1,
        )
        table = sweep(cfg)
        assert table.min_error.max() < 0.01

    def test_argmin_fl_non_increasing_in_sigma(self):
        cfg = SweepConfig(sigma_grid=np.logspace(-1, 2, 40), n_samples=20_000, seed=2)
        table = sweep(cfg)
        assert np.all(np.diff(table.opt_fl) <= 0)

    def test_formula_tracks_brute_force_argmin(self):
        for signed in (True, False):
            hi = 40.0 if signed else 100.0
            cfg = SweepConfig(
                sigma_grid=np.logspace(np.log10(0.1), np.log10(hi), 25),
                signed=signed,
                seed=4,
            )
            table = sweep(cfg)
            for sigma, opt in zip(table.sigmas, table.opt_fl):
                assert abs(fl_from_std(float(sigma), signed) - int(opt)) <= 1

    def test_formula_error_within_factor_two_of_minimum(self):
        # population-level invariant; needs enough samples to resolve the
        # clipping tail that separates adjacent FLs near crossovers
        for signed in (True, False):
            hi = 40.0 if signed else 100.0
            cfg = SweepConfig(
                sigma_grid=np.logspace(np.log10(0.1), np.log10(hi), 12),
                signed=signed,
                n_samples=400_000,
                seed=6,
            )
            table = sweep(cfg)
            for i, sigma in enumerate(table.sigmas):
                f = fl_from_std(float(sigma), signed)
                j = int(np.flatnonzero(table.fls == f)[0])
                assert table.errors[i, j] <= 2.0 * table.min_error[i]


@pytest.fixture(scope="module")
def wide_tables():
    out = {}
    for signed in (True, False):
        cfg = SweepConfig(
            sigma_grid=np.logspace(-2, 3, 160),
            signed=signed,
            n_samples=20_000,
            seed=8,
        )
        out[signed] = sweep(cfg)
    return out


class TestThresholds:
    def test_consecutive_ratio_near_two(self, wide_tables):
        for signed in (True, False):
            pts = dict(threshold_sigmas(wide_tables[signed]))
            fls = sorted(pts)
            ratios = [pts[fls[i]] / pts[fls[i + 1]] for i in range(len(fls) - 1)]
            for r in ratios:
                assert 1.5 < r < 2.7

    def test_linear_fit_slope_near_minus_one(self, wide_tables):
        for signed in (True, False):
            pts = threshold_sigmas(wide_tables[signed])
            slope, _ = fit_threshold_line(pts)
            assert -1.1 <= slope <= -0.9

    def test_signed_intercept_matches_selector_constant(self, wide_tables):
        pts = threshold_sigmas(wide_tables[True])
        _, intercept = fit_threshold_line(pts)
        grid_step = 5.0 / 159 * np.log2(10.0)  # log2 spacing of the grid
        assert abs(intercept - np.log2(40.0)) <= grid_step

    def test_no_transitions_gives_empty(self):
        cfg = SweepConfig(sigma_grid=np.array([1.0, 1.05, 1.1]), n_samples=1000, seed=1)
        table = sweep(cfg)
        # a grid this narrow has a single argmin everywhere
        assert threshold_sigmas(table) == []


class TestCsv:
    def test_headers_and_termination(self):
        cfg = SweepConfig(sigma_grid=np.array([0.5, 1.0, 2.0]), n_samples=500, seed=0)
        table = sweep(cfg)
        grid = error_grid_csv(table)
        amin = argmin_csv(table)
        thr = thresholds_csv([(3, 4.5), (2, 9.0)])
        assert grid.startswith("sigma,fl,relative_error\n") and grid.endswith("\n")
        assert amin.startswith("sigma,opt_fl,min_error\n") and amin.endswith("\n")
        assert thr.splitlines() == ["fl,sigma_threshold", "3,4.5", "2,9.0"]

    def test_full_precision_roundtrip(self):
        cfg = SweepConfig(sigma_grid=np.array([0.5, 1.0]), n_samples=500, seed=0)
        table = sweep(cfg)
        rows = error_grid_csv(table).splitlines()[1:]
        vals = np.array([float(r.split(",")[2]) for r in rows]).reshape(table.errors.shape)
        assert np.array_equal(vals, table.errors)
