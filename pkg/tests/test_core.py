import itertools
import math

import numpy as np
import pytest
from scipy.special import log_ndtr

from artifact.core import (
    C0,
    GridRangeError,
    GridSpec,
    LogGridFunction,
    TreeCoord,
    dirichlet_energy,
    frac_log2,
    harmonic_profile,
    interpolate,
    log_convolve_gaussian,
    log_convolve_values,
    log_ndtr_diff,
    log_trapezoid,
    m_value,
    rho,
)


class TestConstants:
    def test_m_zero(self):
        assert m_value(0) == 0.0

    def test_m_one_is_c0(self):
        assert m_value(1) == pytest.approx(1.177410, abs=1e-6)
        assert C0 == pytest.approx(math.sqrt(2 * math.log(2)))

    def test_m_four(self):
        # 4 c0 - 1.5 ln 4 / c0
        assert m_value(4) == pytest.approx(4 * C0 - 1.5 * math.log(4) / C0, abs=1e-12)
        assert m_value(4) == pytest.approx(2.9435, abs=1e-4)

    def test_m_rejects_negative(self):
        with pytest.raises(ValueError):
            m_value(-1)

    @pytest.mark.parametrize("s, expected", [(8, 0.0), (-3, 0.0), (6, math.log2(6) - 2), (1, 0.0)])
    def test_frac_log2(self, s, expected):
        assert frac_log2(s) == pytest.approx(expected, abs=1e-12)
        assert 0.0 <= frac_log2(s) < 1.0

    def test_rho(self):
        assert rho(5, 0) == 0.0
        assert rho(5, 5) == 1.0
        assert rho(3, 1) == pytest.approx(4 / 7, abs=1e-12)

    def test_harmonic_profile(self):
        assert np.all(harmonic_profile(0.0, 4) == 0.0)
        assert np.allclose(harmonic_profile(1.0, 1), [0.0, 1.0])
        assert harmonic_profile(2.0, 3)[1] == pytest.approx(8 / 7, abs=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 7, 12])
    def test_harmonic_stencil(self, k):
        mu = harmonic_profile(1.7, k)
        res = 3 * mu[1:-1] - mu[:-2] - 2 * mu[2:]
        assert np.max(np.abs(res)) < 1e-10

    def test_dirichlet_energy_values(self):
        assert dirichlet_energy(0.0, 3) == 0.0
        assert dirichlet_energy(1.0, 2) == pytest.approx(2 / 3, abs=1e-14)

    @pytest.mark.parametrize("v, k", [(2.0, 10), (1.3, 1), (-0.7, 5), (3.0, 12)])
    def test_dirichlet_energy_edge_sum(self, v, k):
        # every edge between depths j-1 and j appears 2^j times
        mu = harmonic_profile(v, k)
        edge_sum = sum(2 ** j * (mu[j] - mu[j - 1]) ** 2 for j in range(1, k + 1)) / 2
        assert dirichlet_energy(v, k) == pytest.approx(edge_sum, abs=1e-10)

    def test_tree_coord_validation(self):
        TreeCoord(3, 1)
        with pytest.raises(ValueError):
            TreeCoord(3, 4)
        with pytest.raises(ValueError):
            TreeCoord(-1)


class TestGrid:
    def test_from_bounds_covers(self):
        g = GridSpec.from_bounds(-1.0, 1.0, 0.3)
        assert g.lo == -1.0 and g.hi >= 1.0 - 1e-12
        assert g.count == 8

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridSpec(0.0, 0.0, 10)
        with pytest.raises(ValueError):
            GridSpec(0.0, 1.0, 1)

    def test_log_grid_function_rejects_nan(self):
        g = GridSpec(0.0, 1.0, 3)
        with pytest.raises(ValueError):
            LogGridFunction(g, np.array([0.0, np.nan, 0.0]))
        with pytest.raises(ValueError):
            LogGridFunction(g, np.array([0.0, np.inf, 0.0]))

    def test_values_are_read_only(self):
        f = LogGridFunction(GridSpec(0.0, 1.0, 3), np.zeros(3))
        with pytest.raises(ValueError):
            f.log_values[0] = 1.0

    def test_log_trapezoid(self):
        g = GridSpec.from_bounds(-12, 12, 0.01)
        lv = -0.5 * g.points ** 2
        assert log_trapezoid(lv, g.step) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-10)

    def test_interpolate_exact_on_nodes_and_linear_data(self):
        g = GridSpec.from_bounds(0, 10, 0.5)
        vals = 2.0 * g.points - 3.0
        x = np.array([0.25, 3.3, 9.9])
        for order in (1, 3):
            assert np.allclose(interpolate(vals, g, x, order=order), 2 * x - 3, atol=1e-12)

    def test_interpolate_out_of_range(self):
        g = GridSpec.from_bounds(0, 1, 0.1)
        vals = np.zeros(g.count)
        with pytest.raises(GridRangeError):
            interpolate(vals, g, np.array([2.0]), right="raise")
        assert interpolate(vals, g, -1.0, left="neginf") == -np.inf

    def test_interpolate_capped(self):
        g = GridSpec.from_bounds(0, 1, 0.1)
        vals = -1.0 + g.points  # slope 1, reaches 0 at the right edge
        out = interpolate(vals, g, np.array([1.5, 3.0]), right="capped")
        assert np.all(out == 0.0)

    def test_log_ndtr_diff(self):
        a, b = np.array([-1.0, 5.0, -40.0]), np.array([2.0, 7.0, -39.0])
        from scipy.stats import norm
        ref = np.log(norm.cdf(b[:2]) - norm.cdf(a[:2]))
        assert np.allclose(log_ndtr_diff(a, b)[:2], ref, atol=1e-12)
        # deep lower tail stays finite
        assert np.isfinite(log_ndtr_diff(a, b)[2])


class TestConvolution:
    grid = GridSpec.from_bounds(-20.0, 20.0, 0.01)

    def test_zero_stays_zero(self):
        f = LogGridFunction(self.grid, np.zeros(self.grid.count))
        g = log_convolve_gaussian(f, 1.0, extend=("edge", "edge"))
        # unflagged outputs are exact; flagged ones carry the trapezoid
        # endpoint term, O(step^2)
        assert np.max(np.abs(g.log_values[~g.flags])) < 1e-10
        assert np.max(np.abs(g.log_values)) < 1e-5

    def test_quadratic_closed_form(self):
        x = self.grid.points
        f = LogGridFunction(self.grid, -0.5 * x ** 2)
        g = log_convolve_gaussian(f, 1.0)
        inner = np.abs(x) < 10
        ref = -x ** 2 / 4 - 0.5 * math.log(2)
        assert np.max(np.abs(g.log_values[inner] - ref[inner])) < 1e-10

    def test_indicator_gives_log_cdf(self):
        x = self.grid.points
        f = LogGridFunction(self.grid, np.where(x <= 0, 0.0, -np.inf))
        g = log_convolve_gaussian(f, 1.0, extend=("edge", "neginf"))
        inner = np.abs(x) < 8
        # the trapezoid rule on a jump is first order in the step
        assert np.max(np.abs(np.exp(g.log_values[inner]) - np.exp(log_ndtr(-x[inner])))) < 0.01

    def test_linear_extension(self):
        # f(v) = -2 v; E exp f(v - Z) = exp(-2 v + 2). Most of the mass of
        # the short grid's outputs lies in the analytic extension.
        g = GridSpec.from_bounds(-3.0, 3.0, 0.01)
        x = g.points
        out, flags = log_convolve_values(-2 * x, g, 1.0, extend=("linear", "linear"))
        assert flags.all()
        assert np.max(np.abs(out - (-2 * x + 2))) < 1e-5

    def test_flags_mark_edge_error(self):
        x = self.grid.points
        out, flags = log_convolve_values(-2 * x, self.grid, 1.0, stride=20,
                                         extend=("linear", "linear"))
        err = np.abs(out - (-2 * x + 2))
        assert np.max(err[~flags]) < 1e-12
        # the window is centred on the saddle point x - 2, not on x
        assert not flags[np.abs(x - 2.0) < 12.0 - 0.5].any()
        assert flags[np.abs(x - 2.0) > 12.0 + 0.5].all()

    def test_variance_scaling(self):
        x = self.grid.points
        out, _ = log_convolve_values(-0.5 * x ** 2, self.grid, 2.0)
        inner = np.abs(x) < 8
        ref = -x ** 2 / 6 - 0.5 * math.log(3)
        assert np.max(np.abs(out[inner] - ref[inner])) < 1e-9

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            log_convolve_values(np.zeros(self.grid.count), self.grid, 0.0)
        with pytest.raises(ValueError):
            log_convolve_values(np.full(self.grid.count, np.nan), self.grid, 1.0)

    def test_stride_agrees(self):
        x = self.grid.points
        f = -0.3 * x ** 2 + log_ndtr(x)
        a, _ = log_convolve_values(f, self.grid, 1.0, stride=1)
        b, _ = log_convolve_values(f, self.grid, 1.0, stride=20)
        inner = np.abs(x) < 10
        assert np.max(np.abs(a[inner] - b[inner])) < 1e-10
