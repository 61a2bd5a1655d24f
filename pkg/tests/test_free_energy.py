import math

import numpy as np
import pytest

from artifact.brw_tails import p_infinity
from artifact.core import GridSpec, LogGridFunction
from artifact.free_energy import (
    ConvergenceError,
    PotentialSpec,
    brw_theta_potential,
    fe_step,
    free_energy_csv,
    g_star_limit,
    initial,
    quadratic_potential,
)

GRID = GridSpec.from_bounds(-20.0, 20.0, 0.01)


class TestStep:
    def test_base_is_potential(self):
        pot = quadratic_potential(GRID)
        assert np.array_equal(initial(pot).G, pot.g.log_values)

    def test_quadratic_first_step(self):
        c1 = fe_step(initial(quadratic_potential(GRID)))
        x = GRID.points
        inner = np.abs(x) < 10
        ref = -x ** 2 / 3 - 0.5 * math.log(3)
        assert np.max(np.abs(c1.G[inner] - ref[inner])) < 1e-9
        assert c1.G_star == pytest.approx(-0.5 * math.log(3), abs=1e-9)
        assert c1.u_star == pytest.approx(0.0, abs=1e-9)

    def test_constant_potential(self):
        pot = PotentialSpec(LogGridFunction(GRID, np.full(GRID.count, 0.7)))
        c = initial(pot)
        inner = np.abs(GRID.points) < 10
        for _ in range(4):
            c = fe_step(c)
            # near the grid ends the convolution windows are cut short
            assert np.max(np.abs(c.G[inner] - 0.7)) < 1e-9

    def test_witnesses(self):
        w = quadratic_potential(GRID).witnesses()
        assert w["bounded_above"] and w["continuous"] and w["decays"]


class TestLimit:
    def test_quadratic_converges(self):
        res = g_star_limit(quadratic_potential(GRID), tol=1e-3, k_max=14)
        assert res.converged and res.k_reached <= 14
        gaps = np.abs(np.diff(res.history))
        assert np.all(np.diff(gaps) < 0)

    def test_constant_limit_at_first_step(self):
        pot = PotentialSpec(LogGridFunction(GRID, np.full(GRID.count, -1.25)))
        res = g_star_limit(pot)
        assert res.k_reached == 1 and res.G_star == pytest.approx(-1.25, abs=1e-9)

    def test_translation_invariance(self):
        a = g_star_limit(quadratic_potential(GRID), k_max=8)
        b = g_star_limit(quadratic_potential(GRID, shift=3.0), k_max=8)
        assert b.G_star == pytest.approx(a.G_star, abs=1e-6)

    def test_raise_on_failure(self):
        with pytest.raises(ConvergenceError):
            g_star_limit(quadratic_potential(GRID), tol=1e-12, k_max=2, raise_on_failure=True)

    def test_csv(self):
        text = free_energy_csv(np.array([-1.0, -0.5]), [0.0, 0.1])
        assert text.splitlines()[0] == "k,u_star,G_star,gap"


@pytest.fixture(scope="module")
def pot():
    return brw_theta_potential(0.0, p_infinity(-30.0, 40.0, 60))


class TestThetaPotential:
    def test_slopes(self, pot):
        s = pot.grid.points
        g = pot.g.log_values
        # right: log p_inf(-s) -> 0, so slope -1
        right = (s > 20) & (s < 28)
        slope = np.polyfit(s[right], g[right], 1)[0]
        assert slope == pytest.approx(-1.0, abs=1e-6)
        # left: log p_inf(-s) falls off quadratically
        left = s < -10
        d2 = np.diff(g[left], 2) / pot.grid.step ** 2
        assert np.all(d2 < -0.3)

    def test_finite_limit(self, pot):
        res = g_star_limit(pot, tol=1e-3, k_max=14)
        assert math.isfinite(res.G_star) and abs(res.G_star) < 10

    def test_delta_range(self):
        with pytest.raises(ValueError):
            brw_theta_potential(1.0, p_infinity(-5.0, 5.0, 4))
