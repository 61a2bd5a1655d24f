import math

import numpy as np
import pytest
from scipy.stats import norm

from artifact.brw_tails import TailFamily
from artifact.core import m_value
from artifact.oracles import tail_quadrature
from artifact.mc_sampler import (
    TiltPlan,
    default_plan,
    depth_slice,
    estimate_conditional,
    estimate_p,
    estimates_csv,
    leftmost,
    node_statistic,
    pair_at_meet,
    product_statistic,
    sample_tilted,
    sample_tree,
    sample_trees,
)


@pytest.fixture(scope="module")
def trees():
    vals, lw = sample_trees(4, 100_000, seed=8)
    return vals


class TestTrees:
    def test_variance_by_depth(self, trees):
        for d in (1, 2, 4):
            x = trees[:, leftmost(d)]
            se = d * math.sqrt(2 / len(x))
            assert abs(x.var() - d) < 3 * se

    @pytest.mark.parametrize("meet", [0, 1, 2, 3])
    def test_covariance_is_meet_depth(self, trees, meet):
        i, j = pair_at_meet(4, meet)
        prod = trees[:, i] * trees[:, j]
        se = prod.std() / math.sqrt(len(prod))
        assert abs(prod.mean() - meet) < 3 * se

    def test_root_pinned(self, trees):
        assert np.all(trees[:, 0] == 0)

    def test_reproducible(self):
        a, b = sample_tree(5, 3), sample_tree(5, 3)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, sample_tree(5, 4).values)
        assert len(a.leaves) == 32


class TestTilt:
    def test_plan_profile(self):
        plan = TiltPlan(3, 2.0)
        assert plan.shift(0) == 0 and plan.shift(3) == 2.0 and plan.shift(5) == 2.0
        assert plan.shift(1) == pytest.approx(8 / 7)
        with pytest.raises(ValueError):
            TiltPlan(0, 1.0)

    def test_weights_average_one(self):
        _, lw = sample_trees(5, 100_000, seed=21, plan=TiltPlan(3, 1.5))
        w = np.exp(lw)
        assert abs(w.mean() - 1) < 3 * w.std() / math.sqrt(len(w))

    def test_depth_one_tail(self):
        vals, lw = sample_trees(1, 100_000, seed=4, plan=TiltPlan(1, 1.0))
        f = np.exp(lw) * (vals[:, 1] > 1.0)
        assert abs(f.mean() - norm.sf(1.0)) < 3 * f.std() / math.sqrt(len(f))

    def test_zero_tilt_weight(self):
        _, lw = sample_trees(4, 1000, seed=1, plan=TiltPlan(2, 0.0))
        assert np.all(lw == 0.0)
        assert sample_tilted(3, TiltPlan(0, 0.0), 5).log_weight == 0.0

    def test_default_plan(self):
        assert default_plan(0.5).k == 0
        plan = default_plan(6.0)
        assert plan.k == 2 and plan.v == pytest.approx(6 - 2 * 1.1774100225154747 + 1)


class TestEstimateP:
    @pytest.mark.parametrize("n, u", [(1, 0.0), (2, 1.0), (3, 0.5), (4, -0.5)])
    def test_unbiased_small_trees(self, n, u):
        exact = math.exp(float(TailFamily(n, 4.0).p(n, u)))
        for method in ("naive", "tilted"):
            est = estimate_p(n, u, method, 100_000, seed=n)
            # with every level in closed form se is 0; the tables and the
            # tail grid then agree only to O(step^2)
            assert abs(est.estimate - exact) < 3 * est.se + 1e-6 * exact

    def test_certain_event(self):
        est = estimate_p(6, -30.0, "naive", 5000, seed=0)
        assert est.estimate == 1.0 and est.se == 0.0

    def test_zero_acceptance_bound(self):
        est = estimate_p(8, 30.0, "naive", 3000, seed=0)
        assert est.accepted == 0 and est.upper_bound == pytest.approx(1e-3)

    def test_deterministic(self):
        a = estimate_p(8, 3.0, "tilted", 5000, seed=12)
        b = estimate_p(8, 3.0, "tilted", 5000, seed=12)
        assert a == b
        assert "log_estimate" in estimates_csv([a]).splitlines()[0]

    def test_rejects_bad_method(self):
        with pytest.raises(ValueError):
            estimate_p(3, 0.0, "bogus", 10)


    def test_three_closed_levels_match_oracle(self):
        from artifact.mc_sampler import _G2_LO, _G2_STEP, _great_grandchildren_table
        table = _great_grandchildren_table()
        for a in (-2.0, 0.0, 1.5, 4.0):
            i = int(round((a - _G2_LO) / _G2_STEP))
            assert table[i] == pytest.approx(tail_quadrature(3, -a), abs=1e-9)

    @pytest.mark.parametrize("levels", [0, 2, 3])
    def test_closed_levels_agree(self, levels):
        n, u = 6, 2.0
        exact = math.exp(float(TailFamily(n, 8.0).p(n, u)))
        est = estimate_p(n, u, "tilted", 50_000, seed=11, closed_levels=levels)
        assert abs(est.estimate - exact) < 4 * est.se

    def test_naive_draw_matches_indicator(self):
        n, u = 5, 1.0
        a = estimate_p(n, u, "naive", 100_000, seed=21)
        b = estimate_p(n, u, "naive", 100_000, seed=22, closed_levels=0)
        assert abs(a.estimate - b.estimate) < 3 * math.hypot(a.se, b.se)


class TestHarmonicWeight:
    def test_tree_weight_matches_level_sum(self):
        plan = TiltPlan(3, 2.5)
        explicit = TiltPlan.from_levels([plan.shift(d) for d in (1, 2, 3)])
        vals, lw = sample_trees(5, 200, seed=3)
        assert np.allclose(plan.log_weight(vals[:, depth_slice(3)].sum(axis=1)),
                           plan.log_weight_tree(vals))
        assert np.allclose(explicit.log_weight_tree(vals), plan.log_weight_tree(vals))


class TestConditional:
    def test_root_is_zero(self):
        est = estimate_conditional(5, 1.0, node_statistic(0), trials=5000, seed=2)
        assert est.estimate == 0.0

    def test_pair_product_against_rejection(self):
        # h(x) h(y) with |x ^ y| = 1 at n = 3, u = m(3), two estimators
        n, u = 3, m_value(3)
        i, j = pair_at_meet(n, 1)
        stat = product_statistic(i, j)
        tilted = estimate_conditional(n, u, stat, "tilted", 200_000, seed=6)
        vals, _ = sample_trees(n, 400_000, seed=7)
        keep = vals[:, depth_slice(n)].min(axis=1) >= -m_value(n) + u
        ref = stat(vals[keep])
        se = math.hypot(tilted.se, ref.std() / math.sqrt(len(ref)))
        assert abs(tilted.estimate - ref.mean()) < 3 * se
