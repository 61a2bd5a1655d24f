import math

import numpy as np
import pytest
from scipy.stats import norm

from artifact.brw_tails import TailFamily
from artifact.chain_engine import ChainSpec, forward_backward
from artifact.core import C0, m_value
from artifact.mc_sampler import (
    depth_slice,
    estimate_conditional,
    leftmost,
    node_statistic,
    pair_at_meet,
    sample_trees,
)
from artifact.spine import (
    build_spine,
    conditional_mean_profile,
    derivative_identity_check,
    energy_envelope,
    hat_h_tails,
    pair_covariance_tree,
    profile_csv,
    recentered_spine,
    repulsion_profile,
    spine_marginals,
)


class TestSpine:
    def test_single_site_truncated_gaussian(self):
        u = 0.4
        a = u - m_value(1)
        spec = build_spine(1, 1, u, TailFamily(1, 8.0))
        fb = forward_backward(spec)
        # a hard wall between lattice nodes: first order in the chain step
        assert fb.mean[1] == pytest.approx(norm.pdf(a) / norm.sf(a), abs=0.25 * spec.grid.step)

    def test_certain_event_is_free_walk(self):
        n, l = 6, 3
        spec = build_spine(n, l, -12.0, TailFamily(n, 8.0, u_min=-14.0))
        fb = forward_backward(spec)
        free = forward_backward(ChainSpec.free(spec.grid, l))
        for k in range(1, l + 1):
            tv = 0.5 * np.sum(np.abs(np.exp(fb.log_density[k - 1]) - np.exp(free.log_density[k - 1])))
            assert tv * spec.grid.step < 1e-4

    def test_site_means_against_monte_carlo(self):
        n, l, u = 10, 5, 2.0
        _, fb = spine_marginals(n, l, u)
        for k in (1, 3, 5):
            est = estimate_conditional(n, u, node_statistic(leftmost(k)), "naive", 100_000, seed=40 + k)
            assert abs(est.estimate - fb.mean[k]) < 3 * est.se

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            build_spine(4, 5, 0.0)


class TestProfiles:
    def test_root_mean_zero(self):
        assert conditional_mean_profile(20, 4.0)[0] == 0.0

    def test_mean_at_l_u(self):
        u = 16.0
        prof = conditional_mean_profile(100, u)
        assert abs(prof[4] - (u - C0 * math.log2(u))) <= 5

    def test_repulsion_profile(self):
        assert repulsion_profile(64, 0) == 0.0
        assert repulsion_profile(64, 6) == pytest.approx(m_value(58))

    def test_csv(self):
        _, fb = spine_marginals(10, 3, 2.0)
        assert profile_csv(10, 2.0, fb).splitlines()[0] == "n,u,k,mean,var"

    def test_hat_h_at_zero(self):
        up, lo = hat_h_tails(32, 5, 0.0)
        assert -math.inf < up < 0 and -math.inf < lo < 0

    def test_derivative_identity(self):
        assert derivative_identity_check(100, 16.0) < 0.05


class TestCovariance:
    def test_endpoints(self):
        n = 64
        _, fb = spine_marginals(n, n, m_value(n))
        assert pair_covariance_tree(n, n) == fb.var[n]
        assert abs(fb.var[n] - (n - 6)) < 6
        assert pair_covariance_tree(n, 0) == 0.0

    @pytest.mark.slow
    def test_small_tree_rejection(self):
        n, u = 3, m_value(3)
        i, j = pair_at_meet(n, 1)
        T = -m_value(n) + u
        xs, ys = [], []
        for b in range(8):
            vals, _ = sample_trees(n, 500_000, seed=100 + b)
            keep = vals[:, depth_slice(n)].min(axis=1) >= T
            xs.append(vals[keep, i])
            ys.append(vals[keep, j])
        x, y = np.concatenate(xs), np.concatenate(ys)
        c = (x - x.mean()) * (y - y.mean())
        se = c.std() / math.sqrt(len(c))
        assert abs(c.mean() - pair_covariance_tree(n, 1, TailFamily(n, 8.0), u)) < 3 * se


class TestRecentered:
    def test_marginals_shift(self):
        n, l, u = 100, 3, 64.0
        rs = recentered_spine(n, l, u)
        assert rs.within_range
        fy = forward_backward(rs.spec)
        _, fh = spine_marginals(n, l, u)
        assert fy.mean[0] == 0.0 and fy.var[0] == 0.0
        for k in range(1, l + 1):
            assert fy.mean[k] + rs.mu[k] == pytest.approx(fh.mean[k], abs=1e-6)
            assert fy.var[k] == pytest.approx(fh.var[k], abs=1e-6)

    def test_guard(self):
        with pytest.raises(ValueError):
            recentered_spine(100, 5, 64.0)
        assert not recentered_spine(100, 5, 64.0, strict=False).within_range

    def test_energy_envelope(self):
        rs = recentered_spine(100, 3, 64.0)
        for k in (1, 2):
            env = energy_envelope(rs, k, s_max=10.0)
            assert env.ok and env.c > 0
