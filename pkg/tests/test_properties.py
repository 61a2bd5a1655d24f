import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.cli import parse_values
from artifact.core import (
    GridSpec,
    dirichlet_energy,
    frac_log2,
    harmonic_profile,
    log_convolve_values,
    m_value,
)
from artifact.mc_sampler import TiltPlan

GRID = GridSpec.from_bounds(-12.0, 12.0, 0.05)
X = GRID.points

coef = st.floats(-2.0, 2.0, allow_nan=False)


def smooth(a, b, c):
    # concave-ish log-weights of moderate slope
    return -0.2 * (X - a) ** 2 + b * np.tanh(X) + c * np.sin(X)


@settings(max_examples=25, deadline=None)
@given(coef, coef, coef, st.floats(0.0, 3.0))
def test_convolution_monotone(a, b, c, bump):
    f = smooth(a, b, c)
    g = f + bump * np.exp(-X ** 2)
    cf, _ = log_convolve_values(f, GRID, 1.0, stride=2)
    cg, _ = log_convolve_values(g, GRID, 1.0, stride=2)
    assert np.all(cg >= cf - 1e-12)


@settings(max_examples=25, deadline=None)
@given(coef, coef, coef, st.floats(-50.0, 50.0))
def test_convolution_commutes_with_constants(a, b, c, shift):
    f = smooth(a, b, c)
    cf, _ = log_convolve_values(f, GRID, 1.0, stride=2)
    cs, _ = log_convolve_values(f + shift, GRID, 1.0, stride=2)
    assert np.max(np.abs(cs - cf - shift)) < 1e-9


@given(st.floats(-20.0, 20.0), st.integers(2, 30))
def test_harmonic_stencil(v, k):
    mu = harmonic_profile(v, k)
    res = 3 * mu[1:-1] - mu[:-2] - 2 * mu[2:]
    assert np.max(np.abs(res)) <= 1e-10 * max(1.0, abs(v))
    assert mu[0] == 0.0 and math.isclose(mu[-1], v, abs_tol=1e-12)


@given(st.floats(-10.0, 10.0), st.integers(1, 25))
def test_energy_is_quadratic(v, k):
    assert math.isclose(dirichlet_energy(v, k), v * v * dirichlet_energy(1.0, k),
                        rel_tol=1e-12, abs_tol=1e-300)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_frac_log2_range(s):
    assert 0.0 <= frac_log2(s) < 1.0


@given(st.integers(1, 10_000))
def test_m_increasing(n):
    assert m_value(n + 1) > m_value(n)


@given(st.integers(1, 8), st.floats(-5.0, 5.0), st.floats(-20.0, 20.0))
def test_tilt_weight_matches_density_ratio(k, v, level_sum):
    # the weight is the Gaussian density ratio: -energy - <h, delta mu>
    plan = TiltPlan(k, v)
    expect = -dirichlet_energy(v, k) - v / (2.0 ** k - 1.0) * level_sum
    assert math.isclose(float(plan.log_weight(level_sum)), expect, rel_tol=1e-12, abs_tol=1e-12)


@given(st.integers(-50, 50), st.integers(0, 40), st.integers(1, 9))
def test_parse_range_count(start, span, step):
    vals = parse_values(f"{start}:{start + span}:{step}")
    assert len(vals) == span // step + 1
    assert vals[0] == start and vals[-1] <= start + span
