"""Conditional law of the field along one root-to-depth-l branch.

Given ``h`` on the branch ``x_0 .. x_l`` and the event that every leaf at
depth ``n`` is at least ``-m_n + u``, the branch is a Gaussian-step chain
whose site ``k`` carries the log-probability that the subtree hanging off
``x_k`` clears the threshold:

    lam_k(w) = c_k * F_{n-k}(u - m_n - w),   c_k = 1 at k = l, 1/2 otherwise.

The root's off-branch half tree contributes the constant
``F_n(u - m_n) / 2``; with it, the chain's normalizing constant is
``log p_n(u)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .brw_tails import TailFamily, cached_family, u_prime
from .chain_engine import (
    ChainMarginals,
    ChainSpec,
    forward_backward,
    step_kernel,
)
from .core import C0, GridSpec, interpolate, log2_floor, m_value

CHAIN_STEP = 0.02


def tail_reach(u: float, l: int) -> float:
    """Largest centred threshold a spine of length ``l`` at ``u`` reads from the tails."""
    return math.ceil((max(u, 0.0) + 10.0 + 4.0 * math.sqrt(l)) / 8.0) * 8.0


def default_tails(n: int, u: float, l: int) -> TailFamily:
    return cached_family(n, max(64.0, tail_reach(u, l)))


def spine_grid(u: float, l: int, step: float = CHAIN_STEP) -> GridSpec:
    return GridSpec.from_bounds(-(10.0 + 4.0 * math.sqrt(l)), max(u, 0.0) + 10.0 + 8.0 * math.sqrt(l), step)


@dataclass(frozen=True)
class SpineSetup:
    n: int
    l: int
    u: float
    tails: TailFamily = field(repr=False, compare=False)

    @property
    def l_u(self) -> int:
        return log2_floor(self.u) if self.u >= 1 else 0

    @property
    def u_prime(self) -> float:
        return u_prime(self.u)

    @property
    def mu(self) -> np.ndarray:
        k = np.arange(self.l + 1)
        return self.u_prime * (1.0 - 2.0 ** -k)

    def weight(self, k: int) -> float:
        return 1.0 if k == self.l else 0.5

    def potential(self, k: int, w) -> np.ndarray:
        """Site-``k`` log-weight as a function of the branch value ``w``."""
        shift = self.u - m_value(self.n)
        return self.weight(k) * self.tails.F_at(self.n - k, shift - np.asarray(w, dtype=float))

    @property
    def root_constant(self) -> float:
        return 0.5 * float(self.tails.F_at(self.n, self.u - m_value(self.n)))


def _setup(n: int, l: int, u: float, tails: TailFamily | None) -> SpineSetup:
    if not 1 <= l <= n:
        raise ValueError(f"need 1 <= l <= n, got l={l}, n={n}")
    tails = tails or default_tails(n, u, l)
    if tails.n < n:
        raise ValueError(f"tail curves only reach depth {tails.n}, need {n}")
    return SpineSetup(n, l, float(u), tails)


def build_spine(n: int, l: int, u: float, tails: TailFamily | None = None, *,
                grid: GridSpec | None = None, start: float = 0.0) -> ChainSpec:
    """Chain whose marginals are the branch law under the leaf threshold event."""
    s = _setup(n, l, u, tails)
    grid = grid or spine_grid(u, l)
    x = grid.points
    pots = np.array([s.potential(k, x) for k in range(1, l + 1)])
    return ChainSpec(grid, pots, start=start, log_offset=s.root_constant)


@lru_cache(maxsize=32)
def _cached_marginals(n: int, l: int, u: float, step: float) -> tuple[ChainSpec, ChainMarginals]:
    spec = build_spine(n, l, u, grid=spine_grid(u, l, step))
    return spec, forward_backward(spec)


def spine_marginals(n: int, l: int, u: float, tails: TailFamily | None = None,
                    step: float = CHAIN_STEP) -> tuple[ChainSpec, ChainMarginals]:
    if tails is None:
        return _cached_marginals(n, l, float(u), step)
    spec = build_spine(n, l, u, tails, grid=spine_grid(u, l, step))
    return spec, forward_backward(spec)


def conditional_mean_profile(n: int, u: float, l: int | None = None,
                             tails: TailFamily | None = None) -> np.ndarray:
    """``E[h([x]_k) | leaf threshold event]`` for ``k = 0..l`` (default ``l = floor(log2 u)``)."""
    if l is None:
        l = max(log2_floor(u), 1) if u >= 1 else 1
    _, fb = spine_marginals(n, l, u, tails)
    return fb.mean.copy()


def repulsion_profile(n: int, k) -> np.ndarray:
    """Deterministic lift ``m_{n'} (1 - 2^{-k} 1{k < l_n})``, ``n' = n - floor(log2 n)``."""
    ln = log2_floor(n)
    k = np.asarray(k)
    return m_value(n - ln) * (1.0 - np.where(k < ln, 2.0 ** -k.astype(float), 0.0))


def hat_h_tails(n: int, x_depth: int, u_dev, tails: TailFamily | None = None):
    """``(log P(hat h(x) > u_dev), log P(hat h(x) < -u_dev))`` under the hard wall.

    The marginal at depth ``x_depth`` is read from one spine of that length.
    """
    u = m_value(n)
    _, fb = spine_marginals(n, x_depth, u, tails)
    mu = float(repulsion_profile(n, x_depth))
    ud = np.atleast_1d(np.asarray(u_dev, dtype=float))
    up = np.array([fb.log_tail(x_depth, mu + t, "upper") for t in ud])
    lo = np.array([fb.log_tail(x_depth, mu - t, "lower") for t in ud])
    if np.ndim(u_dev) == 0:
        return float(up[0]), float(lo[0])
    return up, lo


def leaf_mean_given(tails: TailFamily, n: int, u: float, depth: int, v) -> np.ndarray:
    """``E[h(x) | h([x]_depth) = v, threshold event]`` for a leaf ``x``.

    A depth-``j`` subtree with root value ``v`` has leaf mean
    ``v - (1 - 2^{-j}) F_j'(u - m_n - v)``; the derivative of the log-tail
    is the tilt response of the conditioned subtree.
    """
    j = n - depth
    v = np.asarray(v, dtype=float)
    if j == 0:
        return v.copy()
    return v - (1.0 - 2.0 ** -j) * tails.dF_at(j, u - m_value(n) - v)


def pair_covariance_tree(n: int, depth_meet: int, tails: TailFamily | None = None,
                         u: float | None = None) -> float:
    """``Cov(h(x), h(y))`` for leaves meeting at depth ``depth_meet``, under the threshold event.

    Given ``h`` at the meeting node the two leaves sit in independent
    subtrees, so the covariance is the variance, over the branch marginal at
    ``depth_meet``, of the conditional leaf mean.
    """
    if not 0 <= depth_meet <= n:
        raise ValueError("need 0 <= depth_meet <= n")
    u = m_value(n) if u is None else u
    if depth_meet == 0:
        return 0.0
    _, fb = spine_marginals(n, n, u, tails)
    if depth_meet == n:
        return float(fb.var[n])
    tails = tails or default_tails(n, u, n)
    x = fb.grid.points
    p = np.exp(fb.log_density[depth_meet - 1])
    w = np.full(len(x), fb.grid.step)
    w[0] = w[-1] = 0.5 * fb.grid.step
    pw = p * w
    live = pw > 1e-300
    g = np.zeros_like(x)
    g[live] = leaf_mean_given(tails, n, u, depth_meet, x[live])
    mass = pw.sum()
    mean = (pw * g).sum() / mass
    return float((pw * (g - mean) ** 2).sum() / mass)


def derivative_identity_check(n: int, u: float, tails: TailFamily | None = None) -> float:
    """``|-d/du log p_n(u) - E[h([x]_{l_u})] / (1 - 2^{-l_u})|``."""
    lu = log2_floor(u)
    if lu < 1:
        raise ValueError("need u >= 2 so that floor(log2 u) >= 1")
    tails = tails or default_tails(n, u, lu)
    mean = conditional_mean_profile(n, u, lu, tails)[lu]
    return abs(-tails.dlog_p(n, u) - mean / (1.0 - 2.0 ** -lu))


# ---------------------------------------------------------------------------
# recentred coordinates


@dataclass(frozen=True)
class RecenteredSpine:
    setup: SpineSetup
    spec: ChainSpec                 # chain in Y = h - mu coordinates
    mu: np.ndarray                  # mu_k = u' (1 - 2^{-k}), k = 0..l
    energies: np.ndarray            # f_k(s) on spec.grid, k = 1..l (rows)
    within_range: bool

    def drift_coefficient(self, k: int) -> float:
        """Coefficient of the linear term ``2^{-k-1} u'`` (``2^{-l} u'`` at the last site)."""
        up = self.setup.u_prime
        return up * (2.0 ** -self.setup.l if k == self.setup.l else 2.0 ** (-k - 1))


def recenter(setup: SpineSetup, *, C0_gap: int = 3, strict: bool = True,
             grid: GridSpec | None = None, step: float = CHAIN_STEP) -> RecenteredSpine:
    """Rewrite the branch chain for ``Y_k = h([x]_k) - u'(1 - 2^{-k})``.

    The drift of ``Y`` is moved into the potentials by summation by parts,
    so the result is again a zero-mean Gaussian-step chain. With
    ``strict=True`` the branch length must satisfy
    ``l <= floor(log2 u) - C0_gap``.
    """
    lu = setup.l_u
    ok = setup.l <= lu - C0_gap
    if strict and not ok:
        raise ValueError(
            f"branch length l={setup.l} exceeds floor(log2 u) - C0 = {lu - C0_gap}; "
            "the recentred potentials only localize for l <= floor(log2 u) - C0")
    l = setup.l
    up = setup.u_prime
    mu = setup.mu
    half = 12.0 + 6.0 * math.sqrt(l)
    grid = grid or GridSpec.from_bounds(-half, half, step)
    y = grid.points
    pots = np.empty((l, grid.count))
    energies = np.empty((l, grid.count))
    for k in range(1, l + 1):
        coef = up * (2.0 ** -l if k == l else 2.0 ** (-k - 1))
        lam = setup.potential(k, y + mu[k])
        pots[k - 1] = lam - coef * y
        with np.errstate(invalid="ignore"):
            energies[k - 1] = np.where(np.isneginf(lam), np.inf, -lam + coef * y)
    dmu = np.diff(mu)
    offset = setup.root_constant - 0.5 * float(np.sum(dmu * dmu))
    spec = ChainSpec(grid, pots, start=0.0, log_offset=offset)
    return RecenteredSpine(setup, spec, mu, energies, ok)


def recentered_spine(n: int, l: int, u: float, tails: TailFamily | None = None, **kw) -> RecenteredSpine:
    return recenter(_setup(n, l, u, tails), **kw)


@dataclass(frozen=True)
class EnergyEnvelope:
    k: int
    c: float
    C: float
    ok: bool


def energy_envelope(rs: RecenteredSpine, k: int, *, s_max: float | None = None) -> EnergyEnvelope:
    """Fit ``c E(s) - C <= sgn(s) f_k'(s) <= C E(s) + C`` with ``E(s) = |s| - (s - b_k)^+``.

    ``b_k = 2^{-k-1} u'`` (the linear coefficient of ``f_k``).
    """
    grid = rs.spec.grid
    s = grid.points
    f = rs.energies[k - 1]
    d = np.full_like(f, np.nan)
    d[1:-1] = (f[2:] - f[:-2]) / (2 * grid.step)
    keep = np.isfinite(d)
    if s_max is not None:
        keep &= np.abs(s) <= s_max
    b = rs.setup.u_prime * 2.0 ** (-k - 1)
    E = np.abs(s) - np.maximum(s - b, 0.0)
    y = np.sign(s) * d
    s, E, y = s[keep], E[keep], y[keep]
    big = E >= 1.0
    c = 0.5 * float(np.median(y[big] / E[big])) if big.any() else float("nan")
    if not c > 0:
        return EnergyEnvelope(k, c, float("inf"), False)
    C = float(max(np.max(c * E - y), np.max(y / (E + 1.0)), 0.0))
    return EnergyEnvelope(k, c, C, bool(np.isfinite(C)))


def recentered_kernels(rs: RecenteredSpine, k: int, v_grid, fb: ChainMarginals | None = None):
    fb = fb or forward_backward(rs.spec)
    return [step_kernel(rs.spec, k, float(v), fb) for v in v_grid]


# ---------------------------------------------------------------------------
# output


def profile_csv(n: int, u: float, fb: ChainMarginals) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["n", "u", "k", "mean", "var"])
    for k in range(fb.l + 1):
        wr.writerow([n, repr(float(u)), k, repr(float(fb.mean[k])), repr(float(fb.var[k]))])
    return buf.getvalue()
