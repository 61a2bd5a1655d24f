"""Gaussian-step chains under site potentials.

A chain ``X_0 = start, X_k = X_{k-1} + N(0, variance)`` for ``k = 1..l`` is
reweighted by ``exp(sum_k lam_k(X_k))``. All quantities are exact up to the
grid discretization: forward/backward messages, marginals, covariances,
one-step conditional kernels, path samples, total-variation curves and
coupling experiments.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import (
    LOG_SQRT_2PI,
    GridSpec,
    LogGridFunction,
    _saddle_indices,
    log_convolve_values,
    log_moment_weights,
    log_trapezoid,
    moments,
)

CHAIN_EXTEND = ("neginf", "neginf")


class InfeasibleChain(ValueError):
    """The potentials leave no mass (some message is identically -inf)."""


@dataclass(frozen=True)
class SitePotential:
    k: int
    lam: LogGridFunction


@dataclass(frozen=True)
class ChainSpec:
    """Chain on a fixed grid. ``potentials[k-1]`` is the log-weight at site ``k``."""

    grid: GridSpec
    potentials: np.ndarray
    start: float = 0.0
    variance: float = 1.0
    log_offset: float = 0.0
    width: float = 8.0
    stride: int = 1

    def __post_init__(self):
        pot = np.array(self.potentials, dtype=float)
        if pot.ndim != 2 or pot.shape[1] != self.grid.count or pot.shape[0] < 1:
            raise ValueError("potentials must have shape (l, grid.count) with l >= 1")
        if np.isnan(pot).any() or np.isposinf(pot).any():
            raise ValueError("potentials may not contain NaN or +inf")
        if not np.isfinite(pot).any(axis=1).all():
            raise InfeasibleChain("a site potential is identically -inf")
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        pot.setflags(write=False)
        object.__setattr__(self, "potentials", pot)

    @classmethod
    def free(cls, grid: GridSpec, l: int, **kw) -> "ChainSpec":
        return cls(grid, np.zeros((l, grid.count)), **kw)

    @classmethod
    def from_functions(cls, grid: GridSpec, fns, **kw) -> "ChainSpec":
        x = grid.points
        return cls(grid, np.array([np.broadcast_to(fn(x), x.shape) for fn in fns]), **kw)

    @property
    def l(self) -> int:
        return self.potentials.shape[0]

    def lam(self, k: int) -> np.ndarray:
        return self.potentials[k - 1]

    @property
    def site_potentials(self) -> list[SitePotential]:
        return [SitePotential(k, LogGridFunction(self.grid, self.lam(k))) for k in range(1, self.l + 1)]

    def conv(self, values: np.ndarray) -> np.ndarray:
        out, _ = log_convolve_values(values, self.grid, self.variance, width=self.width,
                                     stride=self.stride, extend=CHAIN_EXTEND)
        return out

    def log_step(self, v: float) -> np.ndarray:
        d = self.grid.points - v
        return -0.5 * d * d / self.variance - LOG_SQRT_2PI - 0.5 * math.log(self.variance)


@dataclass(frozen=True)
class ChainMarginals:
    grid: GridSpec
    log_density: np.ndarray   # (l, count), sites 1..l, each normalized
    mean: np.ndarray          # sites 0..l
    var: np.ndarray           # sites 0..l
    log_Z: float
    alpha: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)

    @property
    def l(self) -> int:
        return self.log_density.shape[0]

    def density(self, k: int) -> LogGridFunction:
        if not 1 <= k <= self.l:
            raise ValueError("site out of range (site 0 is a point mass)")
        return LogGridFunction(self.grid, self.log_density[k - 1])

    def log_tail(self, k: int, t: float, side: str = "upper") -> float:
        return log_tail_mass(self.log_density[k - 1], self.grid, t, side)


@dataclass(frozen=True)
class StepKernel:
    k: int
    v: float
    log_density: LogGridFunction


def _finite_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.where(np.isneginf(a), -np.inf, a - b)


def forward_backward(spec: ChainSpec) -> ChainMarginals:
    """Exact (grid) marginals and normalizing constant of the tilted chain."""
    l, n = spec.l, spec.grid.count
    alpha = np.empty((l, n))
    beta = np.zeros((l, n))
    alpha[0] = spec.log_step(spec.start) + spec.lam(1)
    for k in range(2, l + 1):
        alpha[k - 1] = spec.conv(alpha[k - 2]) + spec.lam(k)
        if not np.isfinite(alpha[k - 1]).any():
            raise InfeasibleChain(f"forward message vanishes at site {k}")
    if not np.isfinite(alpha[0]).any():
        raise InfeasibleChain("forward message vanishes at site 1")
    for k in range(l - 1, 0, -1):
        beta[k - 1] = spec.conv(spec.lam(k + 1) + beta[k])
    log_Z = log_trapezoid(alpha[-1], spec.grid.step) + spec.log_offset
    if not np.isfinite(log_Z):
        raise InfeasibleChain("chain has zero mass")
    logd = np.empty((l, n))
    mean = np.zeros(l + 1)
    var = np.zeros(l + 1)
    mean[0] = spec.start
    for k in range(1, l + 1):
        s = alpha[k - 1] + beta[k - 1]
        logd[k - 1] = s - log_trapezoid(s, spec.grid.step)
        mean[k], var[k] = moments(logd[k - 1], spec.grid)
    return ChainMarginals(spec.grid, logd, mean, var, log_Z, alpha, beta)


def _propagate(spec: ChainSpec, fb: ChainMarginals, r: np.ndarray, j: int) -> np.ndarray:
    """Push a (log) measure at site ``j >= 1`` through the conditional kernel to ``j + 1``."""
    inner = _finite_diff(r, fb.beta[j - 1])
    return spec.lam(j + 1) + fb.beta[j] + spec.conv(inner)


def pair_covariance(spec: ChainSpec, k: int, k2: int, fb: ChainMarginals | None = None) -> float:
    """``Cov(X_k, X_k2)`` under the tilted chain, ``0 <= k <= k2 <= l``."""
    if not 0 <= k <= k2 <= spec.l:
        raise ValueError("need 0 <= k <= k2 <= l")
    fb = fb or forward_backward(spec)
    if k == 0:
        return 0.0
    if k == k2:
        return float(fb.var[k])
    # propagate rho*(x - x0) and rho with x0 below the grid, so both stay
    # positive (no artificial support edges) and the product is log-concave
    x = spec.grid.points
    x0 = x[0] - spec.grid.step
    a = fb.log_density[k - 1] + np.log(x - x0)
    b = fb.log_density[k - 1].copy()
    for j in range(k, k2):
        a = _propagate(spec, fb, a, j)
        b = _propagate(spec, fb, b, j)
    w = log_moment_weights(spec.grid)
    ea, eb = w * np.exp(a), w * np.exp(b)
    z = eb.sum()
    return float((x * ea).sum() / z - (ea.sum() / z) * ((x * eb).sum() / z))


def step_kernel(spec: ChainSpec, k: int, v: float, fb: ChainMarginals | None = None) -> StepKernel:
    """Law of ``X_{k+1}`` given ``X_k = v`` under the tilted chain."""
    if not 0 <= k < spec.l:
        raise ValueError("need 0 <= k < l")
    fb = fb or forward_backward(spec)
    s = spec.log_step(v) + spec.lam(k + 1) + fb.beta[k]
    z = log_trapezoid(s, spec.grid.step)
    if not np.isfinite(z):
        raise InfeasibleChain(f"conditioning value {v} is infeasible at site {k}")
    return StepKernel(k, float(v), LogGridFunction(spec.grid, s - z))


def log_tail_mass(logd: np.ndarray, grid: GridSpec, t: float, side: str = "upper") -> float:
    """``log P(X > t)`` (or ``P(X < t)``) for the piecewise-linear density with node values ``exp(logd)``."""
    x = grid.points
    if side == "lower":
        return log_tail_mass(logd[::-1], GridSpec(-grid.hi, grid.step, grid.count), -t, "upper")
    if t <= x[0]:
        return log_trapezoid(logd, grid.step)
    if t >= x[-1]:
        return -np.inf
    i = int(np.floor((t - grid.lo) / grid.step))
    i = min(i, grid.count - 2)
    fr = (t - x[i]) / grid.step
    a, b = logd[i], logd[i + 1]
    mx = max(a, b)
    if np.isfinite(mx):
        pa, pb = math.exp(a - mx), math.exp(b - mx)
        pt = pa + fr * (pb - pa)
        part = mx + math.log(max(0.5 * (pt + pb) * (1 - fr) * grid.step, 1e-300))
    else:
        part = -np.inf
    rest = log_trapezoid(logd[i + 1:], grid.step) if grid.count - (i + 1) >= 2 else -np.inf
    return float(np.logaddexp(part, rest))


# ---------------------------------------------------------------------------
# total variation between two conditioned flows


def tv_curve(spec: ChainSpec, k0: int, v: float, v2: float, horizon: int,
             fb: ChainMarginals | None = None) -> np.ndarray:
    """``TV_j`` between the laws at site ``k0 + j`` started from ``v`` and ``v2`` at ``k0``.

    Entry ``j = 0`` compares the two point masses.
    """
    if horizon < 0 or k0 + horizon > spec.l:
        raise ValueError("k0 + horizon exceeds chain length")
    fb = fb or forward_backward(spec)
    out = np.zeros(horizon + 1)
    out[0] = 0.0 if v == v2 else 1.0
    if horizon == 0:
        return out
    w = log_moment_weights(spec.grid)
    r1 = step_kernel(spec, k0, v, fb).log_density.log_values
    r2 = step_kernel(spec, k0, v2, fb).log_density.log_values
    for j in range(1, horizon + 1):
        if j > 1:
            r1 = _propagate(spec, fb, r1, k0 + j - 1)
            r2 = _propagate(spec, fb, r2, k0 + j - 1)
        out[j] = min(1.0, 0.5 * float(np.sum(w * np.abs(np.exp(r1) - np.exp(r2)))))
    return out


# ---------------------------------------------------------------------------
# drift envelopes


@dataclass(frozen=True)
class DriftEnvelope:
    v: np.ndarray
    d_lower: np.ndarray
    d_upper: np.ndarray
    a: float
    b: float
    d: float
    D: float
    B1: bool
    B2: bool
    B3: bool
    violations: tuple = ()

    @property
    def holds(self) -> bool:
        return self.B1 and self.B2 and self.B3


def _log_density_slope(logd: np.ndarray, step: float, floor: float = -30.0):
    y = np.full_like(logd, np.nan)
    y[1:-1] = (logd[2:] - logd[:-2]) / (2.0 * step)
    ok = np.zeros(len(logd), dtype=bool)
    ok[1:-1] = (logd[1:-1] > floor) & np.isfinite(logd[2:]) & np.isfinite(logd[:-2])
    return y, ok


def envelope_offsets(u: np.ndarray, y: np.ndarray, a: float) -> tuple[float, float]:
    """Tightest ``(d_lower, d_upper)`` with ``l_{a,d_lower} <= y <= l_{1/a,d_upper}`` at the points ``u``.

    ``l_{a,w}(u) = 2a (u-w)^- - (2/a) (u-w)^+`` is decreasing in ``u`` and
    increasing in ``w``, so each point bounds ``w`` from one side.
    """
    pos = y >= 0
    wmax = np.where(pos, u + y / (2.0 * a), u + a * y / 2.0)
    wmin = np.where(pos, u + a * y / 2.0, u + y / (2.0 * a))
    return float(wmax.min()), float(wmin.max())


def drift_envelope(kernels: list[StepKernel], *, a_grid=None, gap_tol: float = 0.05,
                   b: float | None = None, floor: float = -30.0) -> DriftEnvelope:
    """Fit the piecewise-linear drift envelopes and test B1-B3.

    ``a`` is the largest candidate for which every kernel's envelope gap
    ``d_upper - d_lower`` stays below ``gap_tol`` (the smallest candidate is
    used if none qualifies). ``b`` defaults to the smallest probed ``|v|``
    beyond which both one-sided drifts point toward 0; then
    ``d = min(min_{v<-b} d_lower, min_{v>b} -d_upper)`` and
    ``D = max_v (max(|d_lower|, |d_upper|) - |v|)``.
    """
    if not kernels:
        raise ValueError("need at least one kernel")
    a_grid = np.arange(0.01, 1.0, 0.01) if a_grid is None else np.asarray(a_grid)
    vs = np.array([kk.v for kk in kernels])
    data = []
    for kk in kernels:
        lf = kk.log_density
        y, ok = _log_density_slope(lf.log_values, lf.grid.step, floor)
        u = lf.grid.points - kk.v
        data.append((u[ok], y[ok]))

    def offsets(a):
        lo = np.empty(len(kernels))
        hi = np.empty(len(kernels))
        for i, (u, y) in enumerate(data):
            lo[i], hi[i] = envelope_offsets(u, y, a)
        return lo, hi

    chosen = None
    for a in sorted(a_grid, reverse=True):
        lo, hi = offsets(a)
        if np.max(hi - lo) <= gap_tol:
            chosen = (float(a), lo, hi)
            break
    if chosen is None:
        a = float(min(a_grid))
        lo, hi = offsets(a)
        chosen = (a, lo, hi)
    a, lo, hi = chosen

    violations = tuple((float(v), float(x), float(y)) for v, x, y in zip(vs, lo, hi) if x > y + 1e-9)
    order = np.argsort(np.abs(vs))
    if b is None:
        b = float(np.max(np.abs(vs)))
        for i in order:
            bb = abs(vs[i])
            left = lo[vs < -bb]
            right = hi[vs > bb]
            if (left.size == 0 or left.min() > 0) and (right.size == 0 or right.max() < 0):
                b = float(bb)
                break
    left = lo[vs < -b]
    right = -hi[vs > b]
    cand = np.concatenate([left, right])
    d = float(cand.min()) if cand.size else 0.0
    D = float(np.max(np.maximum(np.abs(lo), np.abs(hi)) - np.abs(vs))) + 1e-9
    B1 = bool(left.size == 0 or left.min() >= d) and d > 0
    B2 = bool(right.size == 0 or right.min() >= d) and d > 0
    B3 = bool(np.isfinite(D))
    return DriftEnvelope(vs, lo, hi, a, float(b), d, max(D, 0.0), B1, B2, B3, violations)


# ---------------------------------------------------------------------------
# exponential tails under a localizing potential


@dataclass(frozen=True)
class PotentialCheck:
    a: float
    b: float
    D: float
    ok: bool
    message: str


@dataclass(frozen=True)
class PinnedTail:
    t: np.ndarray
    log_tail: np.ndarray     # log P(|X_l| > t)
    slope: float             # least-squares slope of log tail on the fit window
    intercept: float
    r2: float
    C: float
    c: float
    check: PotentialCheck | None


class PotentialCheckError(ValueError):
    pass


def check_localizing(spec: ChainSpec, b_grid=None) -> PotentialCheck:
    """Numerical check that ``g_k = -(lam_k - lam_k(0))`` grow at least linearly and are monotone off ``[-b, b]``."""
    x = spec.grid.points
    i0 = int(np.argmin(np.abs(x)))
    b_grid = np.arange(0.5, 0.5 * (x[-1] - x[0]) / 2, 0.5) if b_grid is None else b_grid
    g = -(spec.potentials - spec.potentials[:, [i0]])
    for b in b_grid:
        out = np.abs(x) > b
        right = x > b
        left = x < -b
        if not (right.sum() > 2 and left.sum() > 2):
            break
        gr = g[:, right]
        gl = g[:, left]
        mono = (np.all(np.diff(gr, axis=1) >= -1e-12) and np.all(np.diff(gl, axis=1) <= 1e-12))
        if not mono:
            continue
        with np.errstate(invalid="ignore"):
            ratio = g[:, out] / np.abs(x[out])
        a = float(np.nanmin(np.where(np.isinf(ratio), np.inf, ratio)))
        if a > 0:
            D = float(np.max(np.abs(g[:, ~out])))
            return PotentialCheck(a, float(b), D, True, "localizing")
    return PotentialCheck(0.0, float("nan"), float("nan"), False,
                          "potentials are not monotone with linear growth outside any probed [-b, b]")


def pinned_tail(spec: ChainSpec, t_grid=None, fit=(2.0, 8.0), *, validate: bool = True,
                fb: ChainMarginals | None = None) -> PinnedTail:
    """Tail of ``|X_l|`` with a log-linear fit ``log P = log C - c t`` over ``fit``."""
    check = check_localizing(spec) if validate else None
    if validate and not check.ok:
        raise PotentialCheckError(check.message)
    fb = fb or forward_backward(spec)
    t = np.arange(0.0, fit[1] + 1e-9, 0.25) if t_grid is None else np.asarray(t_grid, dtype=float)
    logd = fb.log_density[-1]
    lt = np.array([np.logaddexp(log_tail_mass(logd, spec.grid, s, "upper"),
                                log_tail_mass(logd, spec.grid, -s, "lower")) for s in t])
    lt = np.minimum(lt, 0.0)
    sel = (t >= fit[0]) & (t <= fit[1]) & np.isfinite(lt)
    slope, intercept, r2 = linear_fit(t[sel], lt[sel])
    return PinnedTail(t, lt, slope, intercept, r2, math.exp(intercept), -slope, check)


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns ``(slope, intercept, r2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return float("nan"), float("nan"), float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(r2)


# ---------------------------------------------------------------------------
# sampling


@numba.njit(cache=True)
def _draw_piecewise_linear(p, x, lo, hi, step, u1, u2):
    """Draw from the piecewise-linear density with node values ``p[lo..hi]``."""
    total = 0.0
    for j in range(lo, hi):
        total += p[j] + p[j + 1]
    if total <= 0.0:
        return x[lo]
    target = u1 * total
    acc = 0.0
    j = lo
    while j < hi - 1:
        m = p[j] + p[j + 1]
        if acc + m >= target:
            break
        acc += m
        j += 1
    a = p[j]
    b = p[j + 1]
    # solve a t + (b - a) t^2 / 2 = u2 (a + b) / 2 on [0, 1]
    r = u2 * 0.5 * (a + b)
    if abs(b - a) < 1e-12 * (a + b):
        t = u2
    else:
        disc = a * a + 2.0 * (b - a) * r
        if disc < 0.0:
            disc = 0.0
        t = (-a + math.sqrt(disc)) / (b - a)
    if t < 0.0:
        t = 0.0
    if t > 1.0:
        t = 1.0
    return x[j] + t * step


@numba.njit(cache=True)
def _window(sad, n, half_pts):
    lo = sad - half_pts
    hi = sad + half_pts
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@numba.njit(cache=True)
def _kernel_node_values(c, x, state, inv2var, lo, hi, out):
    mx = -np.inf
    for j in range(lo, hi + 1):
        if c[j] == -np.inf:
            continue
        d = x[j] - state
        val = c[j] - d * d * inv2var
        if val > mx:
            mx = val
    for j in range(lo, hi + 1):
        if c[j] == -np.inf or mx == -np.inf:
            out[j] = 0.0
        else:
            d = x[j] - state
            out[j] = math.exp(c[j] - d * d * inv2var - mx)


@numba.njit(cache=True)
def _sample_step(c, x, step, states, sad, half_pts, inv2var, u1, u2, out):
    n = x.shape[0]
    buf = np.zeros(n)
    for i in range(states.shape[0]):
        lo, hi = _window(sad[i], n, half_pts)
        _kernel_node_values(c, x, states[i], inv2var, lo, hi, buf)
        out[i] = _draw_piecewise_linear(buf, x, lo, hi, step, u1[i], u2[i])
        for j in range(lo, hi + 1):
            buf[j] = 0.0


def _saddles(c: np.ndarray, x: np.ndarray, states: np.ndarray, inv2var: float) -> np.ndarray:
    order = np.argsort(states, kind="stable")
    sad_sorted = _saddle_indices(c, x, states[order], inv2var)
    sad = np.empty_like(sad_sorted)
    sad[order] = sad_sorted
    return sad


def sample_paths(spec: ChainSpec, count: int, seed, fb: ChainMarginals | None = None) -> np.ndarray:
    """``count`` exact draws of ``(X_0, ..., X_l)``; array of shape ``(count, l + 1)``."""
    fb = fb or forward_backward(spec)
    rng = np.random.default_rng(seed)
    x = spec.grid.points
    half_pts = int(math.ceil(spec.width * math.sqrt(spec.variance) / spec.grid.step))
    inv2var = 0.5 / spec.variance
    paths = np.empty((count, spec.l + 1))
    paths[:, 0] = spec.start
    for k in range(spec.l):
        c = spec.lam(k + 1) + fb.beta[k]
        states = paths[:, k].copy()
        sad = _saddles(c, x, states, inv2var)
        u = rng.random((2, count))
        _sample_step(c, x, spec.grid.step, states, sad, half_pts, inv2var, u[0], u[1], paths[:, k + 1])
    return paths


def sample_path(spec: ChainSpec, seed, fb: ChainMarginals | None = None) -> np.ndarray:
    return sample_paths(spec, 1, seed, fb)[0]


# ---------------------------------------------------------------------------
# maximal coupling


@numba.njit(cache=True)
def _coupled_step(c, x, step, s1, s2, sad1, sad2, half_pts, inv2var, u, out1, out2, overlap):
    n = x.shape[0]
    p = np.zeros(n)
    q = np.zeros(n)
    r = np.zeros(n)
    lo1, hi1 = _window(sad1, n, half_pts)
    lo2, hi2 = _window(sad2, n, half_pts)
    lo = min(lo1, lo2)
    hi = max(hi1, hi2)
    _kernel_node_values(c, x, s1, inv2var, lo, hi, p)
    _kernel_node_values(c, x, s2, inv2var, lo, hi, q)
    zp = 0.0
    zq = 0.0
    for j in range(lo, hi):
        zp += p[j] + p[j + 1]
        zq += q[j] + q[j + 1]
    for j in range(lo, hi + 1):
        p[j] /= zp
        q[j] /= zq
        r[j] = min(p[j], q[j])
    zr = 0.0
    for j in range(lo, hi):
        zr += r[j] + r[j + 1]
    overlap[0] = zr
    if u[0] < zr:
        y = _draw_piecewise_linear(r, x, lo, hi, step, u[1], u[2])
        out1[0] = y
        out2[0] = y
        return True
    for j in range(lo, hi + 1):
        p[j] -= r[j]
        q[j] -= r[j]
    out1[0] = _draw_piecewise_linear(p, x, lo, hi, step, u[1], u[2])
    out2[0] = _draw_piecewise_linear(q, x, lo, hi, step, u[3], u[4])
    return False


@dataclass(frozen=True)
class CouplingResult:
    k: np.ndarray
    tail: np.ndarray          # empirical P(tau > k)
    tau: np.ndarray           # meeting times (horizon + 1 means "not met")
    slope: float
    r2: float
    mean_overlap: float


def maximal_coupling_overlap(spec: ChainSpec, k: int, v: float, v2: float,
                             fb: ChainMarginals | None = None) -> float:
    """Overlap mass ``1 - TV`` of the one-step kernels from ``v`` and ``v2`` at site ``k``."""
    fb = fb or forward_backward(spec)
    p = np.exp(step_kernel(spec, k, v, fb).log_density.log_values)
    q = np.exp(step_kernel(spec, k, v2, fb).log_density.log_values)
    w = log_moment_weights(spec.grid)
    return float(np.sum(w * np.minimum(p, q)))


def coupling_experiment(spec: ChainSpec, k0: int, v: float, v2: float, w: float, trials: int,
                        seed, horizon: int | None = None,
                        fb: ChainMarginals | None = None) -> CouplingResult:
    """Meeting times of two conditioned chains started at ``v``, ``v2`` from site ``k0``.

    The chains move independently until both lie in ``[-w, w]``; from then
    on each step uses the maximal coupling of the two kernels, and once
    equal they move together.
    """
    if w <= 0:
        raise ValueError("threshold w must be positive")
    fb = fb or forward_backward(spec)
    horizon = spec.l - k0 if horizon is None else horizon
    if k0 + horizon > spec.l:
        raise ValueError("k0 + horizon exceeds chain length")
    rng = np.random.default_rng(seed)
    x = spec.grid.points
    step = spec.grid.step
    half_pts = int(math.ceil(spec.width * math.sqrt(spec.variance) / step))
    inv2var = 0.5 / spec.variance
    tau = np.full(trials, horizon + 1, dtype=np.int64)
    a = np.full(trials, float(v))
    b = np.full(trials, float(v2))
    met = np.zeros(trials, dtype=bool)
    if v == v2:
        tau[:] = 0
        met[:] = True
    overlaps = []
    for j in range(horizon):
        site = k0 + j
        c = spec.lam(site + 1) + fb.beta[site]
        sa = _saddles(c, x, a, inv2var)
        sb = _saddles(c, x, b, inv2var)
        u = rng.random((trials, 5))
        na = np.empty(trials)
        nb = np.empty(trials)
        ov = _coupling_sweep(c, x, step, a, b, sa, sb, met, w, u, half_pts, inv2var,
                             na, nb, tau, j + 1)
        if ov.size:
            overlaps.append(ov)
        a, b = na, nb
    ks = np.arange(horizon + 1)
    tail = np.array([(tau > kk).mean() for kk in ks])
    sel = (tail > 0) & (tail * trials >= 10)
    if v != v2 and sel.sum() >= 3:
        slope, _, r2 = linear_fit(ks[sel], np.log(tail[sel]))
    else:
        slope, r2 = float("nan"), float("nan")
    return CouplingResult(ks, tail, tau, slope, r2, float(np.mean(np.concatenate(overlaps))) if overlaps else 1.0)


@numba.njit(cache=True)
def _coupling_sweep(c, x, step, a, b, sa, sb, met, w, u, half_pts, inv2var, na, nb, tau, t):
    n = x.shape[0]
    buf = np.zeros(n)
    o = np.zeros(1)
    o1 = np.zeros(1)
    o2 = np.zeros(1)
    ov = np.empty(a.shape[0])
    m = 0
    for i in range(a.shape[0]):
        if met[i]:
            lo, hi = _window(sa[i], n, half_pts)
            _kernel_node_values(c, x, a[i], inv2var, lo, hi, buf)
            na[i] = _draw_piecewise_linear(buf, x, lo, hi, step, u[i, 1], u[i, 2])
            nb[i] = na[i]
        elif abs(a[i]) <= w and abs(b[i]) <= w:
            coupled = _coupled_step(c, x, step, a[i], b[i], sa[i], sb[i], half_pts, inv2var,
                                    u[i], o1, o2, o)
            ov[m] = o[0]
            m += 1
            na[i] = o1[0]
            nb[i] = o2[0]
            if coupled:
                met[i] = True
                tau[i] = t
        else:
            lo, hi = _window(sa[i], n, half_pts)
            _kernel_node_values(c, x, a[i], inv2var, lo, hi, buf)
            na[i] = _draw_piecewise_linear(buf, x, lo, hi, step, u[i, 1], u[i, 2])
            lo2, hi2 = _window(sb[i], n, half_pts)
            _kernel_node_values(c, x, b[i], inv2var, lo2, hi2, buf)
            nb[i] = _draw_piecewise_linear(buf, x, lo2, hi2, step, u[i, 3], u[i, 4])
    return ov[:m]


# ---------------------------------------------------------------------------
# output


def marginals_csv(fb: ChainMarginals) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["site", "grid_value", "log_density"])
    x = fb.grid.points
    for k in range(1, fb.l + 1):
        for xv, lv in zip(x, fb.log_density[k - 1]):
            wr.writerow([k, repr(float(xv)), repr(float(lv))])
    return buf.getvalue()
