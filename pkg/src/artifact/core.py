"""Grids, log-space Gaussian quadrature and tree constants.

Everything downstream stores functions as log-values on a uniform grid.
The workhorse is :func:`log_convolve_gaussian`, which evaluates
``log E[exp f(v - Z)]`` for a centred Gaussian ``Z`` by trapezoidal
log-sum-exp over a window centred on the saddle point of the integrand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import log_ndtr

C0 = math.sqrt(2.0 * math.log(2.0))
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# 'capped' is the linear continuation clipped at 0, for log-probabilities
EXTENSIONS = ("edge", "linear", "capped", "neginf")


class GridRangeError(ValueError):
    """Raised when a point falls outside the grid it is evaluated on."""


# ---------------------------------------------------------------------------
# model constants


def m_value(n: int) -> float:
    """Centering sequence ``c0*n - 1.5*ln(n)/c0`` with ``m(0) = 0``."""
    if n < 0:
        raise ValueError(f"depth must be nonnegative, got {n}")
    if n == 0:
        return 0.0
    return C0 * n - 1.5 * math.log(n) / C0


@dataclass(frozen=True)
class ModelParams:
    c0: float = C0
    log_base_note: str = "natural logs unless log2 is explicit"

    def m(self, n: int) -> float:
        return m_value(n)


def log2_floor(s: float) -> int:
    """``floor(log2 s)`` for ``s > 0``, robust at exact powers of two."""
    if s <= 0:
        raise ValueError("log2_floor needs s > 0")
    mant, exp = math.frexp(s)  # s = mant * 2**exp with mant in [0.5, 1)
    return exp - 1


def frac_log2(s: float) -> float:
    """Fractional part of ``log2 s``; zero for ``s <= 0``."""
    if s <= 0:
        return 0.0
    return math.log2(s) - log2_floor(s)


def rho(n: int, k: int) -> float:
    """Harmonic weight at depth ``k`` between root value 0 and leaf value 1."""
    if n < 1:
        raise ValueError("rho needs n >= 1")
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    return (1.0 - 2.0 ** -k) / (1.0 - 2.0 ** -n)


def harmonic_profile(v: float, k: int) -> np.ndarray:
    """Depth profile of the harmonic extension of 0 at the root and ``v`` on depth ``k``."""
    if k < 1:
        raise ValueError("harmonic_profile needs k >= 1")
    j = np.arange(k + 1, dtype=float)
    return v * (1.0 - 2.0 ** -j) / (1.0 - 2.0 ** -k)


def dirichlet_energy(v: float, k: int) -> float:
    """Half the Dirichlet form of :func:`harmonic_profile` on the depth-``k`` tree."""
    if k < 1:
        raise ValueError("dirichlet_energy needs k >= 1")
    return 0.5 * v * v * (1.0 + 1.0 / (2.0 ** k - 1.0))


@dataclass(frozen=True)
class TreeCoord:
    depth: int
    depth_meet: int | None = None

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")
        if self.depth_meet is not None and not 0 <= self.depth_meet <= self.depth:
            raise ValueError("depth_meet must lie in [0, depth]")


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    lo: float
    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if self.count < 2:
            raise ValueError("grid needs at least two points")

    @classmethod
    def from_bounds(cls, lo: float, hi: float, step: float) -> "GridSpec":
        """Smallest grid starting at ``lo`` with spacing ``step`` that reaches ``hi``."""
        if not hi > lo:
            raise ValueError("need hi > lo")
        count = int(math.ceil((hi - lo) / step - 1e-9)) + 1
        return cls(float(lo), float(step), max(count, 2))

    @property
    def hi(self) -> float:
        return self.lo + self.step * (self.count - 1)

    @property
    def points(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.count)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = 1e-9 * self.step
        return (x >= self.lo - tol) & (x <= self.hi + tol)

    def compatible(self, other: "GridSpec") -> bool:
        return self == other


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LogGridFunction:
    """A function stored as log-values on a :class:`GridSpec` (``-inf`` allowed)."""

    grid: GridSpec
    log_values: np.ndarray
    flags: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        lv = _readonly(self.log_values)
        if lv.shape != (self.grid.count,):
            raise ValueError(f"expected {self.grid.count} values, got {lv.shape}")
        if np.isnan(lv).any() or np.isposinf(lv).any():
            raise ValueError("log-values may not contain NaN or +inf")
        object.__setattr__(self, "log_values", lv)
        if self.flags is not None:
            fl = np.array(self.flags, dtype=bool)
            fl.setflags(write=False)
            object.__setattr__(self, "flags", fl)

    @classmethod
    def from_callable(cls, grid: GridSpec, fn) -> "LogGridFunction":
        return cls(grid, fn(grid.points))

    @property
    def points(self) -> np.ndarray:
        return self.grid.points

    def __add__(self, other):
        if isinstance(other, LogGridFunction):
            if not self.grid.compatible(other.grid):
                raise ValueError("grids differ")
            return LogGridFunction(self.grid, self.log_values + other.log_values)
        return LogGridFunction(self.grid, self.log_values + float(other))

    def scale(self, c: float) -> "LogGridFunction":
        """Multiply the log-values by ``c >= 0`` (a power in probability space)."""
        if c < 0:
            raise ValueError("scale factor must be nonnegative")
        with np.errstate(invalid="ignore"):
            lv = np.where(np.isneginf(self.log_values), -np.inf, c * self.log_values)
        return LogGridFunction(self.grid, lv)

    def log_integral(self) -> float:
        return log_trapezoid(self.log_values, self.grid.step)

    def normalized(self) -> "LogGridFunction":
        z = self.log_integral()
        if not np.isfinite(z):
            raise FloatingPointError("cannot normalize: no mass on grid")
        return LogGridFunction(self.grid, self.log_values - z)

    def __call__(self, x, order: int = 3, left: str = "edge", right: str = "linear"):
        return interpolate(self.log_values, self.grid, x, order=order, left=left, right=right)


# ---------------------------------------------------------------------------
# quadrature helpers


def log_trapezoid(logv: np.ndarray, step: float) -> float:
    """Log of the trapezoid integral of ``exp(logv)`` on a uniform grid."""
    logv = np.asarray(logv, dtype=float)
    mx = np.max(logv)
    if not np.isfinite(mx):
        return -np.inf
    w = np.exp(logv - mx)
    s = w.sum() - 0.5 * (w[0] + w[-1])
    return float(mx + math.log(s * step)) if s > 0 else -np.inf


def log_moment_weights(grid: GridSpec) -> np.ndarray:
    w = np.full(grid.count, grid.step)
    w[0] = w[-1] = 0.5 * grid.step
    return w


def moments(logdens: np.ndarray, grid: GridSpec) -> tuple[float, float]:
    """Mean and variance of a normalized log-density under the trapezoid rule."""
    x = grid.points
    p = np.exp(logdens) * log_moment_weights(grid)
    mass = p.sum()
    mean = float((p * x).sum() / mass)
    var = float((p * (x - mean) ** 2).sum() / mass)
    return mean, max(var, 0.0)


def log_ndtr_diff(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a <= b``, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    # reflect so both arguments sit in the lower tail where log_ndtr is sharp
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        lh = log_ndtr(hi)
        out = lh + log1mexp(np.minimum(log_ndtr(lo) - lh, 0.0))
    out = np.where(a >= b, -np.inf, out)
    return out if out.ndim else float(out)


def log1mexp(a):
    """``log(1 - exp(a))`` for ``a <= 0``, accurate on both sides of ``-ln 2``."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(a > -math.log(2.0), np.log(-np.expm1(a)), np.log1p(-np.exp(a)))
    return out if out.ndim else float(out)


def interpolate(values, grid: GridSpec, x, order: int = 3, left: str = "edge", right: str = "linear"):
    """Evaluate grid log-values off-grid.

    ``order=3`` uses four-point Lagrange interpolation where all four
    neighbours are finite and falls back to linear otherwise; a ``-inf``
    neighbour in the linear stencil propagates ``-inf``. Outside the grid
    the ``left``/``right`` policy applies ('edge', 'linear', 'neginf' or
    'raise').
    """
    values = np.asarray(values, dtype=float)
    xs = np.asarray(x, dtype=float)
    scalar = xs.ndim == 0
    xs = np.atleast_1d(xs)
    n = grid.count
    t = (xs - grid.lo) / grid.step
    out = np.empty_like(xs)

    inside = (t >= 0) & (t <= n - 1)
    ti = t[inside]
    i0 = np.clip(np.floor(ti).astype(np.int64), 0, n - 2)
    fr = ti - i0
    a, b = values[i0], values[i0 + 1]
    with np.errstate(invalid="ignore"):
        lin = np.where(np.isneginf(a) | np.isneginf(b), -np.inf, a + fr * (b - a))
        lin = np.where(fr == 0, a, lin)
    res = lin
    if order == 3 and n >= 4:
        j = np.clip(i0 - 1, 0, n - 4)
        s = ti - j  # position relative to node j, in [0, 3]
        v0, v1, v2, v3 = values[j], values[j + 1], values[j + 2], values[j + 3]
        ok = np.isfinite(v0) & np.isfinite(v1) & np.isfinite(v2) & np.isfinite(v3)
        with np.errstate(invalid="ignore"):
            cub = (-v0 * (s - 1) * (s - 2) * (s - 3) / 6.0
                   + v1 * s * (s - 2) * (s - 3) / 2.0
                   - v2 * s * (s - 1) * (s - 3) / 2.0
                   + v3 * s * (s - 1) * (s - 2) / 6.0)
        res = np.where(ok, cub, lin)
    out[inside] = res

    for side, mask in (("left", t < 0), ("right", t > n - 1)):
        if not mask.any():
            continue
        policy = left if side == "left" else right
        if policy == "raise":
            raise GridRangeError(f"point outside grid [{grid.lo}, {grid.hi}]")
        e0, e1 = (values[0], values[1]) if side == "left" else (values[-1], values[-2])
        if policy == "edge":
            out[mask] = e0
        elif policy == "neginf" or not (np.isfinite(e0) and np.isfinite(e1)):
            out[mask] = -np.inf if policy == "neginf" or not np.isfinite(e0) else e0
        elif policy in ("linear", "capped"):
            slope = (e0 - e1) / grid.step  # outward slope
            dist = (grid.lo - xs[mask]) if side == "left" else (xs[mask] - grid.hi)
            out[mask] = e0 + slope * dist
            if policy == "capped":
                out[mask] = np.minimum(out[mask], 0.0)
        else:
            raise ValueError(f"unknown extension policy {policy!r}")
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Gaussian convolution in log space


@numba.njit(cache=True)
def _saddle_indices(f, y, x, inv2var):
    """Leftmost argmax over j of ``f[j] - (x[i]-y[j])**2 * inv2var`` for sorted ``x``.

    The argmax is nondecreasing in ``x`` for any ``f`` (the quadratic kernel
    is Monge), so a divide-and-conquer sweep finds all of them in
    O((N + M) log M).
    """
    m = x.shape[0]
    out = np.zeros(m, dtype=np.int64)
    # explicit stack of (qlo, qhi, jlo, jhi)
    stack = np.empty((256, 4), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = m - 1
    stack[0, 2] = 0
    stack[0, 3] = y.shape[0] - 1
    top = 1
    while top > 0:
        top -= 1
        qlo = stack[top, 0]
        qhi = stack[top, 1]
        jlo = stack[top, 2]
        jhi = stack[top, 3]
        if qlo > qhi:
            continue
        mid = (qlo + qhi) // 2
        best = -np.inf
        bj = jlo
        xm = x[mid]
        for j in range(jlo, jhi + 1):
            fj = f[j]
            if fj == -np.inf:
                continue
            d = xm - y[j]
            val = fj - d * d * inv2var
            if val > best:
                best = val
                bj = j
        out[mid] = bj
        stack[top, 0] = qlo
        stack[top, 1] = mid - 1
        stack[top, 2] = jlo
        stack[top, 3] = bj
        top += 1
        stack[top, 0] = mid + 1
        stack[top, 1] = qhi
        stack[top, 2] = bj
        stack[top, 3] = jhi
        top += 1
    return out


@numba.njit(cache=True)
def _windowed_lse(f, y, logw, x, sad, half_width, inv2var):
    m = x.shape[0]
    nn = y.shape[0]
    out = np.empty(m)
    for i in range(m):
        s = sad[i]
        ys = y[s]
        lo = s
        while lo > 0 and ys - y[lo - 1] <= half_width:
            lo -= 1
        hi = s
        while hi < nn - 1 and y[hi + 1] - ys <= half_width:
            hi += 1
        xi = x[i]
        mx = -np.inf
        for j in range(lo, hi + 1):
            if f[j] == -np.inf:
                continue
            d = xi - y[j]
            v = f[j] + logw[j] - d * d * inv2var
            if v > mx:
                mx = v
        if mx == -np.inf:
            out[i] = -np.inf
            continue
        acc = 0.0
        for j in range(lo, hi + 1):
            if f[j] == -np.inf:
                continue
            d = xi - y[j]
            acc += np.exp(f[j] + logw[j] - d * d * inv2var - mx)
        out[i] = mx + np.log(acc)
    return out


def _sublattice(count: int, stride: int) -> np.ndarray:
    idx = np.arange(0, count, stride)
    if idx[-1] != count - 1:
        idx = np.append(idx, count - 1)
    return idx


def log_convolve_values(values: np.ndarray, grid: GridSpec, variance: float, *,
                        width: float = 8.0, stride: int = 1,
                        extend: tuple[str, str] = ("neginf", "neginf"),
                        reflect: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Array-level core of :func:`log_convolve_gaussian`.

    Returns ``(log_values, flags)``. With ``reflect=False`` this computes
    ``log int phi(z) exp f(v - z) dz``; the Gaussian is symmetric so the
    sign convention only matters for readability at call sites.
    """
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    f = np.asarray(values, dtype=float)
    if np.isnan(f).any() or np.isposinf(f).any():
        raise ValueError("input contains NaN or +inf")
    sigma = math.sqrt(variance)
    x = grid.points
    idx = _sublattice(grid.count, stride)
    y = x[idx]
    fy = f[idx]
    # trapezoid weights; an interval with a -inf endpoint carries no mass,
    # so a finite node next to -inf marks the edge of the support
    fin = np.isfinite(fy)
    gaps = np.diff(y) * (fin[:-1] & fin[1:])
    w = np.zeros(len(y))
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    fy = np.where(w > 0, fy, -np.inf)
    inv2var = 0.5 / variance

    out = np.full(grid.count, -np.inf)
    centre = x
    if np.isfinite(fy).any():
        sad = _saddle_indices(fy, y, x, inv2var)
        out = _windowed_lse(fy, y, logw, x, sad, width * sigma, inv2var)
        centre = y[sad]
    out = out - LOG_SQRT_2PI - 0.5 * math.log(variance)

    # analytic contributions from beyond the grid edges
    left, right = extend
    for side, policy in (("left", left), ("right", right)):
        if policy not in EXTENSIONS:
            raise ValueError(f"unknown extension policy {policy!r}")
        if policy == "neginf":
            continue
        e0, e1 = (f[0], f[1]) if side == "left" else (f[-1], f[-2])
        if not np.isfinite(e0):
            continue
        if policy in ("linear", "capped") and np.isfinite(e1):
            a = (e0 - e1) / grid.step  # slope pointing away from the grid
        else:
            a = 0.0
        # signed distance from each x to the edge, measured outward
        d = (grid.lo - x) if side == "left" else (x - grid.hi)
        with np.errstate(over="ignore"):
            if policy == "capped" and a > 0.0 and e0 < 0.0:
                # linear on [edge, edge + r], then 0 beyond
                r = -e0 / a
                lin = e0 + a * d + 0.5 * a * a * variance + \
                    log_ndtr_diff((d + a * variance - r) / sigma, (d + a * variance) / sigma)
                extra = np.logaddexp(lin, log_ndtr((d - r) / sigma))
            else:
                # f = e0 + a * (distance past the edge)
                extra = e0 + a * d + 0.5 * a * a * variance + log_ndtr((d + a * variance) / sigma)
        out = np.logaddexp(out, extra)

    # outputs whose quadrature window reaches past an edge
    reach = width * sigma
    flags = (centre - reach < grid.lo) | (centre + reach > grid.hi)
    return out, flags


def log_convolve_gaussian(f: LogGridFunction, variance: float, *, width: float = 8.0,
                          stride: int = 1,
                          extend: tuple[str, str] = ("neginf", "neginf")) -> LogGridFunction:
    """``g(v) = log E[exp f(v - Z)]`` with ``Z ~ N(0, variance)``, on the grid of ``f``.

    The integrand is summed over ``width`` standard deviations on each side
    of its maximiser, which bounds the truncation error by
    ``exp(-width**2 / 2)`` whenever ``f`` is concave (every curve in this
    package is). ``extend`` selects how ``f`` continues past each grid
    edge: held constant, extrapolated linearly, or zero mass. Points whose
    window crosses a grid edge are flagged.
    """
    vals, flags = log_convolve_values(f.log_values, f.grid, variance, width=width,
                                      stride=stride, extend=extend)
    return LogGridFunction(f.grid, vals, flags)
