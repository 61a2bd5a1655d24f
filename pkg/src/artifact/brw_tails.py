"""Law of the leaf minimum of the binary branching random walk.

``F_n(v) = log P(min over depth-n leaves of h >= v)`` in absolute
coordinates (root at 0). One generation of the recursion is

    Fhat_n(v) = log E[exp F_{n-1}(v - Z)],   F_n = 2 Fhat_n,

since the two children of the root carry independent copies of the
depth-(n-1) problem. Centred quantities use ``p_n(u) = F_n(-m_n + u)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, ndtr

from .core import (
    C0,
    GridRangeError,
    GridSpec,
    LogGridFunction,
    frac_log2,
    interpolate,
    log1mexp,
    log2_floor,
    log_convolve_values,
    m_value,
)

TAIL_EXTEND = ("edge", "linear")
# log(1 - p) may still be rising at the right edge of a far-tail grid
COMPLEMENT_EXTEND = ("capped", "capped")
DEFAULT_STEP = 0.01
# quadrature nodes every 20 grid points (0.2 at the default step): the
# trapezoid sum of a smooth Gaussian-weighted integrand is already exact to
# rounding there
DEFAULT_STRIDE = 20
DEFAULT_MARGIN = 20.0


@dataclass(frozen=True)
class TailCurve:
    """``F = log P(min >= v)`` and its complement ``Fc = log P(min < v)``."""

    n: int
    F: LogGridFunction
    Fc: np.ndarray | None = None

    @property
    def Fhat(self) -> LogGridFunction:
        return self.F.scale(0.5)

    @property
    def grid(self) -> GridSpec:
        return self.F.grid


def tail_grid(n: int, u_max: float, step: float = DEFAULT_STEP,
              margin: float = DEFAULT_MARGIN, u_min: float | None = None) -> GridSpec:
    """Absolute-coordinate grid covering thresholds ``-m(n) + u`` for ``u <= u_max``.

    The upper end also reaches past 0, where the shallow generations have
    their fronts, so no generation is built from extrapolated values.
    """
    lo = -(m_value(n) + margin) if u_min is None else -m_value(n) + u_min - margin
    hi = max(-m_value(n) + u_max, 0.0) + margin
    return GridSpec.from_bounds(lo, hi, step)


def initial_curve(grid: GridSpec) -> TailCurve:
    """Depth 0: the root sits at 0, so ``F_0`` is the log-indicator of ``v <= 0``."""
    x = grid.points
    tol = 1e-9 * grid.step
    below = x <= tol
    return TailCurve(0, LogGridFunction(grid, np.where(below, 0.0, -np.inf)),
                     np.where(below, -np.inf, 0.0))


def _monotone_clamp(values: np.ndarray) -> np.ndarray:
    # running maximum from the right makes the curve nonincreasing
    return np.maximum.accumulate(values[::-1])[::-1]


def _pair_step(F: np.ndarray, Fc: np.ndarray, grid: GridSpec, *, width: float,
               stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One generation on the pair ``(log p, log(1 - p))``.

    Where ``p`` is close to 1 its log cannot resolve ``1 - p`` below the
    double-precision epsilon, and that loss would feed back through every
    later generation. There the complement is averaged instead, using
    ``1 - (1 - E q)^2 = 2 E q - (E q)^2``.
    """
    A, flags = log_convolve_values(F, grid, 1.0, width=width, stride=stride, extend=TAIL_EXTEND)
    B, _ = log_convolve_values(Fc, grid, 1.0, width=width, stride=stride,
                               extend=COMPLEMENT_EXTEND)
    use_q = B < -math.log(2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        eB = np.exp(np.minimum(B, 0.0))
        F_new = np.where(use_q, 2.0 * np.log1p(-eB), 2.0 * A)
        Fc_new = np.where(use_q, B + np.log(2.0 - eB), log1mexp(np.minimum(2.0 * A, 0.0)))
    F_new = np.minimum(_monotone_clamp(F_new), 0.0)
    Fc_new = np.minimum(np.maximum.accumulate(Fc_new), 0.0)
    return F_new, Fc_new, flags


def _first_pair(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # 1 - Phi(-v)^2 = Phi(v) (1 + Phi(-v)) keeps the far-left complement finite
    return 2.0 * log_ndtr(-v), log_ndtr(v) + np.log1p(ndtr(-v))


def tail_step(prev: TailCurve, *, width: float = 8.0, stride: int = DEFAULT_STRIDE) -> TailCurve:
    """Advance the leaf-minimum law by one generation."""
    grid = prev.grid
    if prev.n == 0:
        # the depth-0 curve is an indicator; its convolution is closed form
        F, Fc = _first_pair(grid.points)
        return TailCurve(1, LogGridFunction(grid, F), Fc)
    Fc_prev = prev.Fc if prev.Fc is not None else log1mexp(prev.F.log_values)
    F, Fc, flags = _pair_step(prev.F.log_values, Fc_prev, grid, width=width, stride=stride)
    return TailCurve(prev.n + 1, LogGridFunction(grid, F, flags), Fc)


class TailFamily:
    """All curves ``F_0 .. F_n`` on one shared grid, with centred accessors."""

    def __init__(self, n: int, u_max: float = 64.0, step: float = DEFAULT_STEP, *,
                 stride: int = DEFAULT_STRIDE, margin: float = DEFAULT_MARGIN,
                 grid: GridSpec | None = None, u_min: float | None = None):
        if n < 0:
            raise ValueError("depth must be nonnegative")
        self.n = n
        self.grid = grid if grid is not None else tail_grid(n, u_max, step, margin, u_min)
        curve = initial_curve(self.grid)
        self.curves = [curve]
        for _ in range(n):
            curve = tail_step(curve, stride=stride)
            self.curves.append(curve)
        self._deriv: dict[int, np.ndarray] = {}

    def F(self, j: int) -> LogGridFunction:
        if not 0 <= j <= self.n:
            raise ValueError(f"depth {j} not available (built up to {self.n})")
        return self.curves[j].F

    def F_at(self, j: int, v, *, strict: bool = False):
        """``F_j`` at absolute thresholds ``v``; beyond the grid the edge policies apply."""
        if j == 0:
            v = np.asarray(v, dtype=float)
            out = np.where(v <= 0, 0.0, -np.inf)
            return out if out.ndim else float(out)
        f = self.F(j)
        right = "raise" if strict else "linear"
        left = "raise" if strict else "edge"
        return interpolate(f.log_values, self.grid, v, order=3, left=left, right=right)

    def dF_at(self, j: int, v):
        """Derivative of ``F_j`` at ``v`` by central differences of width one grid step."""
        h = self.grid.step
        v = np.asarray(v, dtype=float)
        return (self.F_at(j, v + h) - self.F_at(j, v - h)) / (2.0 * h)

    def _check(self, n: int, u):
        v = -m_value(n) + np.asarray(u, dtype=float)
        if not np.all(self.grid.contains(v)):
            raise GridRangeError(
                f"threshold -m({n})+u outside tail grid [{self.grid.lo:.3f}, {self.grid.hi:.3f}]")
        return v

    def p(self, n: int, u):
        """``log p_n(u)``."""
        return self.F_at(n, self._check(n, u), strict=True)

    def q(self, n: int, u):
        """``log q_n(u) = log(1 - p_n(-u))``."""
        return log1mexp(self.p(n, -np.asarray(u, dtype=float)))

    def dlog_p(self, n: int, u):
        """``d/du log p_n(u)`` by a central difference of one grid step."""
        h = self.grid.step
        u = np.asarray(u, dtype=float)
        self._check(n, u - h)
        self._check(n, u + h)
        out = (self.p(n, u + h) - self.p(n, u - h)) / (2.0 * h)
        return out if np.ndim(out) else float(out)


@lru_cache(maxsize=16)
def cached_family(n: int, u_max: float = 64.0, step: float = DEFAULT_STEP,
                  stride: int = DEFAULT_STRIDE, margin: float = DEFAULT_MARGIN,
                  u_min: float | None = None) -> TailFamily:
    return TailFamily(n, u_max, step, stride=stride, margin=margin, u_min=u_min)


def p(n: int, u, *, tails: TailFamily | None = None, step: float = DEFAULT_STEP):
    tails = tails or cached_family(n, max(64.0, float(np.max(u)) + 1.0), step)
    return tails.p(n, u)


def q(n: int, u, *, tails: TailFamily | None = None, step: float = DEFAULT_STEP):
    tails = tails or cached_family(n, max(64.0, float(np.max(np.abs(u))) + 1.0), step)
    return tails.q(n, u)


def dlog_p(n: int, u, *, tails: TailFamily | None = None, step: float = DEFAULT_STEP):
    tails = tails or cached_family(n, max(64.0, float(np.max(u)) + 1.0), step)
    return tails.dlog_p(n, u)


# ---------------------------------------------------------------------------
# limit in n


@dataclass(frozen=True)
class LimitTail:
    """``log p_n(u)`` at ``n = n_max`` on a centred u-grid, plus convergence history."""

    u: np.ndarray
    log_p: np.ndarray
    n_max: int
    gaps: np.ndarray          # sup over the probe window of |p_{n+1} - p_n|, n = 1..n_max-1
    converged: bool
    tol: float

    def as_function(self) -> LogGridFunction:
        step = float(self.u[1] - self.u[0])
        return LogGridFunction(GridSpec(float(self.u[0]), step, len(self.u)), self.log_p)


def p_infinity(u_lo: float, u_hi: float, n_max: int, *, step: float = DEFAULT_STEP,
               stride: int = DEFAULT_STRIDE, window: tuple[float, float] = (-5.0, 5.0),
               tol: float = 1e-4, margin: float = DEFAULT_MARGIN) -> LimitTail:
    """Approximate ``p_inf(u) = lim p_n(u)`` by iterating to depth ``n_max``.

    The recursion runs in centred coordinates,
    ``P_n(u) = 2 log E exp P_{n-1}(u - (m_n - m_{n-1}) - Z)``,
    so a fixed u-grid serves every depth. The Cauchy gap
    ``sup |p_{n+1} - p_n|`` (probability scale) is recorded over ``window``.
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    # the lower tail of the minimum, log(1 - p), is the pulled leading edge;
    # it spreads over a width of order sqrt(n), and a linear extension any
    # closer feeds a wrong front speed back into the window
    lo_u = min(u_lo, window[0]) - max(margin, math.ceil(4.0 * math.sqrt(n_max)))
    hi_u = max(u_hi, window[1]) + margin
    grid = GridSpec.from_bounds(lo_u, hi_u, step)
    uu = grid.points
    wmask = (uu >= window[0]) & (uu <= window[1])
    out_mask = (uu >= min(u_lo, window[0]) - 1e-9) & (uu <= max(u_hi, window[1]) + 1e-9)

    cur, cur_c = _first_pair(-m_value(1) + uu)
    gaps = []
    for n in range(2, n_max + 1):
        F, Fc, _ = _pair_step(cur, cur_c, grid, width=8.0, stride=stride)
        shift = m_value(n) - m_value(n - 1)
        # re-centre by the increment of m
        nxt = interpolate(F, grid, uu - shift, order=3, left="edge", right="linear")
        nxt_c = interpolate(Fc, grid, uu - shift, order=3, left="capped", right="capped")
        nxt = np.minimum(_monotone_clamp(nxt), 0.0)
        nxt_c = np.minimum(np.maximum.accumulate(nxt_c), 0.0)
        gaps.append(float(np.max(np.abs(np.exp(nxt[wmask]) - np.exp(cur[wmask])))))
        cur, cur_c = nxt, nxt_c
    gaps = np.array(gaps)
    return LimitTail(uu[out_mask], cur[out_mask], n_max, gaps, bool(gaps[-1] < tol), tol)


# ---------------------------------------------------------------------------
# residual profile


@dataclass(frozen=True)
class ThetaProfile:
    n: int
    u: np.ndarray
    residual: np.ndarray        # [-log p_n(u) - u'^2/2] / u
    frac: np.ndarray            # fractional part of log2 u
    in_range: np.ndarray        # u <= 2**sqrt(n)
    hard_wall_residual: float   # residual at u = m(n)

    def grouped(self, decimals: int = 6) -> dict[float, list[tuple[float, float]]]:
        out: dict[float, list[tuple[float, float]]] = {}
        for u, r, d in zip(self.u, self.residual, self.frac):
            out.setdefault(round(float(d), decimals), []).append((float(u), float(r)))
        return out


def u_prime(u: float) -> float:
    """``u - c0 * floor(log2 u)`` for ``u >= 1``; ``u`` itself below."""
    return u - C0 * log2_floor(u) if u >= 1 else u


def theta_residual(log_p: float, u: float) -> float:
    up = u_prime(u)
    return (-log_p - 0.5 * up * up) / u


def theta_profile(n: int, u_grid, *, tails: TailFamily | None = None,
                  step: float = DEFAULT_STEP) -> ThetaProfile:
    u = np.asarray(u_grid, dtype=float)
    if np.any(u <= 0):
        raise ValueError("theta_profile needs u > 0")
    um = m_value(n)
    need = max(float(u.max()), um) + 1.0
    tails = tails or cached_family(n, need, step)
    lp = np.atleast_1d(tails.p(n, u))
    res = np.array([theta_residual(a, b) for a, b in zip(lp, u)])
    frac = np.array([frac_log2(x) for x in u])
    in_range = u <= 2.0 ** math.sqrt(n)
    hw = theta_residual(float(tails.p(n, um)), um)
    return ThetaProfile(n, u, res, frac, in_range, hw)


def tails_csv(n: int, u_values, tails: TailFamily) -> str:
    """CSV rows ``n,u,log_p,dlog_p,residual`` (no header block)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "u", "log_p", "dlog_p", "residual"])
    for u in u_values:
        lp = float(tails.p(n, u))
        d = float(tails.dlog_p(n, u))
        r = theta_residual(lp, u) if u > 0 else float("nan")
        w.writerow([n, repr(float(u)), repr(lp), repr(d), repr(r)])
    return buf.getvalue()
