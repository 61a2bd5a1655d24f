"""Tree free-energy recursion.

For a potential ``g`` and the branching random walk started at ``u``,

    G_k(u) = 2^{-k} log E exp( sum over depth-k leaves x of g(u + h(x)) ),

which splits at the root into ``G_k(u) = 2^{1-k} log E exp(2^{k-1} G_{k-1}(u + Z))``.
The curves are stored as ``s_k = 2^k G_k`` so one step is
``s_k = 2 * logconv(s_{k-1})``, the same operator as the tail recursion.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .brw_tails import LimitTail
from .core import GridSpec, LogGridFunction, interpolate, log_convolve_values

FE_EXTEND = ("linear", "linear")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PotentialSpec:
    g: LogGridFunction
    name: str = "custom"

    @property
    def grid(self) -> GridSpec:
        return self.g.grid

    def witnesses(self, drop: float = 20.0) -> dict:
        """Finite proxies for the regularity conditions on ``g``.

        ``bounded_above``: finite maximum. ``continuous``: largest adjacent
        jump of ``g`` on the grid. ``decays``: both edge values lie at least
        ``drop`` below the maximum.
        """
        v = self.g.log_values
        top = float(np.max(v))
        jump = float(np.max(np.abs(np.diff(v[np.isfinite(v)])))) if np.isfinite(v).sum() > 1 else 0.0
        return {
            "bounded_above": bool(np.isfinite(top)),
            "max": top,
            "max_adjacent_jump": jump,
            "continuous": bool(jump < 1.0),
            "decays": bool(v[0] < top - drop and v[-1] < top - drop),
        }


@dataclass(frozen=True)
class FreeEnergyCurve:
    k: int
    s: np.ndarray            # 2^k G_k on the grid
    grid: GridSpec

    @property
    def G(self) -> np.ndarray:
        return self.s / 2.0 ** self.k

    @property
    def G_k(self) -> LogGridFunction:
        return LogGridFunction(self.grid, self.G)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.s))  # leftmost on ties

    @property
    def G_star(self) -> float:
        return float(self.s[self.argmax] / 2.0 ** self.k)

    @property
    def u_star(self) -> float:
        return float(self.grid.points[self.argmax])


def initial(pot: PotentialSpec) -> FreeEnergyCurve:
    return FreeEnergyCurve(0, np.array(pot.g.log_values, dtype=float), pot.grid)


def fe_step(prev: FreeEnergyCurve, *, stride: int = 1, width: float = 8.0) -> FreeEnergyCurve:
    """One generation: ``s_k = 2 log E exp s_{k-1}(u + Z)``.

    The convolution works relative to the running maximum, so the growth of
    ``s_k`` with ``k`` never reaches the exponential.
    """
    top = float(np.max(prev.s))
    if not np.isfinite(top):
        raise FloatingPointError("free-energy curve has no finite values")
    half, _ = log_convolve_values(prev.s - top, prev.grid, 1.0, width=width, stride=stride,
                                  extend=FE_EXTEND)
    s = 2.0 * (half + top)
    if not np.isfinite(s).any():
        raise FloatingPointError(f"free-energy step {prev.k + 1} overflowed")
    return FreeEnergyCurve(prev.k + 1, s, prev.grid)


@dataclass(frozen=True)
class GStarResult:
    G_star: float
    k_reached: int
    gap: float
    history: np.ndarray       # G_k^* for k = 0..k_reached
    converged: bool


def g_star_limit(pot: PotentialSpec, tol: float = 1e-3, k_max: int = 30, *,
                 stride: int = 1, raise_on_failure: bool = False) -> GStarResult:
    """Iterate :func:`fe_step` until ``|G_k^* - G_{k-1}^*| < tol``."""
    curve = initial(pot)
    hist = [curve.G_star]
    gap = float("inf")
    while curve.k < k_max:
        curve = fe_step(curve, stride=stride)
        hist.append(curve.G_star)
        gap = abs(hist[-1] - hist[-2])
        if gap < tol:
            return GStarResult(hist[-1], curve.k, gap, np.array(hist), True)
    if raise_on_failure:
        raise ConvergenceError(f"no convergence by k={k_max}; gaps {np.abs(np.diff(hist))}")
    return GStarResult(hist[-1], curve.k, gap, np.array(hist), False)


def brw_theta_potential(delta: float, tail_limit: LimitTail | LogGridFunction, *,
                        grid: GridSpec | None = None) -> PotentialSpec:
    """``g(s) = log p_inf(-s) - 2^delta s``.

    ``tail_limit`` holds ``log p_inf`` on a centred grid; to the left of it
    ``log p_inf`` is 0 and to the right its last slope is extended.
    """
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    f = tail_limit.as_function() if isinstance(tail_limit, LimitTail) else tail_limit
    if grid is None:
        grid = GridSpec(-f.grid.hi, f.grid.step, f.grid.count)
    s = grid.points
    lp = interpolate(f.log_values, f.grid, -s, order=3, left="edge", right="linear")
    lp = np.minimum(lp, 0.0)
    return PotentialSpec(LogGridFunction(grid, lp - 2.0 ** delta * s), f"theta[{delta}]")


def quadratic_potential(grid: GridSpec, scale: float = 1.0, shift: float = 0.0) -> PotentialSpec:
    x = grid.points
    return PotentialSpec(LogGridFunction(grid, -scale * (x - shift) ** 2), "quad")


def free_energy_csv(history: np.ndarray, u_star: list[float]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["k", "u_star", "G_star", "gap"])
    for k, (g, us) in enumerate(zip(history, u_star)):
        gap = abs(history[k] - history[k - 1]) if k else float("nan")
        wr.writerow([k, repr(float(us)), repr(float(g)), repr(float(gap))])
    return buf.getvalue()
