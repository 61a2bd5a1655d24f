"""Monte Carlo on the full binary tree, plain and Cameron-Martin tilted.

Trees are stored in heap order (children of node ``i`` are ``2i+1`` and
``2i+2``). Probability estimates do not materialise trees: a compiled kernel
walks each subtree depth first over a stream of pre-drawn normals and stops
a trial as soon as its contribution is known to vanish.

Randomness: a master seed is split with :class:`numpy.random.SeedSequence`
into one stream per fixed-size batch, so results are bit-identical whatever
the number of worker threads.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numba
import numpy as np

from scipy.special import ndtr, ndtri_exp, owens_t

from .core import C0, dirichlet_energy, harmonic_profile, log2_floor, m_value

MAX_DEPTH = 24
BATCH = 1024
ESS_FLOOR = 50.0
# contributions below exp(RB_CUTOFF) times the trial weight are dropped
RB_CUTOFF = -40.0


def worker_count() -> int:
    env = os.environ.get("HARDWALL_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


def _check_depth(n: int) -> None:
    if n < 0:
        raise ValueError("depth must be nonnegative")
    if n > MAX_DEPTH:
        raise ValueError(f"depth {n} exceeds the in-memory cap {MAX_DEPTH}")


def depth_slice(d: int) -> slice:
    """Heap positions of the depth-``d`` nodes."""
    return slice(2 ** d - 1, 2 ** (d + 1) - 1)


@dataclass(frozen=True)
class TreeSample:
    n: int
    values: np.ndarray        # heap order, length 2^{n+1}-1
    log_weight: float = 0.0

    def level(self, d: int) -> np.ndarray:
        return self.values[depth_slice(d)]

    @property
    def leaves(self) -> np.ndarray:
        return self.level(self.n)


@dataclass(frozen=True)
class TiltPlan:
    """Shift every node by a function of its depth, reaching ``v`` at depth ``k``.

    By default the shift is the harmonic profile from 0 at the root to ``v``;
    then ``Delta mu`` is supported on depth ``k`` where it equals
    ``v / (2^k - 1)``. ``levels`` (the shifts at depths ``1..k``) overrides the
    profile. Below depth ``k`` the shift stays at ``v``.
    """

    k: int
    v: float
    levels: tuple | None = None
    profile: np.ndarray = field(init=False, repr=False)
    energy: float = field(init=False)
    coefficient: float = field(init=False)

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("tilt depth must be nonnegative")
        if self.levels is not None:
            prof = np.concatenate([[0.0], np.asarray(self.levels, dtype=float)])
            if len(prof) != self.k + 1 or prof[-1] != self.v or not np.all(np.isfinite(prof)):
                raise ValueError("levels must hold k finite shifts ending at v")
            dmu = np.diff(prof)
            energy = 0.5 * float(np.sum(2.0 ** np.arange(1, self.k + 1) * dmu * dmu))
            coef = math.nan
        elif self.k == 0:
            if self.v != 0.0:
                raise ValueError("the root is pinned; a depth-0 tilt must have v = 0")
            prof, energy, coef = np.zeros(1), 0.0, 0.0
        else:
            prof = harmonic_profile(self.v, self.k)
            energy = dirichlet_energy(self.v, self.k)
            coef = self.v / (2.0 ** self.k - 1.0)
        object.__setattr__(self, "profile", prof)
        object.__setattr__(self, "energy", float(energy))
        object.__setattr__(self, "coefficient", float(coef))

    @classmethod
    def from_levels(cls, levels) -> "TiltPlan":
        levels = tuple(float(x) for x in levels)
        if not levels:
            return cls(0, 0.0)
        return cls(len(levels), levels[-1], levels)

    @property
    def harmonic(self) -> bool:
        return self.levels is None

    def shift(self, d: int) -> float:
        return float(self.profile[min(d, self.k)])

    def shift_vector(self, n: int) -> np.ndarray:
        """Shift of every node of a depth-``n`` heap."""
        out = np.empty(2 ** (n + 1) - 1)
        for d in range(n + 1):
            out[depth_slice(d)] = self.shift(d)
        return out

    def log_weight(self, level_k_sum):
        """``-energy - <h, Delta mu>`` from the untilted depth-``k`` sum (harmonic plans)."""
        if not self.harmonic:
            raise ValueError("a plan with explicit levels needs log_weight_tree")
        return -self.energy - self.coefficient * np.asarray(level_k_sum)

    def log_weight_tree(self, tree: np.ndarray) -> np.ndarray:
        """Same weight from untilted heaps of depth ``>= k``, shape (count, nodes).

        Each depth-``d`` increment is shifted by ``mu_d - mu_{d-1}``, so the
        weight is ``-energy - sum_d (mu_d - mu_{d-1}) * (sum of depth-d increments)``.
        """
        tree = np.atleast_2d(tree)
        out = np.full(tree.shape[0], -self.energy)
        for d in range(1, self.k + 1):
            dm = self.profile[d] - self.profile[d - 1]
            if dm == 0.0:
                continue
            inc = tree[:, depth_slice(d)].sum(axis=1) - 2.0 * tree[:, depth_slice(d - 1)].sum(axis=1)
            out -= dm * inc
        return out


def default_plan(u: float, offset: float = 1.0) -> TiltPlan:
    """Tilt to ``u' + offset`` at depth ``l_u``; the untilted plan when ``u <= 1``."""
    if u <= 1.0:
        return TiltPlan(0, 0.0)
    k = log2_floor(u)
    if k == 0:
        return TiltPlan(0, 0.0)
    return TiltPlan(k, u - C0 * k + offset)


def tuned_plan(n: int, u: float, *, depth: int | None = None, pilot_trials: int = 4000,
               rounds: int = 3, seed: int = 0) -> TiltPlan:
    """Per-depth tilt fitted by the cross-entropy method.

    For shifts that depend only on depth, the member closest in relative
    entropy to the conditioned law shifts depth ``d`` to the conditional
    mean of the depth-``d`` average. Each round estimates those means from
    a weighted pilot run under the current plan, starting from
    ``default_plan(u, 0)`` held constant below ``l_u``. The tilt reaches
    ``depth`` (default ``max(l_u, l_n) + 3``, at most ``n - 2``); below it
    the conditioned profile is flat to within a few hundredths. Pilot
    streams are derived from ``seed``; the main run should use a different
    seed.
    """
    start = default_plan(u, 0.0)
    if start.k == 0 or n < 3:
        return default_plan(u)
    if depth is None:
        depth = max(start.k, log2_floor(n)) + 3
    depth = max(1, min(depth, n - 2))
    plan = TiltPlan.from_levels([start.shift(d) for d in range(1, depth + 1)])
    for r in range(rounds):
        logc, avg = _contributions(n, u, "tilted", pilot_trials, seed + 7919 * (r + 1), plan, None)
        ok = np.isfinite(logc)
        if not ok.any():
            break
        w = np.exp(logc[ok] - logc[ok].max())
        means = (w[:, None] * avg[ok]).sum(axis=0) / w.sum()
        plan = TiltPlan.from_levels(means[1:])
    return plan


# ---------------------------------------------------------------------------
# full trees


def _grow(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    """``count`` untilted heaps of depth ``n``, shape (count, 2^{n+1}-1)."""
    vals = np.zeros((count, 2 ** (n + 1) - 1))
    for d in range(1, n + 1):
        parent = vals[:, depth_slice(d - 1)]
        vals[:, depth_slice(d)] = np.repeat(parent, 2, axis=1) + rng.standard_normal((count, 2 ** d))
    return vals


def sample_tree(n: int, seed: int) -> TreeSample:
    _check_depth(n)
    rng = np.random.default_rng(seed)
    return TreeSample(n, _grow(rng, 1, n)[0])


def sample_tilted(n: int, plan: TiltPlan, seed: int) -> TreeSample:
    _check_depth(n)
    if plan.k > n:
        raise ValueError("tilt depth exceeds tree depth")
    rng = np.random.default_rng(seed)
    h = _grow(rng, 1, n)[0]
    lw = float(plan.log_weight_tree(h)[0]) if plan.k else 0.0
    return TreeSample(n, h + plan.shift_vector(n), lw)


def sample_trees(n: int, count: int, seed: int, plan: TiltPlan | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Batch version: (values, log_weights); values already shifted by the plan."""
    _check_depth(n)
    plan = plan or TiltPlan(0, 0.0)
    if plan.k > n:
        raise ValueError("tilt depth exceeds tree depth")
    rng = np.random.default_rng(seed)
    h = _grow(rng, count, n)
    lw = plan.log_weight_tree(h) if plan.k else np.zeros(count)
    return h + plan.shift_vector(n), np.asarray(lw, dtype=float)


# ---------------------------------------------------------------------------
# probability estimates without materialised trees


# log P(all four grandchildren >= T) as a function of the distance above T,
# tabulated on [_G2_LO, _G2_HI]; above the range the value is 0 to double
# precision and below it every trial is cut off anyway
_G2_LO, _G2_HI, _G2_STEP = -16.0, 14.0, 1e-3


def _grandchildren_table() -> np.ndarray:
    a = np.arange(_G2_LO, _G2_HI + 0.5 * _G2_STEP, _G2_STEP)
    h = a / math.sqrt(2.0)
    t = owens_t(h, 1.0 / math.sqrt(3.0))
    # P(W1 - Z <= a, W2 - Z <= a): a bivariate normal orthant with correlation 1/2
    with np.errstate(divide="ignore"):
        lower = np.log(ndtr(h) - 2.0 * t)
        upper = np.log1p(-(ndtr(-h) + 2.0 * t))
    return 2.0 * np.where(h > 0, upper, lower)


_G2 = _grandchildren_table()


@lru_cache(maxsize=1)
def _great_grandchildren_table() -> np.ndarray:
    """log P(all eight great-grandchildren >= T) on the same lattice.

    One more generation is ``2 log E exp g2(a + Z)``; the trapezoid sum runs
    over every tenth lattice point, where the Gaussian-weighted integrand is
    smooth enough for the sum to be exact to rounding.
    """
    stride, reach = 10, 12.0
    h = stride * _G2_STEP
    js = np.arange(-int(round(reach / h)), int(round(reach / h)) + 1)
    pad = stride * js[-1]
    ext = np.concatenate([np.zeros(pad), np.exp(_G2), np.ones(pad)])
    acc = np.zeros(len(_G2))
    wts = h * np.exp(-0.5 * (js * h) ** 2) / math.sqrt(2.0 * math.pi)
    for j, w in zip(js, wts):
        start = pad + stride * j
        acc += w * ext[start:start + len(_G2)]
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.minimum(acc, 1.0))


@lru_cache(maxsize=1)
def _closed_tables() -> np.ndarray:
    return np.stack([_G2, _great_grandchildren_table()])


# the same probability as a normal quantile: one draw z <= Q2 decides all
# four grandchildren at once; finite caps stand in for +-inf
_Q2 = np.clip(ndtri_exp(_G2), -40.0, 40.0)


@numba.njit(cache=True)
def _log_phi2(x):
    # log P(both children >= T) for a parent x above T
    if x > 8.0:
        return 0.0
    return 2.0 * math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@numba.njit(cache=True)
def _log_g2(x, table, lo, step):
    # log P(all four grandchildren >= T) by linear interpolation in the table
    t = (x - lo) / step
    if t < 0.0:
        return -np.inf
    i = int(t)
    if i >= table.shape[0] - 1:
        return 0.0
    f = t - i
    return (1.0 - f) * table[i] + f * table[i + 1]


@numba.njit(cache=True)
def _bottom_term(x, levels, table, lo, step):
    # table rows hold the two- and three-generation values
    if levels == 1:
        return _log_phi2(x)
    return _log_g2(x, table[levels - 2], lo, step)


@numba.njit(cache=True)
def _bottom_passes(x, z, qtable, lo, step):
    # Bernoulli draw of the event that all four grandchildren clear T
    t = (x - lo) / step
    if t < 0.0:
        return False
    i = int(t)
    if i >= qtable.shape[0] - 1:
        return True
    f = t - i
    return z <= (1.0 - f) * qtable[i] + f * qtable[i + 1]


@numba.njit(cache=True)
def _subtree(z, pos, depth, start, T, levels, draw, cutoff, table, qtable, lo, step):
    """Walk one subtree of the given depth whose root sits at ``start``.

    The last ``levels`` generations (0 to 3) are integrated out in closed
    form, or with ``draw`` (two levels only) decided by one Bernoulli draw
    with the exact probability. Returns (log contribution, new cursor).
    """
    if levels > depth:
        levels = depth
        draw = False
    bottom = depth - levels
    if levels == 0 and bottom == 0:
        return (0.0 if start >= T else -np.inf), pos
    if bottom == 0:
        if draw:
            ok = _bottom_passes(start - T, z[pos], qtable, lo, step)
            return (0.0 if ok else -np.inf), pos + 1
        return _bottom_term(start - T, levels, table, lo, step), pos
    path = np.empty(bottom + 1)
    path[0] = start
    acc = 0.0
    nleaf = 1 << bottom
    for i in range(nleaf):
        # first depth whose node differs from the previous leaf's path
        if i == 0:
            d0 = 1
        else:
            x = i ^ (i - 1)
            b = 0
            while x > 0:
                b += 1
                x >>= 1
            d0 = bottom - b + 1
        for d in range(d0, bottom + 1):
            path[d] = path[d - 1] + z[pos]
            pos += 1
        leaf = path[bottom]
        if draw:
            ok = _bottom_passes(leaf - T, z[pos], qtable, lo, step)
            pos += 1
            if not ok:
                return -np.inf, pos
        elif levels > 0:
            acc += _bottom_term(leaf - T, levels, table, lo, step)
            if acc < cutoff:
                return -np.inf, pos
        elif leaf < T:
            return -np.inf, pos
    return acc, pos


@numba.njit(cache=True)
def _run_trials(z, ntrials, top_vals, n, k, v, T, levels, draw, cutoff, need, table, qtable, lo,
                step, out):
    """Consume ``z`` for up to ``ntrials`` trials whose top ``k`` levels are given.

    ``top_vals[t]`` holds the untilted depth-``k`` values of trial ``t``.
    ``need`` bounds the normals one trial can consume; the loop stops before
    the buffer could run short. Returns (trials done, cursor).
    """
    pos = 0
    nk = top_vals.shape[1]
    done = 0
    for t in range(ntrials):
        if z.shape[0] - pos < need:
            break
        acc = 0.0
        for j in range(nk):
            if acc == -np.inf:
                break
            lc, pos = _subtree(z, pos, n - k, top_vals[t, j] + v, T, levels, draw, cutoff - acc,
                               table, qtable, lo, step)
            acc += lc
        out[t] = acc
        done += 1
    return done, pos


@dataclass(frozen=True)
class PEstimate:
    n: int
    u: float
    method: str
    trials: int
    log_estimate: float
    se: float                 # standard error of the estimate of p (linear scale)
    ess: float
    accepted: int             # trials with a nonzero contribution
    upper_bound: float | None = None   # 95% bound when nothing was accepted
    seed: int = 0

    @property
    def estimate(self) -> float:
        return math.exp(self.log_estimate)

    @property
    def log_se(self) -> float:
        """Delta-method standard error of the log estimate."""
        return self.se / self.estimate if self.estimate > 0 else math.inf


def _batch_contributions(args) -> tuple[np.ndarray, np.ndarray]:
    n, k, v, T, levels, draw, plan, count, seed = args
    rng = np.random.default_rng(seed)
    # top levels first: the tilt weight needs all depth-k values
    if k > 0:
        tree = _grow(rng, count, k)
        top = tree[:, depth_slice(k)]
        logw = plan.log_weight_tree(tree)
        # tilted per-depth averages, for the cross-entropy update
        avg = np.stack([tree[:, depth_slice(d)].mean(axis=1) + plan.shift(d)
                        for d in range(k + 1)], axis=1)
    else:
        top = np.zeros((count, 1))
        logw = np.zeros(count)
        avg = np.zeros((count, 1))
    out = np.full(count, -np.inf)
    tables = _closed_tables() if levels == 3 else _G2[None, :]
    depth = n - k
    per_trial = top.shape[1] * max(1, 2 ** (depth + 1))
    # small refills keep the draws discarded at the end of a batch cheap
    chunk = max(4 * per_trial, 1 << 16)
    done = 0
    # single precision increments: the walk accumulates in double
    buf = np.empty(0, dtype=np.float32)
    while done < count:
        buf = np.concatenate([buf, rng.standard_normal(chunk, dtype=np.float32)])
        ran, used = _run_trials(buf, count - done, top[done:], n, k, v, T, levels, draw,
                                RB_CUTOFF, per_trial, tables, _Q2, _G2_LO, _G2_STEP, out[done:])
        done += ran
        buf = buf[used:]
    return out + logw, avg


def _contributions(n: int, u: float, method: str, trials: int, seed: int,
                   plan: TiltPlan | None, levels: int | None) -> tuple[np.ndarray, np.ndarray]:
    T = -m_value(n) + u
    if method == "naive":
        plan = TiltPlan(0, 0.0)
        levels = 2 if levels is None else levels
        draw = levels == 2
        if levels == 1:
            raise ValueError("naive estimates draw either 0 or 2 bottom levels")
    elif method == "tilted":
        plan = plan or default_plan(u)
        levels = 3 if levels is None else levels
        draw = False
    else:
        raise ValueError(f"unknown method {method!r}")
    if levels not in (0, 1, 2, 3):
        raise ValueError("closed-form levels must be 0, 1, 2 or 3")
    if plan.k > n:
        raise ValueError("tilt depth exceeds tree depth")
    v = plan.shift(n)
    sizes = [BATCH] * (trials // BATCH) + ([trials % BATCH] if trials % BATCH else [])
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = [(n, plan.k, v, T, levels, draw, plan, s, sq) for s, sq in zip(sizes, seeds)]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(_batch_contributions, jobs))
    else:
        parts = [_batch_contributions(j) for j in jobs]
    if not parts:
        return np.empty(0), np.empty((0, plan.k + 1))
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def summarize(logc: np.ndarray, n: int, u: float, method: str, seed: int) -> PEstimate:
    N = len(logc)
    acc = int(np.isfinite(logc).sum())
    if acc == 0:
        # rule of three
        return PEstimate(n, u, method, N, -math.inf, 0.0, 0.0, 0, 3.0 / N, seed)
    top = float(np.max(logc))
    c = np.exp(logc - top)
    s1, s2 = float(c.sum()), float((c * c).sum())
    mean = s1 / N
    var = max(s2 / N - mean * mean, 0.0) * N / max(N - 1, 1)
    se = math.sqrt(var / N) * math.exp(top)
    return PEstimate(n, u, method, N, top + math.log(mean), se, s1 * s1 / s2, acc, None, seed)


def estimate_p(n: int, u: float, method: str = "naive", trials: int = 100_000, seed: int = 0, *,
               plan: TiltPlan | None = None, closed_levels: int | None = None) -> PEstimate:
    """Unbiased estimate of ``p_n(u) = P(min over leaves >= -m(n) + u)``.

    ``naive`` averages the indicator; the last two generations below each
    node are decided by a single draw with their exact joint probability,
    which leaves the law of the indicator unchanged and saves most of the
    normals. ``tilted`` applies the tilt of
    :func:`default_plan` and by default integrates the last three generations
    out in closed form: given a node at distance ``a`` above the threshold,
    both children stay above with probability ``Phi(a)^2``, all four
    grandchildren with probability ``Phi2(a/sqrt2, a/sqrt2; 1/2)^2``, and
    all eight great-grandchildren with one more Gaussian average of that.
    ``se`` is the standard error of the estimate of ``p``, not of its log.
    """
    _check_depth(n)
    if trials < 1:
        raise ValueError("trials must be positive")
    logc, _ = _contributions(n, u, method, trials, seed, plan, closed_levels)
    return summarize(logc, n, u, method, seed)


# ---------------------------------------------------------------------------
# conditional statistics


@dataclass(frozen=True)
class ConditionalEstimate:
    estimate: float
    se: float
    ess: float
    reliable: bool


def estimate_conditional(n: int, u: float, statistic: Callable[[np.ndarray], np.ndarray],
                         method: str = "naive", trials: int = 100_000, seed: int = 0, *,
                         plan: TiltPlan | None = None, ess_floor: float = ESS_FLOOR,
                         batch: int = 4096) -> ConditionalEstimate:
    """Self-normalised estimate of ``E[statistic | min over leaves >= -m(n) + u]``.

    ``statistic`` maps a (count, 2^{n+1}-1) array of heaps to per-tree values.
    ``naive`` is plain rejection; ``tilted`` weights tilted trees.
    """
    _check_depth(n)
    if method == "naive":
        plan = TiltPlan(0, 0.0)
    elif method == "tilted":
        plan = plan or default_plan(u)
    else:
        raise ValueError(f"unknown method {method!r}")
    T = -m_value(n) + u
    seeds = np.random.SeedSequence(seed).spawn((trials + batch - 1) // batch)
    logw_all, stat_all = [], []
    left = trials
    for sq in seeds:
        cnt = min(batch, left)
        left -= cnt
        vals, lw = sample_trees(n, cnt, sq, plan)
        ok = vals[:, depth_slice(n)].min(axis=1) >= T
        if ok.any():
            logw_all.append(lw[ok])
            stat_all.append(np.asarray(statistic(vals[ok]), dtype=float))
    if not logw_all:
        return ConditionalEstimate(math.nan, math.inf, 0.0, False)
    lw = np.concatenate(logw_all)
    st = np.concatenate(stat_all)
    w = np.exp(lw - lw.max())
    W = w.sum()
    est = float((w * st).sum() / W)
    # delta-method variance of the ratio estimator
    se = float(math.sqrt(np.sum((w * (st - est)) ** 2)) / W)
    ess = float(W * W / (w * w).sum())
    return ConditionalEstimate(est, se, ess, ess >= ess_floor)


def node_statistic(index: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda vals: vals[:, index]


def product_statistic(i: int, j: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda vals: vals[:, i] * vals[:, j]


def leftmost(depth: int) -> int:
    """Heap index of the leftmost node at ``depth``."""
    return 2 ** depth - 1


def pair_at_meet(n: int, meet: int) -> tuple[int, int]:
    """Two depth-``n`` leaves whose common ancestor sits at depth ``meet``."""
    if not 0 <= meet <= n:
        raise ValueError("meet depth out of range")
    a = leftmost(n)
    if meet == n:
        return a, a
    # flip the branch taken just below the meeting point
    return a, a + 2 ** (n - meet - 1)


def estimates_csv(rows: list[PEstimate]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["n", "u", "method", "trials", "log_estimate", "se", "ess", "seed"])
    for r in rows:
        wr.writerow([r.n, repr(float(r.u)), r.method, r.trials, repr(r.log_estimate),
                     repr(r.se), repr(r.ess), r.seed])
    return buf.getvalue()
