"""Acceptance suite: one function per criterion, each returning measured values.

Every criterion clears the shared caches first, so its runtime includes all
the work it depends on.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import log_ndtr

from . import brw_tails, mc_sampler, spine
from .brw_tails import TailFamily, p_infinity, u_prime
from .chain_engine import (
    ChainSpec,
    forward_backward,
    linear_fit,
    pair_covariance,
    pinned_tail,
    step_kernel,
    tv_curve,
)
from .core import C0, GridSpec, log2_floor, m_value
from .free_energy import brw_theta_potential, g_star_limit, initial, fe_step, quadratic_potential
from .oracles import TensorChain, kernel_quadrature, tail_quadrature


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    values_ok: bool
    runtime: float
    limit: float
    measured: dict = field(default_factory=dict)
    note: str = ""

    @property
    def runtime_ok(self) -> bool:
        return self.runtime < self.limit

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        timing = f"{self.runtime:.1f}s/{self.limit:.0f}s"
        if not self.runtime_ok:
            timing += " over budget"
        body = ", ".join(f"{k}={_short(v)}" for k, v in self.measured.items())
        return f"[{status}] {self.number:2d} {self.name}: {body} ({timing})"

    def as_dict(self) -> dict:
        return {
            "number": self.number,
            "name": self.name,
            "passed": self.passed,
            "values_ok": self.values_ok,
            "runtime_ok": self.runtime_ok,
            "runtime": round(self.runtime, 3),
            "limit": self.limit,
            "measured": {k: _plain(v) for k, v in self.measured.items()},
            "note": self.note,
        }


def _short(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def _plain(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    return v


def _clear_caches() -> None:
    brw_tails.cached_family.cache_clear()
    spine._cached_marginals.cache_clear()


# ---------------------------------------------------------------------------


def c01_closed_form() -> tuple[bool, dict]:
    tails = TailFamily(1, 10.0)
    u = np.arange(-4.0, 4.0 + 1e-9, 0.125)
    ref = 2.0 * log_ndtr(m_value(1) - u)
    err = float(np.max(np.abs(tails.p(1, u) - ref)))
    return err < 1e-6, {"max_log_error": err}


def _test_potentials():
    return [
        lambda x: -0.3 * x ** 2 + log_ndtr(x + 1.0),
        lambda x: -0.2 * (x - 1.0) ** 2,
        lambda x: log_ndtr(2.0 - x) - 0.1 * x ** 2,
    ]


def c02_brute_force() -> tuple[bool, dict]:
    tails = TailFamily(3, 10.0)
    tail_err = 0.0
    for n in (1, 2, 3):
        for u in np.arange(-4.0, 6.0 + 1e-9, 1.0):
            v = -m_value(n) + u
            f = float(tails.F_at(n, v))
            if f > -30.0:
                tail_err = max(tail_err, abs(f - tail_quadrature(n, v)))
    pots = _test_potentials()
    grid = GridSpec.from_bounds(-12.0, 12.0, 0.01)
    chain_err = 0.0
    for l in (1, 2, 3):
        spec = ChainSpec.from_functions(grid, pots[:l])
        fb = forward_backward(spec)
        ref = TensorChain(pots[:l], nodes=120 if l < 3 else 100)
        for k in range(1, l + 1):
            chain_err = max(chain_err, abs(fb.mean[k] - ref.mean(k)))
            for k2 in range(k, l + 1):
                chain_err = max(chain_err, abs(pair_covariance(spec, k, k2, fb) - ref.cov(k, k2)))
    spec = ChainSpec.from_functions(grid, pots[:2])
    kern = step_kernel(spec, 0, 0.3)
    u = np.array([-2.0, -0.5, 0.5, 1.7])
    kern_err = float(np.max(np.abs(kern.log_density(u) - kernel_quadrature(pots[:2], 0, 0.3, u))))
    ok = tail_err < 1e-6 and chain_err < 1e-6 and kern_err < 1e-6
    return ok, {"tail_error": tail_err, "chain_error": chain_err, "kernel_error": kern_err}


def c03_monte_carlo() -> tuple[bool, dict]:
    lp10 = float(TailFamily(10, 10.0).p(10, 0.0))
    lp16 = float(TailFamily(16, 10.0).p(16, 6.0))
    naive = mc_sampler.estimate_p(10, 0.0, "naive", 1_000_000, seed=2024)
    plan = mc_sampler.tuned_plan(16, 6.0, seed=99)
    tilted = mc_sampler.estimate_p(16, 6.0, "tilted", 100_000, seed=2025, plan=plan)
    z_naive = (naive.estimate - math.exp(lp10)) / naive.se
    z_tilted = (tilted.estimate - math.exp(lp16)) / tilted.se
    # acceptance count a plain run of the same size would expect
    naive_count = tilted.trials * math.exp(lp16)
    ratio = tilted.ess / naive_count
    ok = abs(z_naive) <= 3 and abs(z_tilted) <= 3 and ratio >= 100
    return ok, {"dp_log_p10": lp10, "naive_log_p10": naive.log_estimate, "z_naive": z_naive,
                "dp_log_p16": lp16, "tilted_log_p16": tilted.log_estimate, "z_tilted": z_tilted,
                "tilt_offset": plan.v - u_prime(6.0), "ess": tilted.ess,
                "ess_over_naive_count": ratio}


def c04_tails_derivative() -> tuple[bool, dict]:
    n = 100
    tails = TailFamily(n, 68.0)
    u = np.arange(8.0, 64.0 + 1e-9, 4.0)
    r = -tails.dlog_p(n, u) - (u - C0 * np.log2(u))
    half = len(u) // 2
    lower, upper = float(np.max(np.abs(r[:half]))), float(np.max(np.abs(r[half:])))
    ok = float(np.max(np.abs(r))) <= 5 and upper <= lower + 1
    return ok, {"max_abs_r": float(np.max(np.abs(r))), "sup_lower_half": lower,
                "sup_upper_half": upper}


def _band(step: float) -> np.ndarray:
    n = 256
    tails = TailFamily(n, 132.0, step)
    u = np.arange(16.0, 128.0 + 1e-9, 1.0)
    up = np.array([u_prime(x) for x in u])
    return (-tails.p(n, u) - 0.5 * up ** 2) / u


def c05_tails_band() -> tuple[bool, dict]:
    coarse = _band(0.01)
    fine = _band(0.005)
    width = float(coarse.max() - coarse.min())
    shift = float(max(abs(coarse.min() - fine.min()), abs(coarse.max() - fine.max())))
    return width <= 4 and shift < 0.5, {"band_lo": float(coarse.min()), "band_hi": float(coarse.max()),
                                        "width": width, "halving_shift": shift}


def c06_identity() -> tuple[bool, dict]:
    n = 100
    tails = TailFamily(n, 64.0)
    res = [spine.derivative_identity_check(n, u, tails) for u in (16.0, 32.0)]
    return max(res) < 0.05, {"residual_u16": res[0], "residual_u32": res[1]}


def c07_repulsion() -> tuple[bool, dict]:
    n = 64
    ln = log2_floor(n)
    l = ln + 10
    _, fb = spine.spine_marginals(n, l, m_value(n))
    k = np.arange(l + 1)
    prof = spine.repulsion_profile(n, k)
    head = float(np.max(np.abs(fb.mean[:ln + 1] - prof[:ln + 1])))
    tail = float(np.max(np.abs(fb.mean[ln:] - m_value(n - ln))))
    return head <= 5 and tail <= 5, {"max_dev_k_le_ln": head, "max_dev_beyond_ln": tail}


def c08_hat_h() -> tuple[bool, dict]:
    n = 64
    ln = log2_floor(n)
    ud = np.arange(4.0, 20.0 + 1e-9, 1.0)
    up, lo = spine.hat_h_tails(n, ln, ud)
    r_up = -up / (ud ** 2 / np.log2(ud))
    r_lo = -lo / ud ** 2
    q_up = float(r_up.max() / r_up.min()) if r_up.min() > 0 else math.inf
    q_lo = float(r_lo.max() / r_lo.min()) if r_lo.min() > 0 else math.inf
    return q_up <= 20 and q_lo <= 20, {
        "upper_ratio_range": [float(r_up.min()), float(r_up.max())], "upper_C_over_c": q_up,
        "lower_ratio_range": [float(r_lo.min()), float(r_lo.max())], "lower_C_over_c": q_lo}


def c09_covariance() -> tuple[bool, dict]:
    n = 64
    ln = log2_floor(n)
    above = list(range(ln, n + 1, 8))
    # no explicit tails: the spine marginals are then built once and cached
    dev = [abs(spine.pair_covariance_tree(n, d) - (d - ln)) for d in above]
    # Cov(0) = 0 exactly, so the decay is fitted on depths 1 .. l_n - 2
    below = list(range(ln - 2, 0, -1))
    cov = np.array([spine.pair_covariance_tree(n, d) for d in below])
    gens = np.array([ln - d for d in below], dtype=float)
    slope, _, r2 = linear_fit(gens, np.log(np.abs(cov)))
    ok = max(dev) <= 5 and slope <= -0.1 and r2 >= 0.9
    return ok, {"max_dev_above_ln": float(max(dev)), "decay_slope": slope, "decay_r2": r2}


def c10_localized() -> tuple[bool, dict]:
    out = {}
    ok = True
    u = m_value(128)
    for l in (20, 40):
        grid = GridSpec.from_bounds(-30.0, 30.0, 0.02)
        x = grid.points
        quad = pinned_tail(ChainSpec(grid, np.tile(-0.25 * x * x, (l, 1))))
        rs = spine.recentered_spine(128, l, u, strict=False)
        sp = pinned_tail(rs.spec, validate=False)
        out[f"quad_l{l}_slope"] = quad.slope
        out[f"quad_l{l}_r2"] = quad.r2
        out[f"spine_l{l}_slope"] = sp.slope
        out[f"spine_l{l}_r2"] = sp.r2
        ok &= quad.slope <= -0.3 and quad.r2 >= 0.95 and sp.slope <= -0.3 and sp.r2 >= 0.95
    return bool(ok), out


def c11_tv() -> tuple[bool, dict]:
    n = 128
    rs = spine.recentered_spine(n, 30, m_value(n), strict=False)
    fb = forward_backward(rs.spec)
    tv = tv_curve(rs.spec, 0, 4.0, -4.0, 30, fb)
    same = tv_curve(rs.spec, 0, 4.0, 4.0, 30, fb)
    j = np.arange(10, 31)
    slope, _, r2 = linear_fit(j, np.log(tv[10:31]))
    ok = slope <= -0.05 and r2 >= 0.9 and bool(np.all(same == 0.0))
    return ok, {"slope": slope, "r2": r2, "tv_10": float(tv[10]), "tv_30": float(tv[30]),
                "tv_same_start_max": float(np.max(same))}


def _theta_gstar(step: float):
    lim = p_infinity(-30.0, 40.0, 200, step=step)
    pot = brw_theta_potential(0.0, lim)
    return g_star_limit(pot, tol=1e-3, k_max=14)


def c12_free_energy() -> tuple[bool, dict]:
    quad = quadratic_potential(GridSpec.from_bounds(-10.0, 10.0, 0.01))
    g1 = fe_step(initial(quad)).G_star
    quad_err = abs(g1 + 0.5 * math.log(3.0))
    coarse = _theta_gstar(0.01)
    fine = _theta_gstar(0.005)
    shift = abs(coarse.G_star - fine.G_star)
    ok = quad_err < 1e-4 and coarse.converged and coarse.k_reached <= 14 and shift < 2e-3
    return ok, {"quad_G1_error": quad_err, "theta_G_star": coarse.G_star,
                "theta_k_reached": coarse.k_reached, "theta_gap": coarse.gap,
                "halving_shift": shift}


def c13_determinism() -> tuple[bool, dict]:
    from .cli import main

    commands = [
        ["tails", "--n", "12", "--u", "0:8:2"],
        ["theta", "--n", "12", "--u", "1:8:1"],
        ["profile", "--n", "16", "--l", "6"],
        ["covariance", "--n", "12", "--meet", "0:12:4"],
        ["kernel", "--n", "32", "--l", "3", "--k", "1", "--v=-2:2:1"],
        ["tv", "--n", "32", "--l", "8", "--horizon", "6"],
        ["free-energy", "--potential", "quad", "--k-max", "4"],
        ["sample", "--n", "6", "--u", "0:2:1", "--trials", "2000", "--seed", "7"],
        ["sample", "--n", "8", "--u", "3", "--method", "tilted", "--trials", "2000", "--seed", "7"],
    ]
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, cmd in enumerate(commands):
            blobs = []
            for rep in range(2):
                path = os.path.join(tmp, f"out{i}_{rep}.csv")
                code = main(cmd + ["--out", path])
                if code != 0:
                    mismatched.append(f"{cmd[0]} exited {code}")
                    break
                with open(path, "rb") as fh:
                    blobs.append(fh.read())
            if len(blobs) == 2 and blobs[0] != blobs[1]:
                mismatched.append(cmd[0])
    return not mismatched, {"commands": len(commands), "mismatched": mismatched}


@dataclass(frozen=True)
class Criterion:
    number: int
    name: str
    tags: tuple
    limit: float
    run: Callable[[], tuple[bool, dict]]


CRITERIA = (
    Criterion(1, "closed-form baseline", ("tails",), 1.0, c01_closed_form),
    Criterion(2, "brute-force equivalence", ("tails", "chain"), 10.0, c02_brute_force),
    Criterion(3, "monte carlo cross-check", ("sample", "tails"), 120.0, c03_monte_carlo),
    Criterion(4, "derivative form at n=100", ("tails",), 60.0, c04_tails_derivative),
    Criterion(5, "first display band at n=256", ("tails",), 300.0, c05_tails_band),
    Criterion(6, "cross-module identity", ("tails", "spine"), 60.0, c06_identity),
    Criterion(7, "repulsion profile", ("spine",), 60.0, c07_repulsion),
    Criterion(8, "hat-h tails at depth l_n", ("spine",), 120.0, c08_hat_h),
    Criterion(9, "tree covariances", ("spine",), 180.0, c09_covariance),
    Criterion(10, "localized-walk tails", ("chain", "spine"), 60.0, c10_localized),
    Criterion(11, "TV decay", ("chain", "spine"), 120.0, c11_tv),
    Criterion(12, "free energy", ("free-energy",), 300.0, c12_free_energy),
    Criterion(13, "determinism", ("cli",), 60.0, c13_determinism),
)


def select(only: list[str] | None) -> list[Criterion]:
    """Criteria matching any of ``only`` (numbers, names or module tags); all when empty."""
    if not only:
        return list(CRITERIA)
    keys = {s.strip().lower() for item in only for s in item.split(",") if s.strip()}
    out = [c for c in CRITERIA
           if str(c.number) in keys or c.name.lower() in keys or keys.intersection(c.tags)]
    if not out:
        raise ValueError(f"--only {sorted(keys)} matches no criterion")
    return out


def run_criterion(c: Criterion) -> CriterionResult:
    _clear_caches()
    t0 = time.perf_counter()
    try:
        ok, measured = c.run()
        note = ""
    except Exception as exc:  # a crashing criterion is reported, not raised
        ok, measured, note = False, {}, f"{type(exc).__name__}: {exc}"
    dt = time.perf_counter() - t0
    return CriterionResult(c.number, c.name, bool(ok) and dt < c.limit, bool(ok), dt, c.limit,
                           measured, note)


def run_all(only: list[str] | None = None, echo: Callable[[str], None] | None = None
            ) -> list[CriterionResult]:
    results = []
    for c in select(only):
        r = run_criterion(c)
        if echo:
            echo(r.line() + (f" -- {r.note}" if r.note else ""))
        results.append(r)
    return results
