"""Command-line front end: ``hardwall <command> [options]``.

Every output file starts with ``#`` header lines carrying the schema
version, the full run configuration and its git-style SHA-1, followed by a
CSV table (or a JSON document with the same content). Files are written to a
temporary sibling first and renamed, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import acceptance, mc_sampler, spine
from .brw_tails import DEFAULT_MARGIN, cached_family, p_infinity, theta_profile, u_prime
from .chain_engine import InfeasibleChain, PotentialCheckError, forward_backward, step_kernel, tv_curve
from .core import GridRangeError, GridSpec, log2_floor, m_value, moments
from .free_energy import ConvergenceError, brw_theta_potential, fe_step, initial, quadratic_potential

SCHEMA = "hardwall-output/1"

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration


def parse_values(text: str, *, integer: bool = False) -> list:
    """``a``, ``a,b,c`` or ``start:stop:step`` with an inclusive stop."""
    kind = int if integer else float
    text = text.strip()
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ValidationError(f"range {text!r} must be start:stop:step")
            a, b, s = (kind(p) for p in parts)
            if s <= 0 or b < a:
                raise ValidationError(f"range {text!r} needs step > 0 and stop >= start")
            count = int(math.floor((b - a) / s + 1e-9)) + 1
            vals = [a + i * s for i in range(count)]
            if not integer:
                # print-friendly values: 4.0 + 3 * 0.1 style drift is rounded away
                vals = [round(v, 12) for v in vals]
            return vals
        vals = [kind(p) for p in text.split(",") if p.strip()]
        if not vals:
            raise ValidationError("no values given")
        return vals
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"cannot parse {text!r} as {'integers' if integer else 'numbers'}") from None


@dataclass(frozen=True)
class RunConfig:
    command: str
    options: dict = field(default_factory=dict)

    def canonical(self) -> str:
        return json.dumps({"command": self.command, **self.options}, sort_keys=True,
                          separators=(",", ":"))

    @property
    def digest(self) -> str:
        body = self.canonical().encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class Table:
    columns: list
    rows: list
    extra: dict = field(default_factory=dict)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def render(cfg: RunConfig, table: Table, fmt: str) -> str:
    if fmt == "json":
        doc = {"schema": SCHEMA, "config": json.loads(cfg.canonical()), "config_hash": cfg.digest,
               "columns": table.columns,
               "rows": [{c: _json_value(v) for c, v in zip(table.columns, r)} for r in table.rows]}
        doc.update({k: _json_value(v) for k, v in table.extra.items()})
        return json.dumps(doc, indent=1) + "\n"
    buf = io.StringIO()
    buf.write(f"# schema: {SCHEMA}\n# command: {cfg.command}\n")
    buf.write(f"# config: {cfg.canonical()}\n# config_hash: {cfg.digest}\n")
    for k, v in table.extra.items():
        buf.write(f"# {k}: {_cell(v)}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(table.columns)
    for r in table.rows:
        wr.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_atomic(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".hardwall-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ordered_map(fn, items) -> list:
    """Map over independent points with a thread pool; results keep input order."""
    items = list(items)
    workers = min(mc_sampler.worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def _step(args, default: float) -> float:
    return args.grid_step if args.grid_step is not None else default


def _single(values: list, name: str):
    if len(values) != 1:
        raise ValidationError(f"--{name} takes a single value here")
    return values[0]


def cmd_tails(args) -> Table:
    ns = parse_values(args.n, integer=True)
    us = parse_values(args.u)
    step = _step(args, 0.01)
    u_hi = max(max(us), args.grid_hi if args.grid_hi is not None else -math.inf) + 1.0
    u_lo = min(min(us), args.grid_lo if args.grid_lo is not None else math.inf)
    u_min = u_lo - 1.0 if u_lo < -DEFAULT_MARGIN + 1.0 else None

    def one(n):
        fam = cached_family(n, max(u_hi, 2.0), step, u_min=u_min)
        rows = []
        for u in us:
            lp = float(fam.p(n, u))
            r = (-lp - 0.5 * u_prime(u) ** 2) / u if u > 0 else float("nan")
            rows.append([n, float(u), lp, float(fam.dlog_p(n, u)), r])
        return rows

    return Table(["n", "u", "log_p", "dlog_p", "residual"],
                 [r for block in ordered_map(one, ns) for r in block])


def cmd_theta(args) -> Table:
    ns = parse_values(args.n, integer=True)
    us = parse_values(args.u)
    step = _step(args, 0.01)

    def one(n):
        prof = theta_profile(n, us, step=step)
        return [[n, float(u), float(f), float(r), bool(ok), prof.hard_wall_residual]
                for u, f, r, ok in zip(prof.u, prof.frac, prof.residual, prof.in_range)]

    return Table(["n", "u", "frac_log2_u", "residual", "in_range", "hard_wall_residual"],
                 [r for block in ordered_map(one, ns) for r in block])


def _default_u(args, n: int) -> float:
    return m_value(n) if args.u is None else _single(parse_values(args.u), "u")


def cmd_profile(args) -> Table:
    n = _single(parse_values(args.n, integer=True), "n")
    u = _default_u(args, n)
    l = args.l if args.l is not None else log2_floor(n) + 10
    _, fb = spine.spine_marginals(n, l, u, step=_step(args, 0.05))
    prof = spine.repulsion_profile(n, np.arange(l + 1))
    rows = [[n, u, k, float(fb.mean[k]), float(fb.var[k]), float(prof[k])] for k in range(l + 1)]
    return Table(["n", "u", "k", "mean", "var", "repulsion_profile"], rows, {"log_Z": fb.log_Z})


def cmd_covariance(args) -> Table:
    n = _single(parse_values(args.n, integer=True), "n")
    u = _default_u(args, n)
    meets = parse_values(args.meet or f"0:{n}:1", integer=True)
    if any(d < 0 or d > n for d in meets):
        raise ValidationError(f"--meet values must lie in [0, {n}]")
    tails = spine.default_tails(n, u, n)
    ln = log2_floor(n)
    # the spine is shared, so warm its cache before fanning out
    spine.spine_marginals(n, n, u, tails)
    covs = ordered_map(lambda d: spine.pair_covariance_tree(n, d, tails, u), meets)
    return Table(["n", "u", "meet", "cov", "cov_minus_excess_depth"],
                 [[n, u, d, c, c - (d - ln)] for d, c in zip(meets, covs)])


def _spine_spec(args, n: int, l: int, u: float):
    if args.recentered:
        return spine.recentered_spine(n, l, u, strict=False).spec
    spec, _ = spine.spine_marginals(n, l, u, step=_step(args, 0.05))
    return spec


def cmd_kernel(args) -> Table:
    n = _single(parse_values(args.n, integer=True), "n")
    u = _default_u(args, n)
    l = args.l if args.l is not None else log2_floor(n) + 10
    if not 0 <= args.k < l:
        raise ValidationError(f"--k must lie in [0, {l - 1}]")
    spec = _spine_spec(args, n, l, u)
    fb = forward_backward(spec)
    vs = parse_values(args.v or "0")
    rows = []
    for v in vs:
        ker = step_kernel(spec, args.k, v, fb)
        mean, var = moments(ker.log_density.log_values, spec.grid)
        rows.append([n, u, l, args.k, float(v), mean, math.sqrt(var), mean - v])
    return Table(["n", "u", "l", "k", "v", "mean", "sd", "drift"], rows)


def cmd_tv(args) -> Table:
    n = _single(parse_values(args.n, integer=True), "n")
    u = _default_u(args, n)
    l = args.l if args.l is not None else 30
    horizon = args.horizon if args.horizon is not None else l - args.k0
    spec = _spine_spec(args, n, l, u)
    tv = tv_curve(spec, args.k0, args.v, args.vprime, horizon)
    return Table(["j", "tv", "log_tv"],
                 [[j, float(t), math.log(t) if t > 0 else float("-inf")] for j, t in enumerate(tv)])


def cmd_free_energy(args) -> Table:
    lo = args.grid_lo if args.grid_lo is not None else -10.0
    hi = args.grid_hi if args.grid_hi is not None else 10.0
    if hi <= lo:
        raise ValidationError("--grid-hi must exceed --grid-lo")
    step = _step(args, 0.01)
    if args.potential == "quad":
        pot = quadratic_potential(GridSpec.from_bounds(lo, hi, step))
    else:
        lim = p_infinity(-30.0, 40.0, args.n_limit, step=step)
        pot = brw_theta_potential(args.delta, lim)
    curve = initial(pot)
    rows = [[0, curve.u_star, curve.G_star, float("nan")]]
    converged = False
    while curve.k < args.k_max:
        curve = fe_step(curve)
        gap = abs(curve.G_star - rows[-1][2])
        rows.append([curve.k, curve.u_star, curve.G_star, gap])
        if gap < args.tol:
            converged = True
            break
    if args.require_convergence and not converged:
        raise ConvergenceError(f"gap still {rows[-1][3]:.3g} at k={curve.k}")
    return Table(["k", "u_star", "G_star", "gap"], rows, {"converged": converged})


def cmd_sample(args) -> Table:
    ns = parse_values(args.n, integer=True)
    us = parse_values(args.u)
    points = [(n, u) for n in ns for u in us]
    trials = args.trials if args.trials is not None else 100_000
    if trials < 1:
        raise ValidationError("--trials must be positive")
    # independent streams per point, fixed by (seed, index)
    seeds = [int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0]) for i in range(len(points))]

    def one(i):
        n, u = points[i]
        plan = None
        if args.method == "tilted":
            plan = (mc_sampler.tuned_plan(n, u, seed=seeds[i] + 1) if args.tune
                    else mc_sampler.default_plan(u, args.offset))
        e = mc_sampler.estimate_p(n, u, args.method, trials, seeds[i], plan=plan)
        return [n, float(u), args.method, trials, e.log_estimate, e.se, e.ess, e.accepted,
                e.upper_bound if e.upper_bound is not None else float("nan"), seeds[i]]

    # estimates parallelise internally, so points run one after another
    rows = [one(i) for i in range(len(points))]
    return Table(["n", "u", "method", "trials", "log_estimate", "se", "ess", "accepted",
                  "upper_bound", "seed"], rows)


COMMANDS = {
    "tails": cmd_tails, "theta": cmd_theta, "profile": cmd_profile,
    "covariance": cmd_covariance, "kernel": cmd_kernel, "tv": cmd_tv,
    "free-energy": cmd_free_energy, "sample": cmd_sample,
}


def cmd_verify(args) -> int:
    only = args.only.split(",") if args.only else None
    results = acceptance.run_all(only, echo=lambda s: print(s, flush=True))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    cfg = RunConfig("verify", {"only": args.only})
    report = {"schema": SCHEMA, "config": json.loads(cfg.canonical()), "config_hash": cfg.digest,
              "passed": passed, "total": len(results),
              "criteria": [r.as_dict() for r in results]}
    if args.out:
        write_atomic(args.out, json.dumps(report, indent=1) + "\n")
    return EXIT_OK if passed == len(results) else EXIT_ACCEPTANCE


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hardwall", description="Tail, spine and sampling computations for the "
                "branching random walk under a hard wall.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, n_default=None, u_default=None):
        sp.add_argument("--n", default=n_default, help="depth: value, list or start:stop:step")
        sp.add_argument("--u", default=u_default, help="threshold offset: value, list or range")
        sp.add_argument("--grid-lo", type=float)
        sp.add_argument("--grid-hi", type=float)
        sp.add_argument("--grid-step", type=float)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--out", help="output path (stdout when omitted)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        return sp

    common(sub.add_parser("tails", help="log p_n(u), its derivative and residuals"),
           n_default="10", u_default="0:8:1")
    common(sub.add_parser("theta", help="residual profile against frac(log2 u)"),
           n_default="64", u_default="2:64:1")
    sp = common(sub.add_parser("profile", help="spine means and variances"), n_default="64")
    sp.add_argument("--l", type=int)
    sp = common(sub.add_parser("covariance", help="leaf covariances by meeting depth"), n_default="64")
    sp.add_argument("--meet")
    for name, helptext in (("kernel", "one-step kernels of the spine chain"),
                           ("tv", "total variation between two starts")):
        sp = common(sub.add_parser(name, help=helptext), n_default="128")
        sp.add_argument("--l", type=int)
        sp.add_argument("--recentered", action=argparse.BooleanOptionalAction, default=name == "tv")
        if name == "kernel":
            sp.add_argument("--k", type=int, default=0)
            sp.add_argument("--v")
        else:
            sp.add_argument("--k0", type=int, default=0)
            sp.add_argument("--v", type=float, default=4.0)
            sp.add_argument("--vprime", type=float, default=-4.0)
            sp.add_argument("--horizon", type=int)
    sp = common(sub.add_parser("free-energy", help="iterate the tree free energy"))
    sp.add_argument("--potential", choices=("quad", "theta"), default="quad")
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--k-max", type=int, default=30)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--n-limit", type=int, default=200, help="depth used for the limiting tail")
    sp.add_argument("--require-convergence", action="store_true")
    sp = common(sub.add_parser("sample", help="Monte Carlo estimates of p_n(u)"),
                n_default="10", u_default="0")
    sp.add_argument("--method", choices=("naive", "tilted"), default="naive")
    sp.add_argument("--offset", type=float, default=1.0, help="tilt offset over u'")
    sp.add_argument("--tune", action="store_true", help="fit a per-depth tilt by cross-entropy pilot runs (ignores --offset)")
    sp = sub.add_parser("verify", help="run the acceptance suite")
    sp.add_argument("--only", help="criterion numbers, names or module tags, comma separated")
    sp.add_argument("--out", help="JSON report path")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "verify":
            return cmd_verify(args)
        options = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "out")}
        cfg = RunConfig(args.command, options)
        table = COMMANDS[args.command](args)
        write_atomic(args.out, render(cfg, table, args.format))
        return EXIT_OK
    except (ValidationError, GridRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FloatingPointError, ConvergenceError, InfeasibleChain, PotentialCheckError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
