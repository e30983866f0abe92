"""Command-line front end.

Exit codes: 0 ok, 1 config invalid, 2 assumption violated,
3 infeasible / iteration limit / integration failure, 4 gain file mismatch,
64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .detectability import AssumptionError, detectability_report
from .gains import MODES, GainSet, deviation_bounds, localize_gains, synthesize, verify_dissipation
from .sdp import FEASIBLE
from .simulator import (DisturbanceSet, GainMismatchError, SimulationError, check_gain_shapes,
                        estimate_hinf_ratio, simulate, simulate_batch)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ASSUMPTION = 2
EXIT_INFEASIBLE = 3
EXIT_MISMATCH = 4
EXIT_USAGE = 64

log = logging.getLogger("hinfcons")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _dump(obj, path: str | None = None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_gains(path: str) -> GainSet:
    try:
        return GainSet.from_json(Path(path).read_text())
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise GainMismatchError(f"cannot read gains from {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except ConfigError as exc:
        _dump({"valid": False, "violations": [{"field": f, "message": m} for f, m in exc.violations]})
        return EXIT_CONFIG
    _dump({"valid": True, "violations": []})
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = load_config(args.config)
    try:
        rep = detectability_report(cfg.model)
    except AssumptionError as exc:
        _dump({"error": "assumption", "message": str(exc)})
        return EXIT_ASSUMPTION
    _dump(rep, args.out)
    if not rep["necessary_condition_holds"]:
        for s in rep["product_condition"]:
            if not s["holds"]:
                print(f"state {s['state']}: necessary condition fails, witness {s['witness']}", file=sys.stderr)
        return EXIT_ASSUMPTION
    return EXIT_OK


def _solver_options(cfg, args):
    opts = dataclasses.replace(cfg.solver)
    if getattr(args, "log", None):
        opts.log_csv = args.log
    return opts


def cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    budget = cfg.budget if args.gamma2 is None else cfg.budget.with_gamma2(args.gamma2)
    opts = _solver_options(cfg, args)
    if args.log is None and args.out:
        opts.log_csv = str(Path(args.out).with_suffix("")) + "_solver.csv"
    res = synthesize(cfg.model, budget, args.mode, opts, m0=cfg.simulation.m0)
    rep = res.report
    summary = {"mode": args.mode, "status": res.status, "gamma2": budget.gamma2,
               "margin": None if not np.isfinite(rep.margin) else rep.margin,
               "iterations": rep.iterations, "message": res.message}
    if not res.feasible:
        _dump(summary)
        return EXIT_INFEASIBLE
    d = res.gains.to_dict()
    if res.deviations is not None:
        summary["deviations_ok"] = res.deviations.ok
        d["deviation_bounds_ok"] = res.deviations.ok
    diss = verify_dissipation(cfg.model, rep.solution, res.gains, budget)
    summary["dissipation_ok"] = diss.ok
    d["certificate"] = {"status": res.status, "margin": rep.margin, "eps_feas": rep.eps_feas,
                        "dissipation_ok": diss.ok, "decay_eps": diss.eps}
    if args.out:
        _dump(d, args.out)
        summary["gains"] = args.out
    else:
        summary["gain_set"] = d
    _dump(summary)
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = load_config(args.config)
    gains = _load_gains(args.gains)
    check_gain_shapes(cfg.model, gains, "global")
    loc = localize_gains(gains, cfg.net)
    d = loc.to_dict()
    d["deviation_bounds_ok"] = deviation_bounds(loc, cfg.budget).ok
    _dump(d, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    gains = _load_gains(args.gains)
    sim = cfg.simulation
    horizon = args.horizon if args.horizon is not None else sim.horizon
    step = args.step if args.step is not None else sim.step
    seed = args.seed if args.seed is not None else sim.seed
    mode = args.mode or sim.mode
    if horizon <= 0 or step <= 0:
        raise UsageError("horizon and step must be positive")
    dist = DisturbanceSet() if args.zero_disturbance else sim.disturbances
    x0 = np.asarray(sim.x0, dtype=float)
    res = simulate(cfg.model, gains, dist, x0, sim.m0, horizon, step, seed, mode, sim.record_every)
    header, rows = res.to_rows()
    with open(f"{args.out}_traj.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    zero = dist.is_zero()
    norms = np.linalg.norm(res.xhat - res.x[:, None, :], axis=2)
    tot = np.sqrt((norms ** 2).sum(axis=1))
    keep = tot > 1e-200
    slope = float(np.polyfit(res.t[keep], np.log(tot[keep]), 1)[0]) if keep.sum() >= 2 else None
    metrics = {
        "mode": mode, "horizon": horizon, "step": res.step, "seed": seed, "m0": sim.m0,
        "jumps": len(res.path) - 1,
        "psi_integral": res.psi_integral,
        "mu_P": res.mu_P,
        "ratio": None if zero or res.ratio is None else res.ratio,
        "ratio_note": "skipped: zero disturbances" if zero or res.ratio is None
        else "single-path ratio; use evaluate for the Monte Carlo estimate",
        "gamma2": gains.gamma2,
        "terminal_error_norms": [float(v) for v in res.terminal_errors],
        "error_integrals": [float(v) for v in res.err_integrals],
        "decay_slope": slope,
        "input_tail_bound": res.tail_bound,
    }
    _dump(metrics, f"{args.out}_metrics.json")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    gains = _load_gains(args.gains)
    sim = cfg.simulation
    runs = args.runs or sim.runs
    horizon = args.horizon or sim.horizon
    step = args.step or sim.step
    mode = args.mode or sim.mode
    out = {"gamma2": gains.gamma2, "mode": mode, "runs": runs, "horizon": horizon, "step": step}
    x0 = np.asarray(sim.x0, dtype=float)
    dec = simulate_batch(cfg.model, gains, DisturbanceSet(), x0, sim.m0, horizon, step, runs, sim.seed, mode)
    slopes = dec.decay_slopes(t_min=0.1 * horizon)
    out["decay"] = {"x0": list(map(float, x0)),
                    "max_terminal_ratio": float(dec.terminal_errors.max() / np.linalg.norm(x0)),
                    "max_slope": float(np.nanmax(slopes))}
    if sim.battery:
        est = estimate_hinf_ratio(cfg.model, gains, sim.battery, runs, horizon, step, sim.seed, sim.m0, mode)
        out["hinf"] = {"worst_ratio": est.worst, "cases": est.cases, "skipped": est.skipped, "note": est.note,
                       "within_gamma2": est.worst <= gains.gamma2}
    _dump(out, args.out)
    return EXIT_OK


def gamma_grid(lo: float, hi: float, steps: int) -> list[float]:
    return [float(v) for v in np.linspace(lo, hi, steps)]


def cmd_gamma_search(args) -> int:
    if not args.lo < args.hi:
        raise UsageError("--lo must be smaller than --hi")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    cfg = load_config(args.config)
    opts = _solver_options(cfg, args)
    rows = []

    def run(g2):
        res = synthesize(cfg.model, cfg.budget.with_gamma2(g2), args.mode, opts, m0=cfg.simulation.m0)
        m = res.report.margin
        rows.append((g2, res.status, m if np.isfinite(m) else float("nan")))
        return res.status == FEASIBLE

    grid = gamma_grid(args.lo, args.hi, args.steps)
    flags = [run(g) for g in grid]
    monotone = all(not a or b for a, b in zip(flags, flags[1:]))
    if not monotone:
        warnings.warn("feasibility is not monotone on the grid", RuntimeWarning)
    lo_inf, hi_feas = None, None
    for g, f in zip(grid, flags):
        if f and hi_feas is None:
            hi_feas = g
        if not f and hi_feas is None:
            lo_inf = g
    if lo_inf is not None and hi_feas is not None:
        a, b = lo_inf, hi_feas
        for _ in range(args.bisect):
            mid = 0.5 * (a + b)
            if run(mid):
                b = mid
            else:
                a = mid
        hi_feas = b
    rows.sort(key=lambda r: r[0])
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["gamma2", "status", "margin"])
        for g, s, m in rows:
            w.writerow([repr(g), s, repr(float(m))])
    finally:
        if args.out:
            fh.close()
    print(json.dumps({"min_feasible_gamma2": hi_feas, "grid_monotone": monotone}), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hinfcons", description="Distributed H-infinity consensus observer toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", help="check a config")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("detect", help="detectability diagnostics")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("synthesize", help="solve the LMIs and write gains")
    s.add_argument("config")
    s.add_argument("--mode", choices=MODES, default="local")
    s.add_argument("--out", help="gains JSON path")
    s.add_argument("--log", help="solver log CSV path (default: next to --out)")
    s.add_argument("--gamma2", type=float, help="override the configured gamma^2")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("localize", help="average global gains into local ones")
    s.add_argument("config")
    s.add_argument("gains")
    s.add_argument("--out")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("simulate", help="simulate one topology path")
    s.add_argument("config")
    s.add_argument("gains")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--mode", choices=("local", "global"))
    s.add_argument("--horizon", type=float)
    s.add_argument("--step", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--zero-disturbance", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="Monte Carlo decay and H-infinity ratio estimates")
    s.add_argument("config")
    s.add_argument("gains")
    s.add_argument("--out")
    s.add_argument("--mode", choices=("local", "global"))
    s.add_argument("--runs", type=int)
    s.add_argument("--horizon", type=float)
    s.add_argument("--step", type=float)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gamma-search", help="feasibility frontier over gamma^2")
    s.add_argument("config")
    s.add_argument("--lo", type=float, required=True)
    s.add_argument("--hi", type=float, required=True)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--bisect", type=int, default=4, help="bisection refinements of the crossing")
    s.add_argument("--mode", choices=MODES, default="local")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_gamma_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hinfcons: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        _dump({"valid": False, "violations": [{"field": f, "message": m} for f, m in exc.violations]})
        return EXIT_CONFIG
    except OSError as exc:
        print(f"hinfcons: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionError as exc:
        print(f"hinfcons: assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except GainMismatchError as exc:
        print(f"hinfcons: gain mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except SimulationError as exc:
        print(f"hinfcons: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
