"""Command-line front end: solve, negotiate, settle, compare.

Subcommands
  solve-central       central market clearing, or a fixed-profile re-solve
  coordinate          run one negotiation algorithm and dump its curves
  compare-mechanisms  price the same scenario under nodal settlement and VCG

Every command prints a plain-text report; with --out-dir it also writes
report.json (the full numeric payload; identical bytes for the same command
and seed once the "timing" block is dropped) and, for coordinate, curves.csv
with one (round, residual, objective) row per iteration.

Exit codes
  0  success: optimal and exact, or coordination converged
  2  bad input: unreadable or malformed scenario, bad flag combination
  3  solve failed: infeasible or unbounded, or the negotiation diverged
  4  optimal but the relaxation is inexact (cone gap above threshold)
  5  iteration limit hit without convergence (artifacts still written)

DSOMARKET_SOLVER_TOL overrides the interior-point tolerance; the
--solver-tol flag wins over the environment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from .conic import DEFAULT_TOL, OPTIMAL
from .coordination import AlgoConfig, CoordinationError, coordinate
from .mechanism import (
    MechanismError,
    payments_table,
    reproduce_example1,
    settle,
    vcg_payments,
)
from .opf import build_central, build_dso, check_exactness, solve_opf
from .scenario import (
    Scenario,
    ScenarioError,
    fixture_15bus,
    fixture_15bus_table2_profiles,
    fixture_toy,
    load_scenario,
)
from .network import NetworkError

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_SOLVE = 3
EXIT_INEXACT = 4
EXIT_MAXITER = 5

EXACTNESS_TOL = 1e-6


class CliError(Exception):
    """Bad flag combination or unusable input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# shared plumbing


def _solver_tol(args) -> float:
    if args.solver_tol is not None:
        return args.solver_tol
    env = os.environ.get("DSOMARKET_SOLVER_TOL")
    if env:
        try:
            return float(env)
        except ValueError as exc:
            raise CliError(f"DSOMARKET_SOLVER_TOL is not a number: {env!r}") from exc
    return DEFAULT_TOL


def _load_scenario(args) -> tuple[Scenario, dict]:
    if args.scenario and args.fixture:
        raise CliError("give a scenario file or --fixture, not both")
    if args.scenario:
        sc = load_scenario(args.scenario)
        with open(args.scenario, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        source = {"path": args.scenario, "sha256": digest, "fixture": None, "seed": None}
    elif args.fixture == "toy":
        sc = fixture_toy()
        source = {"path": None, "sha256": None, "fixture": "toy", "seed": None}
    elif args.fixture == "15bus":
        sc = fixture_15bus(seed=args.seed)
        source = {"path": None, "sha256": None, "fixture": "15bus", "seed": args.seed}
    else:
        raise CliError("give a scenario file or --fixture {toy,15bus}")
    source["num_buses"] = sc.network.num_buses
    source["T"] = sc.horizon.T
    return sc, source


def _bus_rows(sc: Scenario, sol) -> list[dict]:
    x, lam = sol.vars, sol.dlmps
    rows = []
    for n in sc.network.non_root_ids:
        for t in range(sc.horizon.T):
            rows.append(
                {
                    "bus": n,
                    "t": t,
                    "f": x.f[n, t],
                    "g": x.g[n, t],
                    "ell": x.ell[n, t],
                    "v": x.v[n, t],
                    "lambda_p": lam.lp[n, t],
                    "lambda_q": lam.lq[n, t],
                }
            )
    return rows


def _root_rows(sc: Scenario, sol) -> list[dict]:
    x = sol.vars
    rows = []
    for t in range(sc.horizon.T):
        gen = -x.p0[t]
        rows.append(
            {
                "t": t,
                "p0": x.p0[t],
                "q0": x.q0[t],
                "lambda_p": sol.dlmps.lp[0, t],
                "lambda_q": sol.dlmps.lq[0, t],
                "production_cost": sc.costs.production_cost(gen, t),
            }
        )
    return rows


def _print_solution(sc: Scenario, sol) -> None:
    print(f"status: {sol.status}   objective: {sol.objective_value:.6f}")
    print("root:")
    print("  t        p0        q0  lambda_p  lambda_q      cost")
    for r in _root_rows(sc, sol):
        print(
            f"  {r['t']}  {r['p0']:8.4f}  {r['q0']:8.4f}  {r['lambda_p']:8.4f}"
            f"  {r['lambda_q']:8.4f}  {r['production_cost']:8.4f}"
        )
    print("buses:")
    print("  bus  t        f        g      ell        v  lambda_p  lambda_q")
    for r in _bus_rows(sc, sol):
        print(
            f"  {r['bus']:3d}  {r['t']}  {r['f']:7.4f}  {r['g']:7.4f}"
            f"  {r['ell']:7.4f}  {r['v']:7.4f}  {r['lambda_p']:8.4f}  {r['lambda_q']:8.4f}"
        )


def _solution_payload(sc: Scenario, sol) -> dict:
    return {
        "status": sol.status,
        "objective": sol.objective_value,
        "root": _root_rows(sc, sol),
        "buses": _bus_rows(sc, sol),
        "solver_stats": dict(sol.conic.solver_stats),
    }


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_report(args, report: dict, curves: list[dict] | None = None) -> None:
    if not args.out_dir:
        return
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    print(f"wrote {path}")
    if curves is not None:
        cpath = os.path.join(args.out_dir, "curves.csv")
        with open(cpath, "w") as fh:
            fh.write("round,residual,objective\n")
            for row in curves:
                fh.write(f"{row['round']},{row['residual']!r},{row['objective']!r}\n")
        print(f"wrote {cpath}")


def _base_report(command: str, source: dict, config: dict, wall: float) -> dict:
    return {
        "command": command,
        "scenario": source,
        "config": config,
        "timing": {"wall_time_s": wall},
    }


# ---------------------------------------------------------------------------
# solve-central


def cmd_solve_central(args) -> int:
    sc, source = _load_scenario(args)
    tol = _solver_tol(args)
    if args.profiles == "table2":
        if source["fixture"] != "15bus":
            raise CliError("--profiles table2 needs --fixture 15bus")
        prog, index = build_dso(sc, fixture_15bus_table2_profiles())
    else:
        prog, index = build_central(sc)
    t0 = time.perf_counter()
    sol = solve_opf(prog, index, tol=tol)
    wall = time.perf_counter() - t0
    config = {"profiles": args.profiles, "solver_tol": tol}
    report = _base_report("solve-central", source, config, wall)
    if sol.status != OPTIMAL:
        print(f"solve ended: {sol.status}")
        report["solution"] = {"status": sol.status}
        _write_report(args, report)
        return EXIT_SOLVE
    ex = check_exactness(sol, tol=EXACTNESS_TOL)
    _print_solution(sc, sol)
    print(f"exactness: max cone gap {ex.max_gap:.3e} ({'exact' if ex.is_exact else 'INEXACT'})")
    print(f"solved in {wall:.3f}s")
    report["solution"] = _solution_payload(sc, sol)
    report["exactness"] = {
        "max_gap": ex.max_gap,
        "is_exact": ex.is_exact,
        "loose_lines": sorted(ex.binding_map),
    }
    _write_report(args, report)
    return EXIT_OK if ex.is_exact else EXIT_INEXACT


# ---------------------------------------------------------------------------
# coordinate


def cmd_coordinate(args) -> int:
    sc, source = _load_scenario(args)
    tol = _solver_tol(args)
    cfg = AlgoConfig(
        algo=args.algo,
        rho=args.rho,
        K=args.K,
        max_iter=args.max_iter,
        tol_primal=args.tol_primal,
        tol_obj=args.tol_obj,
        lambda0=args.lambda0,
        solver_tol=tol,
    )
    if args.alpha0 is not None:
        if args.algo != "dual-ascent":
            raise CliError("--alpha0 only applies to dual-ascent")
        cfg.steps = args.alpha0
    try:
        cfg.validate()
    except CoordinationError as exc:
        raise CliError(str(exc)) from exc
    config = {
        "algo": args.algo,
        "rho": args.rho,
        "K": args.K,
        "alpha0": args.alpha0,
        "max_iter": args.max_iter,
        "tol_primal": args.tol_primal,
        "tol_obj": args.tol_obj,
        "lambda0": args.lambda0,
        "solver_tol": tol,
    }
    t0 = time.perf_counter()
    try:
        res = coordinate(sc, cfg)
    except CoordinationError as exc:
        wall = time.perf_counter() - t0
        print(f"coordination failed: {exc}")
        report = _base_report("coordinate", source, config, wall)
        report["coordination"] = {"error": str(exc)}
        _write_report(args, report)
        return EXIT_SOLVE
    wall = time.perf_counter() - t0

    prog, index = build_central(sc)
    central = solve_opf(prog, index, tol=tol)
    gap_obj = math.nan
    gap_lambda = math.nan
    if central.status == OPTIMAL:
        gap_obj = abs(res.logs[-1].objective - central.objective_value)
        nr = list(sc.network.non_root_ids)
        gap_lambda = max(
            float(np.max(np.abs(res.lambda_p[nr] - central.dlmps.lp[nr]))),
            float(np.max(np.abs(res.lambda_q[nr] - central.dlmps.lq[nr]))),
        )

    last = res.logs[-1]
    print(f"algo: {args.algo}   rounds: {len(res.logs)}   converged: {res.converged}")
    print(f"final residual: {last.primal_residual:.3e}   objective: {last.objective:.6f}")
    print(f"gap to central: objective {gap_obj:.3e}, prices {gap_lambda:.3e}")
    if args.algo == "pdgs":
        infeasible = [log.round for log in res.logs if not log.dso_feasible]
        print(f"operator-infeasible rounds: {infeasible if infeasible else 'none'}")
    print(f"ran in {wall:.3f}s")

    curves = [
        {"round": log.round, "residual": log.primal_residual, "objective": log.objective}
        for log in res.logs
    ]
    report = _base_report("coordinate", source, config, wall)
    report["coordination"] = {
        "rounds": len(res.logs),
        "converged": res.converged,
        "final_residual": last.primal_residual,
        "final_objective": last.objective,
        "gap_objective": gap_obj,
        "gap_lambda": gap_lambda,
        "infeasible_rounds": [log.round for log in res.logs if not log.dso_feasible],
        "messages": len(res.messages),
    }
    _write_report(args, report, curves=curves)
    return EXIT_OK if res.converged else EXIT_MAXITER


# ---------------------------------------------------------------------------
# compare-mechanisms


def cmd_compare_mechanisms(args) -> int:
    tol = _solver_tol(args)
    if args.example1:
        t0 = time.perf_counter()
        rec = reproduce_example1(literal_cost=args.literal_cost, solver_tol=tol)
        wall = time.perf_counter() - t0
        print("two-bus manipulation study (nodal settlement)")
        for name, out in (("truthful", rec.truthful), ("cheated", rec.cheated)):
            print(
                f"  {name:8s} cap={out.announced_cap:.2f}"
                f"  consumption=({out.consumption[0]:.4f}, {out.consumption[1]:.4f})"
                f"  payment={out.payment:.4f}  utility={out.utility:.4f}"
                f"  total={out.total_cost:.4f}"
            )
        print(f"  understating the band {'lowers' if rec.cheating_pays else 'raises'} the total cost")
        source = {"path": None, "sha256": None, "fixture": "toy", "seed": None,
                  "num_buses": 2, "T": 2}
        config = {"example1": True, "literal_cost": args.literal_cost, "solver_tol": tol}
        report = _base_report("compare-mechanisms", source, config, wall)
        report["example1"] = rec.to_dict()
        _write_report(args, report)
        return EXIT_OK

    sc, source = _load_scenario(args)
    t0 = time.perf_counter()
    if args.profiles == "table2":
        if source["fixture"] != "15bus":
            raise CliError("--profiles table2 needs --fixture 15bus")
        st = settle(sc, (fixture_15bus_table2_profiles(), None),
                    tau_pen=args.tau_pen, solver_tol=tol)
    else:
        prog, index = build_central(sc)
        sol = solve_opf(prog, index, tol=tol)
        if sol.status != OPTIMAL:
            print(f"central solve ended: {sol.status}")
            return EXIT_SOLVE
        st = settle(sc, ((sol.vars.p, sol.vars.q), sol.dlmps),
                    tau_pen=args.tau_pen, solver_tol=tol)
    rep = vcg_payments(sc, solver_tol=tol)
    wall = time.perf_counter() - t0

    rows = payments_table(sc, st, rep)
    print("  aggregator  nodes                dlmp_payment  vcg_payment")
    for r in rows:
        nodes = ",".join(str(n) for n in r["nodes"])
        print(f"  {r['aggregator']:10s}  {nodes:20s}  {r['dlmp_payment']:11.4f}  {r['vcg_payment']:11.4f}")
    bad = {a: s for a, s in rep.counterfactual_status.items() if s != OPTIMAL}
    for a, s in sorted(bad.items()):
        print(f"  counterfactual without {a}: {s}")
    print(f"  budget gap: {st.budget_gap():.3e}   vcg solves: {rep.solve_count}")
    print(f"ran in {wall:.3f}s")

    config = {
        "example1": False,
        "profiles": args.profiles,
        "tau_pen": args.tau_pen,
        "solver_tol": tol,
    }
    report = _base_report("compare-mechanisms", source, config, wall)
    report["comparison"] = rows
    report["settlement"] = st.to_dict()
    report["vcg"] = rep.to_dict()
    _write_report(args, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point


def _add_scenario_flags(sp) -> None:
    sp.add_argument("scenario", nargs="?", help="scenario JSON file")
    sp.add_argument("--fixture", choices=["toy", "15bus"], help="canned scenario")
    sp.add_argument("--seed", type=int, default=0, help="seed for --fixture 15bus")
    sp.add_argument("--out-dir", help="write report.json (and curves.csv) here")
    sp.add_argument("--solver-tol", type=float, default=None,
                    help="interior-point tolerance (default 1e-8)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dsomarket",
        description="Distribution-grid market solves, negotiation, and settlement.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve-central", help="central clearing or fixed-profile re-solve")
    _add_scenario_flags(sp)
    sp.add_argument("--profiles", choices=["table2"],
                    help="re-solve the operator problem at the published profiles")
    sp.set_defaults(func=cmd_solve_central)

    sp = sub.add_parser("coordinate", help="run one negotiation algorithm")
    _add_scenario_flags(sp)
    sp.add_argument("--algo", required=True, choices=["dual-ascent", "admm", "pdgs"])
    sp.add_argument("--rho", type=float, default=5.0, help="penalty weight (admm)")
    sp.add_argument("--K", type=float, default=4.0, help="price bound (pdgs fallback)")
    sp.add_argument("--alpha0", type=float, default=None,
                    help="initial step size alpha0/(k+1) (dual-ascent)")
    sp.add_argument("--max-iter", type=int, default=2000)
    sp.add_argument("--tol-primal", type=float, default=1e-4)
    sp.add_argument("--tol-obj", type=float, default=1e-6)
    sp.add_argument("--lambda0", type=float, default=0.0, help="initial price estimate")
    sp.set_defaults(func=cmd_coordinate)

    sp = sub.add_parser("compare-mechanisms", help="nodal settlement vs VCG payments")
    _add_scenario_flags(sp)
    sp.add_argument("--profiles", choices=["table2"],
                    help="settle the published profiles instead of the central solution")
    sp.add_argument("--example1", action="store_true",
                    help="run the two-bus manipulation study instead")
    sp.add_argument("--literal-cost", action="store_true",
                    help="use the variant operator cost in the study")
    sp.add_argument("--tau-pen", type=float, default=None, help="deviation penalty")
    sp.set_defaults(func=cmd_compare_mechanisms)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ScenarioError, NetworkError, OSError) as exc:
        print(f"error: cannot load scenario: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (CoordinationError, MechanismError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVE


if __name__ == "__main__":
    sys.exit(main())
