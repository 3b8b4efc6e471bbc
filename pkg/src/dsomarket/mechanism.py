"""Settlement and payment mechanisms layered on the market solves.

Two payment schemes. Nodal settlement charges every aggregator its nodal
prices times its realized net profiles; if anyone deviates from the agreed
schedule the operator re-prices by solving the cost-to-serve program at the
realized profiles and flags the deviators for a penalty tax. The VCG scheme
charges each aggregator the externality it imposes: the optimal system cost
with its devices removed (Clarke pivot), minus what the rest of the system
costs at the full solution. VCG needs one central solve per aggregator plus
one for the full problem; a declared-value mode accepts reported aggregator
costs in place of evaluating them, for use with decentrally obtained
profiles.

`reproduce_example1` runs the canned two-bus manipulation study: the same
market is cleared once with the aggregator's true flexibility band and once
with an understated second-period cap, both settled at nodal prices, showing
the understatement lowers the aggregator's total cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .conic import DEFAULT_TOL, INFEASIBLE, OPTIMAL
from .coordination import CoordinationResult, operator_cost
from .opf import (
    OpfSolution,
    build_central,
    build_dso,
    build_dso_truncated,
    solve_opf,
)
from .scenario import Scenario, fixture_toy


class MechanismError(RuntimeError):
    """Raised when a settlement or payment computation cannot proceed."""


# ---------------------------------------------------------------------------
# nodal-price settlement


@dataclass
class Settlement:
    """Outcome of settling realized profiles against a price vector.

    payments[a] is the nodal-price charge sum(lp*p + lq*q) over the
    aggregator's buses and periods; total_charges adds tau_pen for every
    flagged aggregator. repriced says whether the prices came from a fresh
    operator solve at the realized profiles (always the case when someone
    deviated or no agreed prices were supplied); truncated says that solve
    needed the always-feasible variant with duals clipped to [-K, K].
    """

    payments: dict[str, float]
    penalized: dict[str, bool]
    deviation: dict[str, float]
    tau_pen: float
    total_charges: dict[str, float]
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    realized_p: np.ndarray
    realized_q: np.ndarray
    repriced: bool
    truncated: bool
    solution: OpfSolution | None

    def budget_gap(self) -> float:
        """Sum of per-aggregator payments minus the grid-side total
        sum_(n,t) lp*p + lq*q over all non-root buses. Zero when the
        aggregators partition the buses."""
        nbus, T = self.realized_p.shape
        grid = math.fsum(
            self.lambda_p[n, t] * self.realized_p[n, t]
            + self.lambda_q[n, t] * self.realized_q[n, t]
            for n in range(1, nbus)
            for t in range(T)
        )
        return math.fsum(self.payments.values()) - grid

    def to_dict(self) -> dict:
        return {
            "payments": dict(self.payments),
            "penalized": dict(self.penalized),
            "deviation": dict(self.deviation),
            "tau_pen": self.tau_pen,
            "total_charges": dict(self.total_charges),
            "repriced": self.repriced,
            "truncated": self.truncated,
            "budget_gap": self.budget_gap(),
        }


def _profiles(scenario: Scenario, x, what: str) -> tuple[np.ndarray, np.ndarray]:
    p, q = x
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    shape = (scenario.network.num_buses, scenario.horizon.T)
    if p.shape != shape or q.shape != shape:
        raise MechanismError(f"{what} profiles must have shape {shape}, got {p.shape} / {q.shape}")
    return p, q


def _agreed_parts(agreed):
    """Accept a converged CoordinationResult or an (x_A, prices) tuple,
    where prices is None, a DlmpSet, or an (lp, lq) pair."""
    if isinstance(agreed, CoordinationResult):
        return agreed.x_A, (agreed.lambda_p, agreed.lambda_q), agreed
    x_A, lam = agreed
    if lam is not None and hasattr(lam, "lp"):
        lam = (lam.lp, lam.lq)
    return x_A, lam, None


def settle(
    scenario: Scenario,
    agreed,
    realized=None,
    *,
    tau_pen: float | None = None,
    tol: float = 1e-6,
    K: float = 4.0,
    solver_tol: float = DEFAULT_TOL,
) -> Settlement:
    """Settle realized aggregator profiles against an agreed schedule.

    agreed is a converged CoordinationResult, or a tuple (x_A, prices) of
    the agreed net profiles and the prices they were agreed at (prices may
    be None to force re-pricing, e.g. when settling externally supplied
    profiles). realized defaults to the agreed profiles.

    If every aggregator's realized profiles match the agreed ones within
    tol coordinate-wise, the agreed prices apply. Otherwise the operator
    re-solves the cost-to-serve program at the realized profiles and every
    aggregator pays the fresh prices; aggregators that deviated are flagged
    for the penalty tax tau_pen (default: 10x the magnitude of the final
    coordination objective, or of the re-solve objective when no run is
    supplied). If the realized profiles are not servable the always-feasible
    variant with price bound K supplies the settlement prices instead.
    """
    x_star, lam_star, run = _agreed_parts(agreed)
    ap, aq = _profiles(scenario, x_star, "agreed")
    if realized is None:
        rp, rq = ap.copy(), aq.copy()
    else:
        rp, rq = _profiles(scenario, realized, "realized")

    deviation: dict[str, float] = {}
    penalized: dict[str, bool] = {}
    for agg in scenario.aggregators:
        nodes = scenario.sorted_nodes(agg)
        dev = max(
            float(np.max(np.abs(rp[nodes] - ap[nodes]))),
            float(np.max(np.abs(rq[nodes] - aq[nodes]))),
        )
        deviation[agg.id] = dev
        penalized[agg.id] = dev > tol

    repriced = any(penalized.values()) or lam_star is None
    truncated = False
    solution: OpfSolution | None = None
    if repriced:
        prog, index = build_dso(scenario, (rp, rq))
        solution = solve_opf(prog, index, tol=solver_tol)
        if solution.status == INFEASIBLE:
            truncated = True
            prog, index = build_dso_truncated(scenario, (rp, rq), K)
            solution = solve_opf(prog, index, tol=solver_tol)
        if solution.status != OPTIMAL:
            raise MechanismError(f"settlement solve ended {solution.status}")
        lp, lq = solution.dlmps.lp, solution.dlmps.lq
    else:
        lp = np.asarray(lam_star[0], dtype=float)
        lq = np.asarray(lam_star[1], dtype=float)
        if lp.shape != rp.shape or lq.shape != rq.shape:
            raise MechanismError("agreed prices must have the same shape as the profiles")

    T = scenario.horizon.T
    payments = {
        agg.id: math.fsum(
            lp[n, t] * rp[n, t] + lq[n, t] * rq[n, t]
            for n in scenario.sorted_nodes(agg)
            for t in range(T)
        )
        for agg in scenario.aggregators
    }

    if tau_pen is None:
        if run is not None and run.logs:
            tau_pen = 10.0 * abs(run.logs[-1].objective)
        elif solution is not None:
            tau_pen = 10.0 * abs(solution.objective_value)
        else:
            tau_pen = 0.0
    total = {a: payments[a] + (tau_pen if penalized[a] else 0.0) for a in payments}

    return Settlement(
        payments=payments,
        penalized=penalized,
        deviation=deviation,
        tau_pen=float(tau_pen),
        total_charges=total,
        lambda_p=lp,
        lambda_q=lq,
        realized_p=rp,
        realized_q=rq,
        repriced=repriced,
        truncated=truncated,
        solution=solution,
    )


# ---------------------------------------------------------------------------
# VCG payments


@dataclass
class VcgReport:
    """Clarke-pivot payments and the solves they came from.

    clarke_tax[a] is the optimal system cost with aggregator a's devices
    removed (its buses forced to zero net power, network kept). The payment
    is -tax + (operator cost + everyone else's cost at the full solution),
    so an aggregator whose absence makes the system cheaper pays, and one
    whose absence makes it dearer is paid. counterfactual entries are NaN
    with the solver status recorded when a pivot problem is not solvable.
    """

    full_objective: float
    operator_cost_full: float
    la_costs_full: dict[str, float]
    clarke_tax: dict[str, float]
    counterfactual_objective: dict[str, float]
    counterfactual_status: dict[str, str]
    vcg_payment: dict[str, float]
    solve_count: int
    solution: OpfSolution
    declared_mode: bool = False

    def to_dict(self) -> dict:
        return {
            "full_objective": self.full_objective,
            "operator_cost_full": self.operator_cost_full,
            "la_costs_full": dict(self.la_costs_full),
            "clarke_tax": dict(self.clarke_tax),
            "counterfactual_objective": dict(self.counterfactual_objective),
            "counterfactual_status": dict(self.counterfactual_status),
            "vcg_payment": dict(self.vcg_payment),
            "solve_count": self.solve_count,
            "declared_mode": self.declared_mode,
        }


def scenario_without(scenario: Scenario, agg_id: str) -> Scenario:
    """Pivot scenario: aggregator agg_id keeps its bus assignment but loses
    every load and DER, so its buses are forced to zero net power while the
    network and everyone else stay unchanged."""
    agg = scenario.aggregator(agg_id)
    loads = {n: ld for n, ld in scenario.loads.items() if n not in agg.nodes}
    ders = {n: d for n, d in scenario.ders.items() if n not in agg.nodes}
    la_costs = {a: c for a, c in scenario.costs.la_costs.items() if a != agg_id}
    costs = replace(scenario.costs, la_costs=la_costs)
    return replace(scenario, loads=loads, ders=ders, costs=costs)


def _la_costs_at(scenario: Scenario, sol: OpfSolution) -> dict[str, float]:
    out: dict[str, float] = {}
    for agg in scenario.aggregators:
        cost = scenario.costs.la_costs.get(agg.id)
        if cost is None:
            out[agg.id] = 0.0
        else:
            out[agg.id] = cost.value({n: sol.vars.pc[n] for n in cost.target})
    return out


def vcg_payments(
    scenario: Scenario,
    *,
    declared: dict | None = None,
    solver_tol: float = DEFAULT_TOL,
) -> VcgReport:
    """Clarke-pivot payments from one full solve plus one pivot solve per
    aggregator.

    declared, if given, maps each aggregator id to
    {"full": cost at the full solution, "without": {other_id: cost at the
    solution with other_id removed}}. Those reported numbers then stand in
    for evaluating the aggregator costs from the scenario, which is the
    data flow when profiles come from a decentralized run and the operator
    never sees the cost functions; the solves and the payment formula are
    unchanged.
    """
    prog, index = build_central(scenario)
    full = solve_opf(prog, index, tol=solver_tol)
    if full.status != OPTIMAL:
        raise MechanismError(f"full market solve ended {full.status}")
    phi0 = operator_cost(scenario, full.vars)

    agg_ids = [agg.id for agg in scenario.aggregators]
    if declared is not None:
        missing = [a for a in agg_ids if a not in declared]
        if missing:
            raise MechanismError(f"declared values missing for {missing}")
        phis = {a: float(declared[a]["full"]) for a in agg_ids}
    else:
        phis = _la_costs_at(scenario, full)

    tax: dict[str, float] = {}
    cf_obj: dict[str, float] = {}
    cf_status: dict[str, str] = {}
    payment: dict[str, float] = {}
    solves = 1
    for a in agg_ids:
        reduced = scenario_without(scenario, a)
        prog, index = build_central(reduced)
        sol = solve_opf(prog, index, tol=solver_tol)
        solves += 1
        cf_status[a] = sol.status
        if sol.status != OPTIMAL:
            cf_obj[a] = math.nan
            tax[a] = math.nan
            payment[a] = math.nan
            continue
        cf_obj[a] = sol.objective_value
        if declared is not None:
            others = math.fsum(
                float(declared[b]["without"][a]) for b in agg_ids if b != a
            )
            tax[a] = operator_cost(reduced, sol.vars) + others
        else:
            tax[a] = sol.objective_value
        rest_at_full = phi0 + math.fsum(phis[b] for b in agg_ids if b != a)
        payment[a] = -tax[a] + rest_at_full

    return VcgReport(
        full_objective=full.objective_value,
        operator_cost_full=phi0,
        la_costs_full=phis,
        clarke_tax=tax,
        counterfactual_objective=cf_obj,
        counterfactual_status=cf_status,
        vcg_payment=payment,
        solve_count=solves,
        solution=full,
        declared_mode=declared is not None,
    )


def payments_table(scenario: Scenario, settlement: Settlement, vcg: VcgReport) -> list[dict]:
    """One row per aggregator comparing the two payment schemes."""
    rows = []
    for agg in sorted(scenario.aggregators, key=lambda a: a.id):
        rows.append(
            {
                "aggregator": agg.id,
                "nodes": scenario.sorted_nodes(agg),
                "dlmp_payment": settlement.payments[agg.id],
                "vcg_payment": vcg.vcg_payment[agg.id],
            }
        )
    return rows


# ---------------------------------------------------------------------------
# two-bus manipulation study


@dataclass
class StudyOutcome:
    """One cleared-and-settled market under one announced flexibility band."""

    announced_cap: float
    objective: float
    consumption: np.ndarray
    payment: float
    la_cost: float
    utility: float
    total_cost: float
    raw_total: float

    def to_dict(self) -> dict:
        return {
            "announced_cap": self.announced_cap,
            "objective": self.objective,
            "consumption": [float(v) for v in self.consumption],
            "payment": self.payment,
            "la_cost": self.la_cost,
            "utility": self.utility,
            "total_cost": self.total_cost,
            "raw_total": self.raw_total,
        }


@dataclass
class Example1Record:
    """Truthful vs understated announcement on the two-bus scenario."""

    truthful: StudyOutcome
    cheated: StudyOutcome
    literal_cost: bool = False

    @property
    def cheating_pays(self) -> bool:
        return self.cheated.total_cost < self.truthful.total_cost

    def to_dict(self) -> dict:
        return {
            "truthful": self.truthful.to_dict(),
            "cheated": self.cheated.to_dict(),
            "literal_cost": self.literal_cost,
            "cheating_pays": self.cheating_pays,
        }


def _study_outcome(
    solve_sc: Scenario, true_sc: Scenario, cap: float, solver_tol: float
) -> StudyOutcome:
    prog, index = build_central(solve_sc)
    sol = solve_opf(prog, index, tol=solver_tol)
    if sol.status != OPTIMAL:
        raise MechanismError(f"study solve ended {sol.status}")
    bus = 1
    T = solve_sc.horizon.T
    lam, x = sol.dlmps, sol.vars
    payment = math.fsum(
        lam.lp[bus, t] * x.p[bus, t] + lam.lq[bus, t] * x.q[bus, t] for t in range(T)
    )
    # cost of the realized profile under the TRUE preferences, whatever was
    # announced; the signed utility subtracts the tracking constant w*||target||^2
    raw = true_sc.costs.la_cost("la1", {bus: x.pc[bus]})
    tcost = true_sc.costs.la_costs["la1"]
    offset = tcost.weight * sum(v * v for prof in tcost.target.values() for v in prof)
    utility = raw - offset
    return StudyOutcome(
        announced_cap=cap,
        objective=sol.objective_value,
        consumption=x.pc[bus].copy(),
        payment=payment,
        la_cost=raw,
        utility=utility,
        total_cost=utility + payment,
        raw_total=raw + payment,
    )


def reproduce_example1(
    announced_cap: float = 1.0,
    literal_cost: bool = False,
    solver_tol: float = DEFAULT_TOL,
) -> Example1Record:
    """Clear and settle the two-bus market twice: once with the aggregator's
    true flexibility band, once with the second-period upper bound understated
    as announced_cap. Both times the aggregator pays nodal prices for its
    cleared profile and its cost is evaluated under its true preferences.

    Under the default operator cost the understatement shifts the clearing
    point enough that the aggregator's total cost drops, so nodal-price
    settlement is not incentive compatible. literal_cost=True switches the
    operator cost to the variant alpha=(10, 3), beta=(12, 0), under which
    the same understatement raises the aggregator's total cost instead.
    """
    sc = fixture_toy()
    if literal_cost:
        sc = replace(sc, costs=replace(sc.costs, alpha=(10.0, 3.0), beta=(12.0, 0.0)))
    load = sc.loads[1]
    truthful = _study_outcome(sc, sc, load.Pmax[-1], solver_tol)
    cheat_load = replace(load, Pmax=(*load.Pmax[:-1], float(announced_cap)))
    cheated_sc = replace(sc, loads={**sc.loads, 1: cheat_load})
    cheated = _study_outcome(cheated_sc, sc, float(announced_cap), solver_tol)
    return Example1Record(truthful=truthful, cheated=cheated, literal_cost=literal_cost)
