"""Decentralized operator <-> aggregator coordination loops.

Three price-based negotiation schemes compute the market outcome without
either side revealing its private model: dual ascent (subgradient step on
the coupling residual), ADMM (proximal best responses around an exchanged
base profile, dual step rho), and primal-dual averaging (running averages
of both the reported profiles and the operator's balance duals, with a
truncated fallback when the averaged profile is not yet servable).

The coupling constraint is, per non-root bus and period,

    x_A[n, t] = delivered[n, t]
              = sum over children m of (f[m,t] - R_m*ell[m,t])
                - f[n,t] - G_n*v[n,t]          (active; reactive analogous)

so the primal residual is the l2 norm of x_A - delivered over all such
coordinates. Every round is logged, and the full message transcript is
kept so tests can assert information locality: an aggregator only ever
sees prices and base profiles for its own buses, and the operator only
ever sees reported profiles.
"""

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgramBuilder, DEFAULT_TOL, OPTIMAL, UNBOUNDED, solve
from .opf import (
    OpfIndex,
    OpfSolution,
    OpfVariables,
    _add_operator_cost,
    _network_rows,
    _network_vars,
    build_dso,
    build_dso_truncated,
    build_la,
    extract_variables,
    solve_opf,
)
from .scenario import Scenario


class CoordinationError(RuntimeError):
    """Raised when a negotiation cannot continue (bad config, subproblem
    failure, detected divergence, or a locality violation)."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class Message:
    """One step of the exchange. payload holds coordinate dicts keyed
    (bus, period): price signals carry lambda_p/lambda_q, base profiles
    and profile reports carry p/q."""

    kind: str  # "price-signal" | "base-profile" | "profile-report"
    round: int
    sender: str
    receiver: str
    payload: dict


@dataclass
class AlgoConfig:
    """Knobs shared by the three runners.

    steps (dual ascent only) is either a callable k -> alpha_k, a float
    alpha0 for the default diminishing schedule alpha0/(k+1), or None for
    alpha0 = 1. lambda0 is a uniform initial price, or a pair of (N, T)
    arrays for a warm start.
    """

    algo: str
    rho: float = 5.0
    steps: object = None
    K: float = 4.0
    max_iter: int = 2000
    tol_primal: float = 1e-4
    tol_obj: float = 1e-6
    lambda0: object = 0.0
    solver_tol: float = DEFAULT_TOL

    def step_size(self, k: int) -> float:
        if callable(self.steps):
            a = float(self.steps(k))
        elif self.steps is None:
            a = 1.0 / (k + 1)
        else:
            a = float(self.steps) / (k + 1)
        if not np.isfinite(a) or a < 0:
            raise CoordinationError(f"step size at round {k} must be finite and >= 0, got {a}")
        return a

    def validate(self) -> None:
        if self.algo not in ("dual-ascent", "admm", "pdgs"):
            raise CoordinationError(f"unknown algorithm {self.algo!r}")
        if self.algo == "admm" and self.rho <= 0:
            raise CoordinationError("admm needs rho > 0")
        if self.algo == "pdgs" and self.K <= 0:
            raise CoordinationError("pdgs needs K > 0")
        if self.max_iter < 1:
            raise CoordinationError("max_iter must be >= 1")
        if self.tol_primal < 0 or self.tol_obj < 0:
            raise CoordinationError("tolerances must be >= 0")
        flat = self.lambda0 if np.isscalar(self.lambda0) else np.concatenate(
            [np.ravel(g) for g in self.lambda0]
        )
        if not np.all(np.isfinite(flat)):
            raise CoordinationError("lambda0 must be finite")


@dataclass
class IterationLog:
    """Snapshot of one round: the price estimate the round produced (the
    final result equals the last entry), the profiles the aggregators
    reported, and the round's residual/objective."""

    round: int
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    x_A: tuple[np.ndarray, np.ndarray]
    primal_residual: float
    objective: float
    dso_feasible: bool = True


@dataclass
class CoordinationResult:
    """Outcome of a negotiation.

    lambda_p/lambda_q are the runner's final price estimate (after the last
    dual update / averaging step). solution is the operator re-solve at the
    final x_A when that program is feasible; its balance duals are the
    settlement prices. messages is the full ordered transcript.
    """

    logs: list[IterationLog]
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    x_A: tuple[np.ndarray, np.ndarray]
    x0: OpfVariables
    converged: bool
    solution: OpfSolution | None
    messages: list[Message] = field(default_factory=list)


# ---------------------------------------------------------------------------
# residual, costs, transcript helpers
# ---------------------------------------------------------------------------


def delivered(scenario: Scenario, x0: OpfVariables) -> tuple[np.ndarray, np.ndarray]:
    """Power the operator's flows hand to each non-root bus (root rows 0)."""
    net = scenario.network
    T = scenario.horizon.T
    dp = np.zeros((net.num_buses, T))
    dq = np.zeros((net.num_buses, T))
    for n in net.non_root_ids:
        bus = net.buses[n]
        dp[n, :] = -x0.f[n, :] - bus.G * x0.v[n, :]
        dq[n, :] = -x0.g[n, :] + bus.B * x0.v[n, :]
        for m in net.children(n):
            child = net.buses[m]
            dp[n, :] += x0.f[m, :] - child.R * x0.ell[m, :]
            dq[n, :] += x0.g[m, :] - child.X * x0.ell[m, :]
    return dp, dq


def primal_residual(scenario: Scenario, x0: OpfVariables, x_A) -> float:
    """l2 norm of the nodal-balance violations of the pair (x0, x_A)."""
    dp, dq = delivered(scenario, x0)
    nr = list(scenario.network.non_root_ids)
    ep = np.asarray(x_A[0], dtype=float)[nr, :] - dp[nr, :]
    eq = np.asarray(x_A[1], dtype=float)[nr, :] - dq[nr, :]
    return float(np.sqrt(float(np.sum(ep * ep)) + float(np.sum(eq * eq))))


def operator_cost(scenario: Scenario, x0: OpfVariables) -> float:
    """Production cost of the root imports plus the loss penalty."""
    total = 0.0
    for t in range(scenario.horizon.T):
        total += scenario.costs.production_cost(-float(x0.p0[t]), t)
    if scenario.costs.alpha_loss > 0:
        for n in scenario.network.non_root_ids:
            r = scenario.network.buses[n].R
            if r != 0.0:
                total += scenario.costs.alpha_loss * r * float(np.sum(x0.ell[n, :]))
    return total


def system_cost(scenario: Scenario, x0: OpfVariables, pc_by_agg: dict) -> float:
    """Operator cost plus every aggregator's local cost at the iterates.

    pc_by_agg maps aggregator id to {bus: consumption profile}, the
    decisions the local costs are written over.
    """
    total = operator_cost(scenario, x0)
    for agg in scenario.aggregators:
        total += scenario.costs.la_cost(agg.id, pc_by_agg.get(agg.id, {}))
    return total


def _sorted_aggs(scenario: Scenario):
    return sorted(scenario.aggregators, key=lambda a: a.id)


def _restrict(scenario: Scenario, agg, grid: np.ndarray) -> dict:
    T = scenario.horizon.T
    return {(n, t): float(grid[n, t]) for n in scenario.sorted_nodes(agg) for t in range(T)}


def check_message_locality(scenario: Scenario, messages) -> None:
    """Every coordinate an aggregator sees or reports lies on its own buses."""
    by_id = {a.id: a for a in scenario.aggregators}
    for msg in messages:
        if msg.kind in ("price-signal", "base-profile"):
            agent, peer = msg.receiver, msg.sender
        elif msg.kind == "profile-report":
            agent, peer = msg.sender, msg.receiver
        else:
            raise CoordinationError(f"round {msg.round}: unknown message kind {msg.kind!r}")
        if peer != "dso":
            raise CoordinationError(f"round {msg.round}: {msg.kind} not exchanged with the operator")
        agg = by_id.get(agent)
        if agg is None:
            raise CoordinationError(f"round {msg.round}: unknown aggregator {agent!r}")
        for entry in msg.payload.values():
            for n, _t in entry:
                if n not in agg.nodes:
                    raise CoordinationError(
                        f"round {msg.round}: {msg.kind} for {agent} leaks bus {n}"
                    )


# ---------------------------------------------------------------------------
# subproblems
# ---------------------------------------------------------------------------


def la_best_response(
    scenario: Scenario,
    agg_id: str,
    lambda_p: dict,
    lambda_q: dict,
    *,
    rho: float | None = None,
    base: tuple[dict, dict] | None = None,
    tol: float = DEFAULT_TOL,
) -> OpfSolution:
    """Aggregator subproblem at the given prices (plus an optional proximal
    pull towards base). Ties under pure linear prices go to the solver's
    interior-point center."""
    prog, index = build_la(scenario, agg_id, lambda_p, lambda_q, rho=rho, base=base)
    sol = solve_opf(prog, index, tol=tol)
    if sol.status != OPTIMAL:
        raise CoordinationError(f"aggregator {agg_id} subproblem is {sol.status}")
    return sol


def _relaxed_dso_program(scenario: Scenario, lp: np.ndarray, lq: np.ndarray, *, rho=None, x_A=None):
    """Operator subproblem with the coupling rows priced out.

    min over the network set of  phi0 - sum lambda*d  (+ rho/2 * ||x_A - d||^2)

    where d[n,t] is the delivered power, kept as explicit variables tied to
    the flows by equality rows so the quadratic stays diagonal.
    """
    net = scenario.network
    T = scenario.horizon.T
    b = ConicProgramBuilder()
    _network_vars(b, scenario)
    _network_rows(b, scenario, balances="root")
    _add_operator_cost(b, scenario)
    for t in range(T):
        for n in net.non_root_ids:
            bus = net.buses[n]
            b.add_var(("d_p", n, t))
            b.add_var(("d_q", n, t))
            p_row = {("d_p", n, t): 1.0, ("f", n, t): 1.0}
            q_row = {("d_q", n, t): 1.0, ("g", n, t): 1.0}
            if bus.G != 0.0:
                p_row[("v", n, t)] = bus.G
            if bus.B != 0.0:
                q_row[("v", n, t)] = -bus.B
            for m in net.children(n):
                child = net.buses[m]
                p_row[("f", m, t)] = -1.0
                q_row[("g", m, t)] = -1.0
                if child.R != 0.0:
                    p_row[("ell", m, t)] = child.R
                if child.X != 0.0:
                    q_row[("ell", m, t)] = child.X
            b.add_eq(("delivered_p", n, t), p_row, 0.0)
            b.add_eq(("delivered_q", n, t), q_row, 0.0)
            b.set_objective(("d_p", n, t), lin=-float(lp[n, t]))
            b.set_objective(("d_q", n, t), lin=-float(lq[n, t]))
            if rho is not None:
                pa = float(x_A[0][n, t])
                qa = float(x_A[1][n, t])
                b.set_objective(("d_p", n, t), lin=-rho * pa, quad=rho / 2.0)
                b.set_objective(("d_q", n, t), lin=-rho * qa, quad=rho / 2.0)
                b.add_objective_const(rho / 2.0 * (pa * pa + qa * qa))
    index = OpfIndex(scenario, "dso-relaxed", ())
    return b.build(), index


def _solve_relaxed_dso(scenario, lp, lq, *, rho=None, x_A=None, tol=DEFAULT_TOL):
    """Returns (status, x0 variables or None)."""
    prog, index = _relaxed_dso_program(scenario, lp, lq, rho=rho, x_A=x_A)
    sol = solve(prog, tol=tol)
    if sol.status != OPTIMAL:
        return sol.status, None
    return OPTIMAL, extract_variables(sol, index)


def _la_round(scenario, lp, lq, k, transcript, *, rho=None, base=None, tol=DEFAULT_TOL):
    """One synchronous round of aggregator responses at the given prices.

    Returns the assembled (p, q) grids and the per-aggregator consumption
    profiles the local costs are evaluated over. The blocks are disjoint,
    so this sequential sweep equals a concurrent one; the transcript is
    ordered by aggregator id within the round.
    """
    N = scenario.network.num_buses
    T = scenario.horizon.T
    xp = np.zeros((N, T))
    xq = np.zeros((N, T))
    pc_by_agg: dict[str, dict[int, np.ndarray]] = {}
    for agg in _sorted_aggs(scenario):
        lp_a = _restrict(scenario, agg, lp)
        lq_a = _restrict(scenario, agg, lq)
        transcript.append(
            Message("price-signal", k, "dso", agg.id, {"lambda_p": lp_a, "lambda_q": lq_a})
        )
        base_a = None
        if base is not None:
            base_a = (_restrict(scenario, agg, base[0]), _restrict(scenario, agg, base[1]))
            transcript.append(
                Message("base-profile", k, "dso", agg.id, {"p": base_a[0], "q": base_a[1]})
            )
        sol = la_best_response(scenario, agg.id, lp_a, lq_a, rho=rho, base=base_a, tol=tol)
        nodes = scenario.sorted_nodes(agg)
        for n in nodes:
            xp[n, :] = sol.vars.p[n, :]
            xq[n, :] = sol.vars.q[n, :]
        transcript.append(
            Message(
                "profile-report",
                k,
                agg.id,
                "dso",
                {
                    "p": {(n, t): float(xp[n, t]) for n in nodes for t in range(T)},
                    "q": {(n, t): float(xq[n, t]) for n in nodes for t in range(T)},
                },
            )
        )
        pc_by_agg[agg.id] = {n: sol.vars.pc[n, :].copy() for n in nodes}
    return (xp, xq), pc_by_agg


def _final_solution(scenario, x_A, tol) -> OpfSolution | None:
    prog, index = build_dso(scenario, x_A)
    sol = solve_opf(prog, index, tol=tol)
    return sol if sol.status == OPTIMAL else None


def _init_prices(scenario: Scenario, cfg: AlgoConfig) -> tuple[np.ndarray, np.ndarray]:
    shape = (scenario.network.num_buses, scenario.horizon.T)
    if np.isscalar(cfg.lambda0):
        lp = np.full(shape, float(cfg.lambda0))
        lq = np.full(shape, float(cfg.lambda0))
    else:
        lp = np.array(cfg.lambda0[0], dtype=float).reshape(shape)
        lq = np.array(cfg.lambda0[1], dtype=float).reshape(shape)
    lp[scenario.network.root_id, :] = 0.0
    lq[scenario.network.root_id, :] = 0.0
    return lp, lq


def _check_divergence(residuals: list[float]) -> None:
    """Both sides respond from compact sets, so a runaway price shows up as
    sustained residual growth, not a single spike; compare 50-round rolling
    means to stay quiet under bounded subgradient oscillation."""
    if len(residuals) < 100:
        return
    recent = float(np.mean(residuals[-50:]))
    before = float(np.mean(residuals[-100:-50]))
    if before > 0 and recent > 10.0 * before:
        raise CoordinationError(
            f"dual ascent diverging: mean residual grew from {before:.3e} to "
            f"{recent:.3e} over the last 100 rounds"
        )


class _Stopper:
    """Converged iff residual <= tol_primal and the objective moved by at
    most tol_obj, both holding for 5 consecutive rounds."""

    def __init__(self, tol_primal, tol_obj):
        self.tol_primal = tol_primal
        self.tol_obj = tol_obj
        self.prev_obj = None
        self.streak = 0

    def update(self, residual, objective) -> bool:
        stable = self.prev_obj is not None and abs(objective - self.prev_obj) <= self.tol_obj
        if residual <= self.tol_primal and stable:
            self.streak += 1
        else:
            self.streak = 0
        self.prev_obj = objective
        return self.streak >= 5


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_dual_ascent(scenario: Scenario, cfg: AlgoConfig) -> CoordinationResult:
    """Subgradient ascent on the coupling prices.

    Per round: the operator solves its priced-out subproblem, broadcasts
    the prices, the aggregators best-respond, and the prices move by
    alpha_k times the coupling residual. If a price vector leaves the
    operator subproblem unbounded, the last accepted step is halved and
    the round retried from the previous prices.
    """
    cfg.validate()
    scenario.validate()
    lp, lq = _init_prices(scenario, cfg)
    transcript: list[Message] = []
    logs: list[IterationLog] = []
    residuals: list[float] = []
    stopper = _Stopper(cfg.tol_primal, cfg.tol_obj)
    converged = False
    prev = None  # (lp, lq, rp, rq, alpha) of the last accepted update
    x0 = x_A = None
    for k in range(cfg.max_iter):
        status, x0 = _solve_relaxed_dso(scenario, lp, lq, tol=cfg.solver_tol)
        retries = 0
        while status == UNBOUNDED:
            if prev is None:
                raise CoordinationError("initial prices leave the operator subproblem unbounded")
            if retries >= 60:
                raise CoordinationError("operator subproblem stayed unbounded while shrinking the step")
            lp0, lq0, rp, rq, alpha = prev
            alpha = alpha / 2.0
            prev = (lp0, lq0, rp, rq, alpha)
            lp = lp0 + alpha * rp
            lq = lq0 + alpha * rq
            status, x0 = _solve_relaxed_dso(scenario, lp, lq, tol=cfg.solver_tol)
            retries += 1
        if status != OPTIMAL:
            raise CoordinationError(f"operator subproblem is {status}")
        x_A, pc_by_agg = _la_round(scenario, lp, lq, k, transcript, tol=cfg.solver_tol)
        dp, dq = delivered(scenario, x0)
        rp = x_A[0] - dp
        rq = x_A[1] - dq
        residual = float(np.sqrt(float(np.sum(rp * rp)) + float(np.sum(rq * rq))))
        objective = system_cost(scenario, x0, pc_by_agg)
        residuals.append(residual)
        _check_divergence(residuals)
        alpha = cfg.step_size(k)
        prev = (lp.copy(), lq.copy(), rp, rq, alpha)
        lp = lp + alpha * rp
        lq = lq + alpha * rq
        logs.append(
            IterationLog(k, lp.copy(), lq.copy(), (x_A[0].copy(), x_A[1].copy()), residual, objective)
        )
        if stopper.update(residual, objective):
            converged = True
            break
    return CoordinationResult(
        logs,
        lp,
        lq,
        x_A,
        x0,
        converged,
        _final_solution(scenario, x_A, cfg.solver_tol),
        transcript,
    )


def run_admm(scenario: Scenario, cfg: AlgoConfig) -> CoordinationResult:
    """Alternating proximal best responses with dual step rho.

    Per round: each aggregator receives the prices and the power its buses
    were last delivered (the base profile) and minimizes its cost plus the
    price exposure plus a rho/2 pull towards the base; the operator then
    re-dispatches against the fresh reports under the same quadratic; the
    prices move by rho times the remaining residual.
    """
    cfg.validate()
    scenario.validate()
    lp, lq = _init_prices(scenario, cfg)
    transcript: list[Message] = []
    logs: list[IterationLog] = []
    stopper = _Stopper(cfg.tol_primal, cfg.tol_obj)
    converged = False
    status, x0 = _solve_relaxed_dso(scenario, lp, lq, tol=cfg.solver_tol)
    if status != OPTIMAL:
        raise CoordinationError(f"operator subproblem is {status} at the initial prices")
    x_A = None
    for k in range(cfg.max_iter):
        base = delivered(scenario, x0)
        x_A, pc_by_agg = _la_round(
            scenario, lp, lq, k, transcript, rho=cfg.rho, base=base, tol=cfg.solver_tol
        )
        status, x0 = _solve_relaxed_dso(
            scenario, lp, lq, rho=cfg.rho, x_A=x_A, tol=cfg.solver_tol
        )
        if status != OPTIMAL:
            raise CoordinationError(f"operator subproblem is {status} at round {k}")
        dp, dq = delivered(scenario, x0)
        rp = x_A[0] - dp
        rq = x_A[1] - dq
        residual = float(np.sqrt(float(np.sum(rp * rp)) + float(np.sum(rq * rq))))
        objective = system_cost(scenario, x0, pc_by_agg)
        lp = lp + cfg.rho * rp
        lq = lq + cfg.rho * rq
        logs.append(
            IterationLog(k, lp.copy(), lq.copy(), (x_A[0].copy(), x_A[1].copy()), residual, objective)
        )
        if stopper.update(residual, objective):
            converged = True
            break
    return CoordinationResult(
        logs,
        lp,
        lq,
        x_A,
        x0,
        converged,
        _final_solution(scenario, x_A, cfg.solver_tol),
        transcript,
    )


def run_pdgs(scenario: Scenario, cfg: AlgoConfig) -> CoordinationResult:
    """Primal-dual averaging with a truncated-dual fallback.

    Per round: aggregators best-respond to the averaged prices; their
    reports fold into the running average profile; the operator prices
    that profile exactly when servable (giving an exactly feasible pair)
    and otherwise falls back to the always-feasible variant whose balance
    duals are clipped to [-K, K]; the fresh duals fold into the price
    average.
    """
    cfg.validate()
    scenario.validate()
    lp, lq = _init_prices(scenario, cfg)
    xp = np.zeros_like(lp)
    xq = np.zeros_like(lq)
    pc_avg: dict[str, dict[int, np.ndarray]] = {}
    transcript: list[Message] = []
    logs: list[IterationLog] = []
    stopper = _Stopper(cfg.tol_primal, cfg.tol_obj)
    converged = False
    x0 = None
    for k in range(cfg.max_iter):
        (rp, rq), pc_by_agg = _la_round(scenario, lp, lq, k, transcript, tol=cfg.solver_tol)
        xp = rp if k == 0 else (k * xp + rp) / (k + 1)
        xq = rq if k == 0 else (k * xq + rq) / (k + 1)
        for agg_id, profiles in pc_by_agg.items():
            if k == 0:
                pc_avg[agg_id] = {n: prof.copy() for n, prof in profiles.items()}
            else:
                for n, prof in profiles.items():
                    pc_avg[agg_id][n] = (k * pc_avg[agg_id][n] + prof) / (k + 1)
        prog, index = build_dso(scenario, (xp, xq))
        sol = solve_opf(prog, index, tol=cfg.solver_tol)
        feasible = sol.status == OPTIMAL
        if not feasible:
            if sol.status == UNBOUNDED:
                raise CoordinationError("operator re-solve reported unbounded")
            prog, index = build_dso_truncated(scenario, (xp, xq), cfg.K)
            sol = solve_opf(prog, index, tol=cfg.solver_tol)
            if sol.status != OPTIMAL:
                raise CoordinationError(f"truncated operator subproblem is {sol.status}")
        x0 = sol.vars
        lt_p, lt_q = sol.dlmps.lp, sol.dlmps.lq
        lp = lt_p.copy() if k == 0 else (k * lp + lt_p) / (k + 1)
        lq = lt_q.copy() if k == 0 else (k * lq + lt_q) / (k + 1)
        residual = primal_residual(scenario, x0, (xp, xq))
        objective = system_cost(scenario, x0, pc_avg)
        logs.append(
            IterationLog(k, lp.copy(), lq.copy(), (xp.copy(), xq.copy()), residual, objective, feasible)
        )
        if stopper.update(residual, objective):
            converged = True
            break
    return CoordinationResult(
        logs,
        lp,
        lq,
        (xp, xq),
        x0,
        converged,
        _final_solution(scenario, (xp, xq), cfg.solver_tol),
        transcript,
    )


def coordinate(scenario: Scenario, cfg: AlgoConfig) -> CoordinationResult:
    """Dispatch on cfg.algo."""
    cfg.validate()
    runner = {
        "dual-ascent": run_dual_ascent,
        "admm": run_admm,
        "pdgs": run_pdgs,
    }[cfg.algo]
    return runner(scenario, cfg)
