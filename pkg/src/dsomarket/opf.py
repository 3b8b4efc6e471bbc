"""Multi-period branch-flow OPF programs on radial feeders.

Builds the centralized market-clearing program, the operator-only program
with fixed net loads, its penalty-slacked variant, and the per-aggregator
subproblems, all over the conic layer. Extraction routines map equality
duals back to locational marginal prices (active and reactive, per bus and
period) and label the remaining multipliers.

Conventions, fixed once here:
    - line n runs from bus n to its ancestor; f, g, ell live on bus n and
      f, g are measured at the sending end n, so the ancestor receives
      f - R*ell and g - X*ell;
    - nodal balance rows are written so that their equality dual is the
      marginal cost of one extra unit of net consumption at that bus, i.e.
      the DLMP directly;
    - the root has no line variables (f0 = g0 = 0) and its net load p0 is
      nonpositive: the feeder head produces -p0 at cost c_t(-p0).

Row and cone ids (stable across all builders, used by extract_dlmps):
    ("p_balance", n, t)   active nodal balance, dual = lambda_p
    ("q_balance", n, t)   reactive nodal balance, dual = lambda_q
    ("volt_drop", n, t)   voltage propagation along line n, dual = beta
    ("net_p", n, t)       p = pc - pg
    ("net_q", n, t)       q = tau*pc - qg
    ("energy", n)         sum_t pc >= E via nonnegative slack, dual = alpha
    ("flow_cone", n, t)   rotated cone f^2 + g^2 <= v*ell, scalar dual gamma
    ("cap_send", n, t)    ||(f, g)|| <= S, scalar dual eta_plus
    ("cap_recv", n, t)    ||(f-R*ell, g-X*ell)|| <= S, scalar dual eta_minus
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import (
    DEFAULT_TOL,
    OPTIMAL,
    ConicError,
    ConicProgram,
    ConicProgramBuilder,
    ConicSolution,
    solve,
)
from .network import Network
from .scenario import Scenario


class OpfError(ValueError):
    """Raised on malformed inputs to the OPF builders/extractors."""


# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------


@dataclass
class OpfIndex:
    """What a program was built from; extraction keys off this.

    kind is one of "central", "dso", "dso-truncated", "la". x_A holds the
    fixed (p, q) profiles for the dso kinds; agg_id and price dicts are set
    for "la"; K for "dso-truncated".
    """

    scenario: Scenario
    kind: str
    buses: tuple[int, ...]  # buses whose LA-side variables exist
    x_A: tuple[np.ndarray, np.ndarray] | None = None
    agg_id: str | None = None
    K: float | None = None

    @property
    def network(self) -> Network:
        return self.scenario.network

    @property
    def T(self) -> int:
        return self.scenario.horizon.T

    @property
    def N(self) -> int:
        return self.scenario.network.num_buses


@dataclass
class OpfVariables:
    """Primal solution arrays, shape (T,) for the root and (N, T) per bus.

    Rows for quantities a bus does not have (line vars at the root,
    pg/qg without a DER) are zero.
    """

    p0: np.ndarray
    q0: np.ndarray
    v: np.ndarray
    ell: np.ndarray
    f: np.ndarray
    g: np.ndarray
    pc: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    p: np.ndarray
    q: np.ndarray


@dataclass
class DlmpSet:
    """Locational marginal prices per bus (root included) and period."""

    lp: np.ndarray
    lq: np.ndarray


@dataclass
class DualSet:
    """Remaining labeled multipliers of an optimal solve.

    Array entries are zero where the constraint does not exist. la_alpha
    and the nu bounds are populated only when the program contained the
    aggregator-side constraints.
    """

    beta: np.ndarray
    gamma: np.ndarray
    eta_plus: np.ndarray
    eta_minus: np.ndarray
    sigma_lo: np.ndarray
    sigma_hi: np.ndarray
    la_alpha: dict[int, float] = field(default_factory=dict)
    nu_lo: dict[tuple[int, int], float] = field(default_factory=dict)
    nu_hi: dict[tuple[int, int], float] = field(default_factory=dict)


@dataclass
class OpfSolution:
    status: str
    objective_value: float | None
    vars: OpfVariables | None
    dlmps: DlmpSet | None
    duals: DualSet | None
    index: OpfIndex
    conic: ConicSolution


@dataclass
class ExactnessReport:
    """A-posteriori relaxation tightness: gap = v*ell - (f^2 + g^2)."""

    max_gap: float
    binding_map: dict[tuple[int, int], float]  # non-tight (n, t) -> gap
    is_exact: bool


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _ell_ceiling(sc: Scenario) -> float:
    # generous squared-current ceiling for lines with R = X = 0, where
    # nothing else bounds ell from above; loose enough to never bind
    total = 0.0
    for load in sc.loads.values():
        total += max(abs(min(load.Pmin)), abs(max(load.Pmax)))
    for der in sc.ders.values():
        total += max(der.Pavail)
    vmin = min(b.Vmin for b in sc.network.buses)
    return max(1.0, (4.0 * total) ** 2 / vmin)


def _network_vars(b: ConicProgramBuilder, sc: Scenario, *, slack_K=None):
    """Operator-side variables: root injections, voltages, line flows.

    slack_K: when set, every non-root balance row will get a
    +u_plus - u_minus slack pair penalized at slack_K each, which keeps
    the program feasible for any fixed profile and clips the balance
    duals to [-K, K].
    """
    net = sc.network
    T = sc.horizon.T
    ell_cap = None
    for t in range(T):
        b.add_var(("p0", t), ub=0.0)
        b.add_var(("q0", t))
        for n in range(net.num_buses):
            bus = net.buses[n]
            b.add_var(("v", n, t), lb=bus.Vmin, ub=bus.Vmax)
            if n == net.root_id:
                continue
            b.add_var(("f", n, t))
            b.add_var(("g", n, t))
            if bus.R == 0.0 and bus.X == 0.0:
                if ell_cap is None:
                    ell_cap = _ell_ceiling(sc)
                b.add_var(("ell", n, t), lb=0.0, ub=ell_cap)
            else:
                b.add_var(("ell", n, t), lb=0.0)
    if slack_K is not None:
        for t in range(T):
            for n in net.non_root_ids:
                for kind in ("p", "q"):
                    b.add_var(("u+", kind, n, t), lb=0.0)
                    b.add_var(("u-", kind, n, t), lb=0.0)
                    b.set_objective(("u+", kind, n, t), slack_K)
                    b.set_objective(("u-", kind, n, t), slack_K)


def _network_rows(b: ConicProgramBuilder, sc: Scenario, *, fixed=None, slack_K=None, balances="all"):
    """Balances, voltage propagation, and the three cone families.

    fixed: optional (p, q) arrays of shape (N, T); when given, non-root
    net loads enter the balance rhs as constants instead of variables.
    balances="root": emit only the root balance rows (the non-root rows are
    the coupling constraints, which price-based relaxations move into the
    objective instead).
    """
    net = sc.network
    T = sc.horizon.T
    for t in range(T):
        for n in range(net.num_buses):
            if balances == "root" and n != net.root_id:
                continue
            bus = net.buses[n]
            p_row: dict = {}
            q_row: dict = {}
            for m in net.children(n):
                child = net.buses[m]
                p_row[("f", m, t)] = 1.0
                q_row[("g", m, t)] = 1.0
                if child.R != 0.0:
                    p_row[("ell", m, t)] = -child.R
                if child.X != 0.0:
                    q_row[("ell", m, t)] = -child.X
            if n == net.root_id:
                p_row[("p0", t)] = -1.0
                q_row[("q0", t)] = -1.0
            else:
                p_row[("f", n, t)] = -1.0
                q_row[("g", n, t)] = -1.0
            if bus.G != 0.0:
                p_row[("v", n, t)] = p_row.get(("v", n, t), 0.0) - bus.G
            if bus.B != 0.0:
                q_row[("v", n, t)] = q_row.get(("v", n, t), 0.0) + bus.B
            p_rhs = q_rhs = 0.0
            if n != net.root_id:
                if fixed is not None:
                    p_rhs = float(fixed[0][n, t])
                    q_rhs = float(fixed[1][n, t])
                else:
                    p_row[("p", n, t)] = -1.0
                    q_row[("q", n, t)] = -1.0
                if slack_K is not None:
                    p_row[("u+", "p", n, t)] = 1.0
                    p_row[("u-", "p", n, t)] = -1.0
                    q_row[("u+", "q", n, t)] = 1.0
                    q_row[("u-", "q", n, t)] = -1.0
            b.add_eq(("p_balance", n, t), p_row, p_rhs)
            b.add_eq(("q_balance", n, t), q_row, q_rhs)

        for n in net.non_root_ids:
            bus = net.buses[n]
            a = net.ancestor(n)
            b.add_eq(
                ("volt_drop", n, t),
                {
                    ("f", n, t): 2.0 * bus.R,
                    ("g", n, t): 2.0 * bus.X,
                    ("ell", n, t): -(bus.R**2 + bus.X**2),
                    ("v", a, t): 1.0,
                    ("v", n, t): -1.0,
                },
                0.0,
            )
            b.add_rsoc(
                ("flow_cone", n, t),
                [({("f", n, t): 1.0}, 0.0), ({("g", n, t): 1.0}, 0.0)],
                ({("v", n, t): 1.0}, 0.0),
                ({("ell", n, t): 1.0}, 0.0),
            )
            if bus.S > 0 and np.isfinite(bus.S):
                b.add_soc(
                    ("cap_send", n, t),
                    [({("f", n, t): 1.0}, 0.0), ({("g", n, t): 1.0}, 0.0)],
                    ({}, bus.S),
                )
                b.add_soc(
                    ("cap_recv", n, t),
                    [
                        ({("f", n, t): 1.0, ("ell", n, t): -bus.R}, 0.0),
                        ({("g", n, t): 1.0, ("ell", n, t): -bus.X}, 0.0),
                    ],
                    ({}, bus.S),
                )


def _add_operator_cost(b: ConicProgramBuilder, sc: Scenario):
    costs = sc.costs
    T = sc.horizon.T
    for t in range(T):
        # c_t(-p0) = -alpha*p0 + beta*p0^2
        b.set_objective(("p0", t), lin=-costs.alpha[t], quad=costs.beta[t])
    if costs.alpha_loss > 0:
        for t in range(T):
            for n in sc.network.non_root_ids:
                r = sc.network.buses[n].R
                if r != 0.0:
                    b.set_objective(("ell", n, t), lin=costs.alpha_loss * r)


def _add_la_block(b: ConicProgramBuilder, sc: Scenario, buses):
    """Aggregator-side variables and constraints for the given buses."""
    T = sc.horizon.T
    for n in buses:
        load = sc.loads.get(n)
        der = sc.ders.get(n)
        for t in range(T):
            if load is not None:
                b.add_var(("pc", n, t), lb=load.Pmin[t], ub=load.Pmax[t])
            if der is not None:
                b.add_var(("pg", n, t), lb=0.0, ub=der.Pavail[t])
                b.add_var(("qg", n, t))
            qlb = load.Qmin[t] if load is not None and load.Qmin is not None else -np.inf
            qub = load.Qmax[t] if load is not None and load.Qmax is not None else np.inf
            b.add_var(("p", n, t))
            b.add_var(("q", n, t), lb=qlb, ub=qub)
            p_row = {("p", n, t): -1.0}
            q_row = {("q", n, t): -1.0}
            if load is not None:
                p_row[("pc", n, t)] = 1.0
                if load.tau_c != 0.0:
                    q_row[("pc", n, t)] = load.tau_c
            if der is not None:
                p_row[("pg", n, t)] = -1.0
                q_row[("qg", n, t)] = -1.0
            b.add_eq(("net_p", n, t), p_row, 0.0)
            b.add_eq(("net_q", n, t), q_row, 0.0)
        if load is not None:
            b.add_var(("e_slack", n), lb=0.0)
            row = {("pc", n, t): 1.0 for t in range(T)}
            row[("e_slack", n)] = -1.0
            b.add_eq(("energy", n), row, load.E)
        if der is not None:
            if der.rho_min == der.rho_max:
                for t in range(T):
                    b.add_eq(
                        ("der_q", n, t),
                        {("qg", n, t): 1.0, ("pg", n, t): -der.rho_min},
                        0.0,
                    )
            else:
                for t in range(T):
                    b.add_var(("sq_lo", n, t), lb=0.0)
                    b.add_var(("sq_hi", n, t), lb=0.0)
                    b.add_eq(
                        ("der_q_lo", n, t),
                        {
                            ("qg", n, t): 1.0,
                            ("pg", n, t): -der.rho_min,
                            ("sq_lo", n, t): -1.0,
                        },
                        0.0,
                    )
                    b.add_eq(
                        ("der_q_hi", n, t),
                        {
                            ("qg", n, t): -1.0,
                            ("pg", n, t): der.rho_max,
                            ("sq_hi", n, t): -1.0,
                        },
                        0.0,
                    )


def _add_la_costs(b: ConicProgramBuilder, sc: Scenario, agg_ids):
    for agg_id in agg_ids:
        cost = sc.costs.la_costs.get(agg_id)
        if cost is None:
            continue
        for n, targets in cost.target.items():
            for t in range(sc.horizon.T):
                # w*(pc - target)^2 expanded around the diagonal quad form
                b.set_objective(("pc", n, t), lin=-2.0 * cost.weight * targets[t], quad=cost.weight)
                b.add_objective_const(cost.weight * targets[t] ** 2)


def build_central(scenario: Scenario) -> tuple[ConicProgram, OpfIndex]:
    """Full market-clearing program: operator cost + aggregator costs,
    network and aggregator constraints together."""
    scenario.validate()
    all_buses = list(scenario.network.non_root_ids)
    b = ConicProgramBuilder()
    _network_vars(b, scenario)
    _add_la_block(b, scenario, all_buses)
    _network_rows(b, scenario)
    _add_operator_cost(b, scenario)
    _add_la_costs(b, scenario, [a.id for a in scenario.aggregators])
    index = OpfIndex(scenario, "central", tuple(all_buses))
    return b.build(), index


def _check_profiles(scenario: Scenario, x_A) -> tuple[np.ndarray, np.ndarray]:
    p, q = x_A
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    shape = (scenario.network.num_buses, scenario.horizon.T)
    if p.shape != shape or q.shape != shape:
        raise OpfError(f"fixed profiles must have shape {shape}, got {p.shape} / {q.shape}")
    return p, q


def build_dso(scenario: Scenario, x_A) -> tuple[ConicProgram, OpfIndex]:
    """Operator program with net loads frozen at x_A = (p, q) arrays.

    The balance duals of this program are the prices the fixed profiles
    would face; its optimal value as a function of x_A is the operator
    cost-to-serve.
    """
    p, q = _check_profiles(scenario, x_A)
    b = ConicProgramBuilder()
    _network_vars(b, scenario)
    _network_rows(b, scenario, fixed=(p, q))
    _add_operator_cost(b, scenario)
    index = OpfIndex(scenario, "dso", (), x_A=(p, q))
    return b.build(), index


def build_dso_truncated(scenario: Scenario, x_A, K: float) -> tuple[ConicProgram, OpfIndex]:
    """Always-feasible variant of build_dso: slack pairs on every non-root
    balance row, each charged K per unit, so balance duals live in [-K, K]."""
    if K <= 0:
        raise OpfError("penalty K must be positive")
    p, q = _check_profiles(scenario, x_A)
    b = ConicProgramBuilder()
    _network_vars(b, scenario, slack_K=float(K))
    _network_rows(b, scenario, fixed=(p, q), slack_K=float(K))
    _add_operator_cost(b, scenario)
    index = OpfIndex(scenario, "dso-truncated", (), x_A=(p, q), K=float(K))
    return b.build(), index


def build_la(
    scenario: Scenario,
    agg_id: str,
    lambda_p: dict[tuple[int, int], float],
    lambda_q: dict[tuple[int, int], float],
    *,
    rho: float | None = None,
    base: tuple[dict, dict] | None = None,
) -> tuple[ConicProgram, OpfIndex]:
    """Aggregator best-response program: own cost plus price exposure.

    lambda_p / lambda_q must cover exactly the aggregator's (bus, period)
    grid. With rho and base = (p_base, q_base) dicts over the same keys,
    adds the proximal term (rho/2)*((p - p_base)^2 + (q - q_base)^2).
    """
    agg = scenario.aggregator(agg_id)
    buses = sorted(agg.nodes)
    T = scenario.horizon.T
    keys = {(n, t) for n in buses for t in range(T)}
    if set(lambda_p) != keys or set(lambda_q) != keys:
        raise OpfError(f"price signal for {agg_id} must cover exactly its (bus, period) grid")
    b = ConicProgramBuilder()
    _add_la_block(b, scenario, buses)
    _add_la_costs(b, scenario, [agg_id])
    for n, t in sorted(keys):
        b.set_objective(("p", n, t), lin=float(lambda_p[n, t]))
        b.set_objective(("q", n, t), lin=float(lambda_q[n, t]))
    if rho is not None:
        if base is None:
            raise OpfError("proximal term needs a base profile")
        p_base, q_base = base
        for n, t in sorted(keys):
            b.set_objective(("p", n, t), lin=-rho * float(p_base[n, t]), quad=rho / 2.0)
            b.set_objective(("q", n, t), lin=-rho * float(q_base[n, t]), quad=rho / 2.0)
            b.add_objective_const(rho / 2.0 * (float(p_base[n, t]) ** 2 + float(q_base[n, t]) ** 2))
    index = OpfIndex(scenario, "la", tuple(buses), agg_id=agg_id)
    return b.build(), index


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def _grid(index: OpfIndex, fill=0.0) -> np.ndarray:
    return np.full((index.N, index.T), fill, dtype=float)


def extract_variables(sol: ConicSolution, index: OpfIndex) -> OpfVariables:
    if sol.status != OPTIMAL:
        raise OpfError("variable extraction requires an optimal solution")
    net = index.network
    T = index.T
    val = sol.primal.get
    p0 = np.array([val(("p0", t), 0.0) for t in range(T)])
    q0 = np.array([val(("q0", t), 0.0) for t in range(T)])
    grids = {name: _grid(index) for name in ("v", "ell", "f", "g", "pc", "pg", "qg", "p", "q")}
    for t in range(T):
        for n in range(net.num_buses):
            for name, grid in grids.items():
                grid[n, t] = val((name, n, t), 0.0)
    v, ell, f, g, pc, pg, qg, p, q = (
        grids[k] for k in ("v", "ell", "f", "g", "pc", "pg", "qg", "p", "q")
    )
    if index.kind in ("dso", "dso-truncated") and index.x_A is not None:
        p, q = index.x_A[0].copy(), index.x_A[1].copy()
        p[net.root_id, :] = 0.0
        q[net.root_id, :] = 0.0
    return OpfVariables(p0, q0, v, ell, f, g, pc, pg, qg, p, q)


def extract_dlmps(sol: ConicSolution, index: OpfIndex) -> tuple[DlmpSet, DualSet]:
    """Label the duals of an optimal solve.

    Balance duals become the prices; voltage, cone, and capacity duals are
    rescaled to the scalar multipliers of the scalarized constraints
    (gamma multiplies f^2+g^2-v*ell, eta the f^2+g^2-S^2 form), which is
    what the ancestor-identity check consumes.
    """
    if sol.status != OPTIMAL:
        raise OpfError("dual extraction requires an optimal solution")
    net = index.network
    T = index.T
    lp = _grid(index)
    lq = _grid(index)
    beta = _grid(index)
    gamma = _grid(index)
    eta_p = _grid(index)
    eta_m = _grid(index)
    sig_lo = _grid(index)
    sig_hi = _grid(index)
    has_network = index.kind != "la"
    for t in range(T):
        for n in range(net.num_buses):
            if has_network:
                try:
                    lp[n, t] = sol.eq_duals[("p_balance", n, t)]
                    lq[n, t] = sol.eq_duals[("q_balance", n, t)]
                except KeyError as exc:
                    raise OpfError(f"balance row missing for bus {n}, period {t}") from exc
                lo, hi = sol.bound_duals.get(("v", n, t), (0.0, 0.0))
                sig_lo[n, t] = lo
                sig_hi[n, t] = hi
            if n == net.root_id or not has_network:
                continue
            beta[n, t] = sol.eq_duals[("volt_drop", n, t)]
            cone = sol.cone_duals.get(("flow_cone", n, t))
            if cone is not None:
                v = sol.primal[("v", n, t)]
                ell = sol.primal[("ell", n, t)]
                gamma[n, t] = (cone.w1_dual + cone.w2_dual) / (v + ell)
            cap = sol.cone_duals.get(("cap_send", n, t))
            if cap is not None:
                eta_p[n, t] = cap.z0 / (2.0 * net.buses[n].S)
            cap = sol.cone_duals.get(("cap_recv", n, t))
            if cap is not None:
                eta_m[n, t] = cap.z0 / (2.0 * net.buses[n].S)
    la_alpha: dict[int, float] = {}
    nu_lo: dict[tuple[int, int], float] = {}
    nu_hi: dict[tuple[int, int], float] = {}
    for n in index.buses:
        if ("energy", n) in sol.eq_duals:
            la_alpha[n] = sol.eq_duals[("energy", n)]
        for t in range(T):
            if ("pc", n, t) in sol.bound_duals:
                lo, hi = sol.bound_duals[("pc", n, t)]
                nu_lo[n, t] = lo
                nu_hi[n, t] = hi
    return DlmpSet(lp, lq), DualSet(
        beta, gamma, eta_p, eta_m, sig_lo, sig_hi, la_alpha, nu_lo, nu_hi
    )


def solve_opf(program: ConicProgram, index: OpfIndex, tol: float = DEFAULT_TOL) -> OpfSolution:
    sol = solve(program, tol=tol)
    if sol.status != OPTIMAL:
        return OpfSolution(sol.status, None, None, None, None, index, sol)
    vars_ = extract_variables(sol, index)
    dlmps: DlmpSet | None = None
    duals: DualSet | None = None
    if index.kind != "la":
        dlmps, duals = extract_dlmps(sol, index)
    else:
        _, duals = extract_dlmps(sol, index)
    return OpfSolution(sol.status, sol.objective_value, vars_, dlmps, duals, index, sol)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def check_exactness(solution: OpfSolution, tol: float = 1e-6) -> ExactnessReport:
    """Gap of the relaxed current equation per line and period."""
    if solution.vars is None:
        raise OpfError("exactness check requires an optimal solution")
    x = solution.vars
    net = solution.index.network
    gaps: dict[tuple[int, int], float] = {}
    max_gap = 0.0
    for t in range(solution.index.T):
        for n in net.non_root_ids:
            gap = x.v[n, t] * x.ell[n, t] - (x.f[n, t] ** 2 + x.g[n, t] ** 2)
            max_gap = max(max_gap, gap)
            if gap > tol:
                gaps[n, t] = gap
    return ExactnessReport(max_gap=max_gap, binding_map=gaps, is_exact=max_gap <= tol)


@dataclass
class AncestorIdentityReport:
    res_p: dict[tuple[int, int], float]
    res_q: dict[tuple[int, int], float]
    max_residual: float


def check_dlmp_ancestor_identity(solution: OpfSolution, tol: float = 1e-5) -> AncestorIdentityReport:
    """Price of a bus minus its predicted value from the ancestor's price.

    Prediction per line n: lambda at n equals lambda at the ancestor,
    shifted by the voltage multiplier through 2*beta*R and pulled by the
    congestion and cone terms -2f*gamma - 2f*eta+ - 2(f-R*ell)*eta-
    (reactive analog with X and g).
    """
    if solution.vars is None or solution.dlmps is None or solution.duals is None:
        raise OpfError("identity check requires dlmps and duals")
    x, lam, du = solution.vars, solution.dlmps, solution.duals
    net = solution.index.network
    res_p: dict[tuple[int, int], float] = {}
    res_q: dict[tuple[int, int], float] = {}
    worst = 0.0
    for t in range(solution.index.T):
        for n in net.non_root_ids:
            a = net.ancestor(n)
            bus = net.buses[n]
            f, g, ell = x.f[n, t], x.g[n, t], x.ell[n, t]
            pred_p = (
                lam.lp[a, t]
                - 2.0 * f * du.gamma[n, t]
                - 2.0 * f * du.eta_plus[n, t]
                - 2.0 * (f - bus.R * ell) * du.eta_minus[n, t]
                + 2.0 * du.beta[n, t] * bus.R
            )
            pred_q = (
                lam.lq[a, t]
                - 2.0 * g * du.gamma[n, t]
                - 2.0 * g * du.eta_plus[n, t]
                - 2.0 * (g - bus.X * ell) * du.eta_minus[n, t]
                + 2.0 * du.beta[n, t] * bus.X
            )
            res_p[n, t] = abs(lam.lp[n, t] - pred_p)
            res_q[n, t] = abs(lam.lq[n, t] - pred_q)
            worst = max(worst, res_p[n, t], res_q[n, t])
    return AncestorIdentityReport(res_p, res_q, worst)


@dataclass
class SubgradientEntry:
    bus: int
    period: int
    lam: float
    fd: float | None
    rel_err: float | None
    one_sided: bool = False
    skipped: bool = False


@dataclass
class SubgradientReport:
    entries: list[SubgradientEntry]

    @property
    def max_rel_err(self) -> float:
        errs = [e.rel_err for e in self.entries if e.rel_err is not None]
        return max(errs) if errs else 0.0


def check_subgradient(
    scenario: Scenario,
    x_A,
    dlmps: DlmpSet,
    eps: float = 1e-4,
    kind: str = "p",
    tol: float = DEFAULT_TOL,
) -> SubgradientReport:
    """Finite-difference test of prices as sensitivities of the operator's
    cost-to-serve: F(x +- eps*e) from two fixed-profile solves per entry.

    Coordinates whose perturbation is infeasible on one side fall back to
    a one-sided difference; infeasible on both sides are skipped.
    """
    if kind not in ("p", "q"):
        raise OpfError("kind must be 'p' or 'q'")
    p, q = _check_profiles(scenario, x_A)
    net = scenario.network

    def value(pp, qq):
        prog, idx = build_dso(scenario, (pp, qq))
        sol = solve(prog, tol=tol)
        return sol.objective_value if sol.status == OPTIMAL else None

    entries = []
    for t in range(scenario.horizon.T):
        for n in net.non_root_ids:
            lam = dlmps.lp[n, t] if kind == "p" else dlmps.lq[n, t]
            up_p, up_q = p.copy(), q.copy()
            dn_p, dn_q = p.copy(), q.copy()
            if kind == "p":
                up_p[n, t] += eps
                dn_p[n, t] -= eps
            else:
                up_q[n, t] += eps
                dn_q[n, t] -= eps
            f_up = value(up_p, up_q)
            f_dn = value(dn_p, dn_q)
            f_mid = None
            if f_up is None or f_dn is None:
                f_mid = value(p, q)
            if f_up is not None and f_dn is not None:
                fd = (f_up - f_dn) / (2.0 * eps)
                one_sided = False
            elif f_up is not None and f_mid is not None:
                fd = (f_up - f_mid) / eps
                one_sided = True
            elif f_dn is not None and f_mid is not None:
                fd = (f_mid - f_dn) / eps
                one_sided = True
            else:
                entries.append(SubgradientEntry(n, t, lam, None, None, skipped=True))
                continue
            rel = abs(fd - lam) / max(abs(lam), abs(fd), 1e-6)
            entries.append(SubgradientEntry(n, t, lam, fd, rel, one_sided=one_sided))
    return SubgradientReport(entries)


@dataclass
class SufficientConditionsReport:
    """Evaluation of the two published sufficient-exactness condition sets.

    Set one: objective convex (true by construction), strictly increasing
    in squared currents, independent of flows, plus either free upper
    consumption bounds or non-binding production lower bounds.
    Set two: strictly increasing root production cost, no shunts,
    linearized voltages below their caps at the given optimum, and the
    positivity of the path matrix products built from lower-bound loads.
    """

    increasing_in_ell: bool
    independent_of_flows: bool
    consumption_branch: bool
    production_branch: bool
    thm1_holds: bool
    root_cost_increasing: bool
    no_shunts: bool
    vhat_below_cap: bool
    path_products_positive: bool
    thm2_holds: bool
    f_hat: np.ndarray | None = None
    g_hat: np.ndarray | None = None
    v_hat: np.ndarray | None = None
    min_path_product: float | None = None
    notes: list[str] = field(default_factory=list)


def _linearized_flows(net: Network, profile: np.ndarray) -> np.ndarray:
    """f_hat[n, t] = -(subtree sum of the profile below and including n)."""
    out = np.zeros_like(profile)
    for n in net.non_root_ids:
        for m in net.subtree(n):
            out[n] -= profile[m]
    return out


def check_sufficient_conditions(
    scenario: Scenario, solution: OpfSolution | None = None
) -> SufficientConditionsReport:
    net = scenario.network
    T = scenario.horizon.T
    costs = scenario.costs
    notes: list[str] = []

    increasing_in_ell = costs.alpha_loss > 0 and all(
        net.buses[n].R > 0 for n in net.non_root_ids
    )
    independent_of_flows = True  # structural: no cost term touches f or g
    zero_la_costs = len(costs.la_costs) == 0
    free_upper = all(
        all(np.isinf(load.Pmax)) for load in scenario.loads.values()
    ) and all(load.Qmax is None or all(np.isinf(load.Qmax)) for load in scenario.loads.values())
    consumption_branch = zero_la_costs and free_upper
    production_branch = len(scenario.ders) == 0
    if scenario.ders and solution is not None and solution.vars is not None:
        production_branch = all(
            solution.vars.pg[n, t] > 1e-7
            and solution.vars.qg[n, t] - der.rho_min * solution.vars.pg[n, t] > 1e-9
            for n, der in scenario.ders.items()
            for t in range(T)
        )
        if not production_branch:
            notes.append("production lower bounds binding at the optimum")
    thm1 = increasing_in_ell and independent_of_flows and (consumption_branch or production_branch)

    root_cost_increasing = all(
        costs.alpha[t] > 0 or costs.beta[t] > 0 for t in range(T)
    )
    no_shunts = all(b.G == 0 and b.B == 0 for b in net.buses)

    if solution is None:
        prog, idx = build_central(scenario)
        solution = solve_opf(prog, idx)
    vhat_ok = False
    f_hat = g_hat = v_hat = None
    if solution.vars is not None:
        f_hat = _linearized_flows(net, solution.vars.p)
        g_hat = _linearized_flows(net, solution.vars.q)
        v0 = net.buses[net.root_id].Vmin
        v_hat = np.zeros((net.num_buses, T))
        v_hat[net.root_id] = v0
        vhat_ok = True
        for n in net.non_root_ids:
            acc = np.full(T, v0)
            for m in net.path_to_root(n):
                if m == net.root_id:
                    continue
                acc += 2.0 * (net.buses[m].R * f_hat[m] + net.buses[m].X * g_hat[m])
            v_hat[n] = acc
            if not np.all(acc < net.buses[n].Vmax):
                vhat_ok = False
    else:
        notes.append("no optimal solution available; voltage condition unevaluated")

    # path products from lower-bound profiles
    pmin = np.zeros((net.num_buses, T))
    qmin = np.zeros((net.num_buses, T))
    for n, load in scenario.loads.items():
        pmin[n] = load.Pmin
        tau = load.tau_c
        lo = np.minimum(tau * np.asarray(load.Pmin), tau * np.asarray(load.Pmax))
        if load.Qmin is not None:
            lo = np.maximum(lo, load.Qmin)
        qmin[n] = lo
    for n, der in scenario.ders.items():
        pmin[n] -= np.asarray(der.Pavail)
        qmin[n] -= max(der.rho_max, 0.0) * np.asarray(der.Pavail)
    fhat_lo = _linearized_flows(net, pmin)
    ghat_lo = _linearized_flows(net, qmin)
    min_product = np.inf
    products_ok = True
    for t in range(T):
        mats = {}
        for n in net.non_root_ids:
            u = np.array([net.buses[n].R, net.buses[n].X])
            row = np.array([max(fhat_lo[n, t], 0.0), max(ghat_lo[n, t], 0.0)])
            mats[n] = np.eye(2) - (2.0 / net.buses[n].Vmin) * np.outer(u, row)
        for leaf in net.leaves():
            path = list(reversed(net.path_to_root(leaf)))[1:]  # root->leaf, no root
            for k_idx in range(len(path)):
                nk = path[k_idx]
                vec = np.array([net.buses[nk].R, net.buses[nk].X])
                min_product = min(min_product, vec.min())
                if not np.all(vec > 0):
                    products_ok = False
                for s_idx in range(k_idx - 1, -1, -1):
                    vec = mats[path[s_idx]] @ vec
                    min_product = min(min_product, vec.min())
                    if not np.all(vec > 0):
                        products_ok = False
    thm2 = root_cost_increasing and no_shunts and vhat_ok and products_ok
    if not thm1 and not thm2:
        notes.append("conditions not met; exactness must be verified a posteriori")
    return SufficientConditionsReport(
        increasing_in_ell=increasing_in_ell,
        independent_of_flows=independent_of_flows,
        consumption_branch=consumption_branch,
        production_branch=production_branch,
        thm1_holds=thm1,
        root_cost_increasing=root_cost_increasing,
        no_shunts=no_shunts,
        vhat_below_cap=vhat_ok,
        path_products_positive=products_ok,
        thm2_holds=thm2,
        f_hat=f_hat,
        g_hat=g_hat,
        v_hat=v_hat,
        min_path_product=None if np.isinf(min_product) else float(min_product),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def table_rows(solution: OpfSolution) -> list[dict]:
    """Flat per-(period, bus) rows shaped like the published results table.

    The root row reports the net root load in the consumption column and
    has no line quantities.
    """
    if solution.vars is None or solution.dlmps is None:
        raise OpfError("tabular report requires an optimal solution")
    x, lam = solution.vars, solution.dlmps
    net = solution.index.network
    rows = []
    for t in range(solution.index.T):
        order = [net.root_id] + list(net.non_root_ids)
        for n in order:
            root = n == net.root_id
            rows.append(
                {
                    "t": t,
                    "n": n,
                    "lambda_p": round(float(lam.lp[n, t]), 6),
                    "lambda_q": round(float(lam.lq[n, t]), 6),
                    "pc": round(float(x.p0[t] if root else x.pc[n, t]), 6),
                    "q": round(float(x.q0[t] if root else x.q[n, t]), 6),
                    "f": None if root else round(float(x.f[n, t]), 6),
                    "g": None if root else round(float(x.g[n, t]), 6),
                    "ell": None if root else round(float(x.ell[n, t]), 6),
                    "v": round(float(x.v[n, t]), 6),
                }
            )
    return rows
