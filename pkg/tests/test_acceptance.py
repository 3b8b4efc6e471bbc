"""End-to-end acceptance suite with pinned tolerances.

Four surfaces are covered: reproduction of the published 15-bus reference
solution from its printed operating profiles, the two-bus capacity
understatement study, convergence and fixed-point quality of the
negotiation algorithms, and structural price/optimality properties on
randomized feeders.

Five tests fail by design and are kept as an honest record of a gap that
the printed inputs cannot close: the published profiles are rounded to
three decimals, and at that precision the two capacity-limited lines of
the reference solution fall strictly inside their caps, so the re-solve
prices the network congestion-free instead of reproducing the published
congestion pattern. See README.md for the analysis.
"""

import time

import numpy as np
import pytest

from dsomarket.conic import OPTIMAL, kkt_residuals
from dsomarket.coordination import AlgoConfig, coordinate, primal_residual
from dsomarket.mechanism import (
    payments_table,
    reproduce_example1,
    settle,
    vcg_payments,
)
from dsomarket.network import Bus, Network
from dsomarket.opf import (
    build_central,
    build_dso,
    check_dlmp_ancestor_identity,
    check_exactness,
    check_subgradient,
    solve_opf,
)
from dsomarket.scenario import (
    AggregatorDef,
    CostModel,
    TrackingCost,
    fixture_15bus,
    fixture_15bus_table2_profiles,
    fixture_toy,
    generate_scenario,
)

# Published 15-bus reference solution, (bus, period) ->
# (lambda_p, lambda_q, consumption, reactive, f, g, ell, v).
# Root rows carry no line quantities.
REFERENCE_SOLUTION = {
    (0, 0): (2.12, 0.0, -0.56, -0.249, None, None, None, 1.0),
    (1, 0): (2.122, 0.008, 0.623, 0.146, -0.427, -0.188, 0.229, 0.951),
    (2, 0): (2.049, 0.029, 0.0, 0.0, 0.199, -0.038, 0.042, 0.975),
    (3, 0): (1.937, 0.055, 0.028, 0.012, 0.205, -0.032, 0.042, 1.017),
    (4, 0): (1.939, 0.055, 0.005, 0.001, -0.019, -0.003, 0.0, 1.016),
    (5, 0): (1.94, 0.055, 0.001, 0.0, -0.014, -0.002, 0.0, 1.016),
    (6, 0): (1.942, 0.055, 0.013, 0.003, -0.013, -0.003, 0.0, 1.014),
    (7, 0): (0.0, 0.177, -0.131, 0.0, 0.131, 0.001, 0.016, 1.049),
    (8, 0): (0.003, 0.177, 0.023, 0.006, 0.256, -0.016, 0.063, 1.036),
    (9, 0): (0.003, 0.177, 0.002, 0.001, 0.148, -0.011, 0.021, 1.038),
    (10, 0): (0.001, 0.177, 0.014, 0.004, 0.151, -0.009, 0.022, 1.045),
    (11, 0): (0.0, 0.177, 0.02, 0.005, 0.165, -0.005, 0.026, 1.048),
    (12, 0): (2.12, 0.0, 0.107, 0.022, -0.132, -0.032, 0.019, 0.992),
    (13, 0): (2.137, 0.007, 0.003, 0.002, -0.025, -0.009, 0.001, 0.982),
    (14, 0): (2.146, 0.01, 0.022, 0.008, -0.022, -0.008, 0.001, 0.977),
    (0, 1): (1.0, 0.0, -1.299, -0.549, None, None, None, 1.0),
    (1, 1): (1.002, 0.004, 1.05, 0.245, -0.924, -0.321, 1.057, 0.906),
    (2, 1): (0.979, 0.021, 0.0, 0.0, 0.127, -0.074, 0.024, 0.909),
    (3, 1): (0.942, 0.046, 0.037, 0.015, 0.131, -0.072, 0.024, 0.916),
    (4, 1): (0.945, 0.047, 0.027, 0.007, -0.083, -0.019, 0.008, 0.911),
    (5, 1): (0.947, 0.048, 0.031, 0.008, -0.057, -0.013, 0.004, 0.909),
    (6, 1): (0.95, 0.048, 0.026, 0.006, -0.026, -0.006, 0.001, 0.905),
    (7, 1): (-0.001, 0.176, -0.143, 0.0, 0.143, 0.001, 0.022, 0.947),
    (8, 1): (0.004, 0.176, 0.006, 0.001, 0.254, -0.035, 0.07, 0.932),
    (9, 1): (0.003, 0.176, 0.036, 0.022, 0.118, -0.033, 0.016, 0.933),
    (10, 1): (0.001, 0.176, 0.015, 0.004, 0.154, -0.011, 0.025, 0.94),
    (11, 1): (0.0, 0.176, 0.026, 0.006, 0.169, -0.006, 0.03, 0.943),
    (12, 1): (2.008, 0.272, 0.342, 0.071, -0.374, -0.083, 0.15, 0.977),
    (13, 1): (2.031, 0.281, 0.002, 0.001, -0.032, -0.012, 0.001, 0.965),
    (14, 1): (2.044, 0.286, 0.03, 0.011, -0.03, -0.011, 0.001, 0.957),
}

# Published per-aggregator nodal payments for the same solution.
REFERENCE_PAYMENTS = {
    "agg1": 2.464,
    "agg2": 0.693,
    "agg3": 0.077,
    "agg4": 0.006,
    "agg5": 0.002,
}

# Published root production costs per period.
REFERENCE_COSTS = {0: 0.873, 1: 1.299}


# cvxopt cannot always certify the tightest setting on degenerate
# instances; retry a short ladder and keep the first certified solve.
SOLVE_LADDER = (1e-9, 2e-9, 3e-9)


def _ladder_solve(prog, index):
    sol = None
    for tol in SOLVE_LADDER:
        sol = solve_opf(prog, index, tol=tol)
        if sol.status == OPTIMAL:
            return sol
    return sol


@pytest.fixture(scope="module")
def toy_central():
    prog, index = build_central(fixture_toy())
    sol = solve_opf(prog, index)
    assert sol.status == OPTIMAL
    return sol


@pytest.fixture(scope="module")
def seed0_central():
    prog, index = build_central(fixture_15bus(seed=0))
    sol = solve_opf(prog, index)
    assert sol.status == OPTIMAL
    return sol


@pytest.fixture(scope="module")
def seed1_central():
    prog, index = build_central(fixture_15bus(seed=1))
    sol = solve_opf(prog, index)
    assert sol.status == OPTIMAL
    return sol


@pytest.fixture(scope="module")
def table2_resolve():
    """Operator re-solve with every bus pinned to the published profiles."""
    start = time.perf_counter()
    sc = fixture_15bus(seed=0)
    prog, index = build_dso(sc, fixture_15bus_table2_profiles())
    sol = solve_opf(prog, index)
    elapsed = time.perf_counter() - start
    assert sol.status == OPTIMAL
    return sc, sol, elapsed


# ---------------------------------------------------------------------------
# published 15-bus reproduction
# ---------------------------------------------------------------------------


def test_published_profiles_resolve_reproduces_network_state(table2_resolve):
    _, sol, elapsed = table2_resolve
    for (n, t), row in REFERENCE_SOLUTION.items():
        if n == 0:
            continue
        _, _, _, _, f, g, ell, v = row
        assert abs(sol.vars.f[n, t] - f) <= 2e-2, (n, t, "f", sol.vars.f[n, t], f)
        assert abs(sol.vars.g[n, t] - g) <= 2e-2, (n, t, "g", sol.vars.g[n, t], g)
        assert abs(sol.vars.ell[n, t] - ell) <= 2e-2, (n, t, "ell", sol.vars.ell[n, t], ell)
        assert abs(sol.vars.v[n, t] - v) <= 2e-2, (n, t, "v", sol.vars.v[n, t], v)
    assert elapsed <= 10.0


def test_published_profiles_resolve_recovers_prices_or_payments(table2_resolve):
    # Fails by design: the printed profiles leave the two capacity-limited
    # lines strictly inside their caps, so neither the published prices nor
    # the published payments reappear; see the module docstring.
    sc, sol, _ = table2_resolve
    lam_err = 0.0
    for (n, t), row in REFERENCE_SOLUTION.items():
        lam_err = max(lam_err, abs(sol.dlmps.lp[n, t] - row[0]))
        lam_err = max(lam_err, abs(sol.dlmps.lq[n, t] - row[1]))
    if lam_err <= 3e-2:
        return
    p, q = fixture_15bus_table2_profiles()
    for agg in sorted(sc.aggregators, key=lambda a: a.id):
        paid = 0.0
        for n in sc.sorted_nodes(agg):
            for t in range(sc.horizon.T):
                paid += sol.dlmps.lp[n, t] * p[n, t] + sol.dlmps.lq[n, t] * q[n, t]
        assert abs(paid - REFERENCE_PAYMENTS[agg.id]) <= 2e-2, (
            f"price error {lam_err:.4f} > 3e-2 and {agg.id} payment {paid:.6f} "
            f"differs from published {REFERENCE_PAYMENTS[agg.id]}"
        )


def test_root_production_costs_match_published_values(table2_resolve):
    sc, sol, _ = table2_resolve
    for t, published in REFERENCE_COSTS.items():
        cost = sc.costs.production_cost(-float(sol.vars.p0[t]), t)
        assert abs(cost - published) <= 5e-3, (t, cost, published)


def test_central_fixture_solves_are_cone_exact(toy_central, seed0_central):
    for sol in (toy_central, seed0_central):
        report = check_exactness(sol)
        assert report.max_gap <= 1e-6
        assert report.is_exact


def test_published_prices_vanish_downstream_of_congested_line(table2_resolve):
    # Fails by design: with the rounded profiles the line feeding this
    # branch is not saturated, so its buses price at the root marginal cost
    # instead of the published near-zero values.
    _, sol, _ = table2_resolve
    for n in (7, 8, 9, 10, 11):
        for t in (0, 1):
            assert abs(sol.dlmps.lp[n, t]) <= 5e-3, (
                f"lambda_p[{n},{t}] = {sol.dlmps.lp[n, t]:.6f}, published ~0"
            )


def test_published_prices_double_behind_saturated_feeder_head(table2_resolve):
    # Fails by design: with the rounded profiles the head line of this
    # branch is not saturated, so the cheap-period price stays near the
    # root marginal cost instead of the published doubled values.
    _, sol, _ = table2_resolve
    for n in (12, 13, 14):
        assert sol.dlmps.lp[n, 1] >= 1.9, (
            f"lambda_p[{n},1] = {sol.dlmps.lp[n, 1]:.6f}, published >= 2.0"
        )


def test_published_price_negative_at_binding_export(table2_resolve):
    # Fails by design: the published negative price requires the export
    # bound at this bus to bind, which the rounded profiles do not achieve.
    _, sol, _ = table2_resolve
    assert sol.dlmps.lp[7, 1] < 0.0, (
        f"lambda_p[7,1] = {sol.dlmps.lp[7, 1]:.6f}, published -0.001"
    )


# ---------------------------------------------------------------------------
# two-bus capacity understatement study
# ---------------------------------------------------------------------------


def test_capacity_understatement_lowers_total_cost():
    start = time.perf_counter()
    record = reproduce_example1()
    assert abs(record.truthful.total_cost - (-15.13)) <= 0.05
    assert abs(record.cheated.total_cost - (-15.47)) <= 0.05
    assert record.cheated.total_cost < record.truthful.total_cost
    assert record.cheating_pays
    assert time.perf_counter() - start <= 5.0


# ---------------------------------------------------------------------------
# negotiation algorithms
# ---------------------------------------------------------------------------


def test_admm_matches_central_solution_on_both_networks(toy_central, seed1_central):
    cases = (
        (fixture_toy(), toy_central),
        (fixture_15bus(seed=1), seed1_central),
    )
    for sc, central in cases:
        run = coordinate(sc, AlgoConfig(algo="admm", rho=5.0, max_iter=200))
        assert run.converged and len(run.logs) <= 200
        assert run.logs[-1].primal_residual <= 1e-4
        assert abs(run.logs[-1].objective - central.objective_value) <= 1e-4
        nr = list(sc.network.non_root_ids)
        lam_err = max(
            float(np.max(np.abs(run.lambda_p[nr] - central.dlmps.lp[nr]))),
            float(np.max(np.abs(run.lambda_q[nr] - central.dlmps.lq[nr]))),
        )
        if lam_err <= 2e-2:
            continue
        # price-level match failed; payment totals must still agree
        for agg in sc.aggregators:
            paid = hat = 0.0
            for n in sc.sorted_nodes(agg):
                for t in range(sc.horizon.T):
                    hat += run.lambda_p[n, t] * run.x_A[0][n, t]
                    hat += run.lambda_q[n, t] * run.x_A[1][n, t]
                    paid += central.dlmps.lp[n, t] * central.vars.p[n, t]
                    paid += central.dlmps.lq[n, t] * central.vars.q[n, t]
            assert abs(hat - paid) <= 2e-2, (agg.id, hat, paid, lam_err)


def test_pdgs_feasible_rounds_are_operating_points(seed1_central):
    sc = fixture_15bus(seed=1)
    run = coordinate(sc, AlgoConfig(algo="pdgs", K=4.0, max_iter=80, tol_obj=0.0))
    feasible = [log for log in run.logs if log.dso_feasible]
    infeasible = [log for log in run.logs if not log.dso_feasible]
    assert feasible and min(log.round for log in feasible) <= 50
    for log in feasible:
        assert log.primal_residual <= 1e-6, (log.round, log.primal_residual)
    # infeasible rounds die out: the whole second half of the run is feasible
    half = run.logs[len(run.logs) // 2 :]
    assert all(log.dso_feasible for log in half), [log.round for log in infeasible]


def test_pdgs_thousand_round_tail_keeps_objective_gap(seed1_central):
    sc = fixture_15bus(seed=1)
    run = coordinate(sc, AlgoConfig(algo="pdgs", K=4.0, max_iter=1000, tol_obj=0.0))
    assert len(run.logs) == 1000
    gap = abs(run.logs[-1].objective - seed1_central.objective_value)
    assert 1e-4 < gap <= 1e-1, gap
    # averaged duals have stabilized even though the objective has not closed
    drift = max(
        float(np.max(np.abs(run.logs[-1].lambda_p - run.logs[-101].lambda_p))),
        float(np.max(np.abs(run.logs[-1].lambda_q - run.logs[-101].lambda_q))),
    )
    assert drift <= 1e-2, drift


# ---------------------------------------------------------------------------
# property suite over randomized feeders
# ---------------------------------------------------------------------------

_SUITE_CLOCK = {"start": None}


def _random_feeder(seed, zero_line=False):
    """Deterministic 4-8 bus feeder over 1-3 periods with one or two
    aggregators, a tracking cost on the first bus, a net producer on every
    third seed, and a renewable unit on every fourth. zero_line replaces
    one line with an ideal jumper (R = X = B = 0)."""
    rng = np.random.default_rng(10_000 + seed)
    nbus = int(rng.integers(4, 9))
    T = int(rng.integers(1, 4))
    buses = [Bus(0, None, Vmin=1.0, Vmax=1.0)]
    zeroed = 1 + seed % max(1, nbus - 2) if zero_line else None
    for n in range(1, nbus):
        anc = int(rng.integers(0, n))
        R = float(rng.uniform(0.005, 0.05))
        X = float(rng.uniform(0.01, 0.08))
        B = float(rng.uniform(0.0, 1e-3))
        S = float(rng.uniform(2.0, 3.5))
        if n == zeroed:
            R = X = B = 0.0
        buses.append(Bus(n, anc, R=R, X=X, G=0.0, B=B, S=S, Vmin=0.81, Vmax=1.21))
    net = Network(buses)
    base = {}
    for n in range(1, nbus):
        p_hat = float(rng.uniform(0.05, 0.2))
        if n == nbus - 1 and seed % 3 == 0:
            p_hat = -float(rng.uniform(0.05, 0.15))
        base[n] = (p_hat, 0.3 * p_hat)
    non_root = list(range(1, nbus))
    half = max(1, len(non_root) // 2)
    aggs = [AggregatorDef("a1", frozenset(non_root[:half]))]
    if non_root[half:]:
        aggs.append(AggregatorDef("a2", frozenset(non_root[half:])))
    costs = CostModel(
        alpha=tuple(1.0 + 0.5 * t for t in range(T)),
        beta=(0.5,) * T,
        la_costs={"a1": TrackingCost(2.0, {non_root[0]: (0.15,) * T})},
    )
    der_specs = {non_root[-1]: (0.1, 0.0, 0.1)} if seed % 4 == 0 else None
    sc = generate_scenario(
        net, base, T, seed,
        aggregators=aggs, costs=costs, der_specs=der_specs, name=f"rand{seed}",
    )
    return sc, zeroed


@pytest.fixture(scope="module")
def property_records():
    if _SUITE_CLOCK["start"] is None:
        _SUITE_CLOCK["start"] = time.perf_counter()
    records = []
    for seed in range(20):
        sc, _ = _random_feeder(seed)
        prog, index = build_central(sc)
        sol = _ladder_solve(prog, index)
        zsc, zline = _random_feeder(seed, zero_line=True)
        zprog, zindex = build_central(zsc)
        zsol = _ladder_solve(zprog, zindex)
        records.append(
            {
                "seed": seed,
                "sc": sc,
                "prog": prog,
                "sol": sol,
                "zsc": zsc,
                "zline": zline,
                "zprog": zprog,
                "zsol": zsol,
            }
        )
    return records


def test_random_feeders_solve_to_exact_optima(property_records):
    for rec in property_records:
        assert rec["sol"].status == OPTIMAL, (rec["seed"], rec["sol"].status)
        assert check_exactness(rec["sol"]).max_gap <= 1e-6, rec["seed"]
        assert rec["zsol"].status == OPTIMAL, (rec["seed"], rec["zsol"].status)
        # the jumper line carries no loss cost, so nothing closes its cone;
        # every other line must still be tight
        report = check_exactness(rec["zsol"])
        loose = {n for (n, _t) in report.binding_map}
        assert loose <= {rec["zline"]}, (rec["seed"], loose)


def test_ancestor_price_identities_hold(property_records):
    for rec in property_records:
        for sol in (rec["sol"], rec["zsol"]):
            report = check_dlmp_ancestor_identity(sol)
            assert report.max_residual <= 1e-5, (rec["seed"], report.max_residual)


def test_zero_impedance_line_equalizes_prices(property_records):
    for rec in property_records:
        sol, n = rec["zsol"], rec["zline"]
        parent = rec["zsc"].network.buses[n].ancestor
        for t in range(rec["zsc"].horizon.T):
            assert abs(sol.dlmps.lp[n, t] - sol.dlmps.lp[parent, t]) <= 1e-6
            assert abs(sol.dlmps.lq[n, t] - sol.dlmps.lq[parent, t]) <= 1e-6


def test_prices_match_cost_to_serve_sensitivities(property_records):
    # A central difference with step 5e-5 on solves at tolerance 1e-9 has a
    # noise floor near 2e-5, so prices below 1e-3 cannot be resolved in
    # relative terms and are held to an absolute bar instead.
    for rec in property_records:
        sc, sol = rec["sc"], rec["sol"]
        x_A = (sol.vars.p, sol.vars.q)
        for kind in ("p", "q"):
            report = check_subgradient(sc, x_A, sol.dlmps, eps=5e-5, kind=kind, tol=1e-9)
            for e in report.entries:
                if e.rel_err is None or e.one_sided or e.skipped:
                    continue
                if max(abs(e.lam), abs(e.fd)) >= 1e-3:
                    assert e.rel_err <= 1e-2, (rec["seed"], kind, e.bus, e.period, e.rel_err)
                else:
                    assert abs(e.fd - e.lam) <= 1e-4, (rec["seed"], kind, e.bus, e.period)


def test_kkt_residuals_small_on_every_certified_solve(property_records):
    for rec in property_records:
        assert kkt_residuals(rec["prog"], rec["sol"].conic).max_residual <= 1e-6, rec["seed"]
        assert kkt_residuals(rec["zprog"], rec["zsol"].conic).max_residual <= 1e-6, rec["seed"]


def test_admm_fixed_points_satisfy_central_optimality(property_records):
    cfg = AlgoConfig(algo="admm", rho=5.0, tol_primal=1e-6, tol_obj=1e-8, max_iter=2000)
    for rec in property_records:
        run = coordinate(rec["sc"], cfg)
        assert run.converged, rec["seed"]
        res = primal_residual(rec["sc"], run.x0, run.x_A)
        assert res <= 1e-4, (rec["seed"], res)
        gap = abs(run.logs[-1].objective - rec["sol"].objective_value)
        assert gap <= 1e-4, (rec["seed"], gap)
        prog, index = build_dso(rec["sc"], run.x_A)
        dsol = _ladder_solve(prog, index)
        if dsol.status != OPTIMAL:
            # the terminal profile is deliverable only to within the
            # negotiation residual, so pinning it can be marginally
            # infeasible; the epsilon-optimality asserted above already
            # certifies the fixed point by convex duality
            continue
        nr = list(rec["sc"].network.non_root_ids)
        lam_err = max(
            float(np.max(np.abs(dsol.dlmps.lp[nr] - run.lambda_p[nr]))),
            float(np.max(np.abs(dsol.dlmps.lq[nr] - run.lambda_q[nr]))),
        )
        assert lam_err <= 1e-4, (rec["seed"], lam_err)
        assert kkt_residuals(prog, dsol.conic).max_residual <= 1e-6, rec["seed"]
    assert time.perf_counter() - _SUITE_CLOCK["start"] <= 300.0


# ---------------------------------------------------------------------------
# settlement and auction accounting
# ---------------------------------------------------------------------------


def test_auction_solve_count_and_truthful_settlement():
    toy = fixture_toy()
    vcg_toy = vcg_payments(toy)
    assert vcg_toy.solve_count == len(toy.aggregators) + 1 == 2

    sc = fixture_15bus(seed=1)
    vcg = vcg_payments(sc)
    assert vcg.solve_count == len(sc.aggregators) + 1 == 6
    assert set(vcg.vcg_payment) == {a.id for a in sc.aggregators}

    run = coordinate(toy, AlgoConfig(algo="admm", rho=5.0, max_iter=200))
    settlement = settle(toy, run, realized=run.x_A)
    assert not any(settlement.penalized.values())
    assert settlement.budget_gap() == 0.0


def test_payment_comparison_emits_published_rows():
    sc = fixture_15bus(seed=0)
    settlement = settle(sc, (fixture_15bus_table2_profiles(), None))
    vcg = vcg_payments(sc)
    rows = payments_table(sc, settlement, vcg)
    assert [row["aggregator"] for row in rows] == sorted(REFERENCE_PAYMENTS)
    for row in rows:
        assert set(row["nodes"]) == sc.aggregator(row["aggregator"]).nodes
        assert np.isfinite(row["dlmp_payment"])
        # the auction column depends on load windows that were never
        # published, so it is reported but not matched
        assert np.isfinite(row["vcg_payment"])
    by_id = {row["aggregator"]: row["dlmp_payment"] for row in rows}
    # the two feeder-head aggregators settle on published values even
    # without the congestion pattern
    assert abs(by_id["agg1"] - REFERENCE_PAYMENTS["agg1"]) <= 2e-2
    assert abs(by_id["agg2"] - REFERENCE_PAYMENTS["agg2"]) <= 2e-2


def test_payment_comparison_matches_all_published_rows():
    # Fails by design: without the congestion pattern (see the module
    # docstring) the branch aggregators' settlements move away from the
    # published column by up to 0.46.
    sc = fixture_15bus(seed=0)
    settlement = settle(sc, (fixture_15bus_table2_profiles(), None))
    for agg_id, published in sorted(REFERENCE_PAYMENTS.items()):
        paid = settlement.payments[agg_id]
        assert abs(paid - published) <= 2e-2, (
            f"{agg_id} pays {paid:.6f}, published {published}"
        )
