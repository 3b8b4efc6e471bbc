"""Scenario data model, fixtures, and the random-scenario generator."""

import numpy as np
import pytest

from dsomarket.scenario import (
    AggregatorDef,
    CostModel,
    DerUnit,
    FlexibleLoad,
    Scenario,
    ScenarioError,
    TrackingCost,
    fixture_15bus,
    fixture_15bus_table2_profiles,
    fixture_toy,
    generate_scenario,
    load_scenario,
    network_15bus,
    save_scenario,
)


def test_flexible_load_energy_window():
    FlexibleLoad(1, (0.0, 0.0), (1.0, 1.0), 1.5)
    with pytest.raises(ScenarioError, match="energy"):
        FlexibleLoad(1, (0.0, 0.0), (1.0, 1.0), 3.0)
    with pytest.raises(ScenarioError, match="energy"):
        FlexibleLoad(1, (0.5, 0.5), (1.0, 1.0), 0.2)
    with pytest.raises(ScenarioError, match="Pmin > Pmax"):
        FlexibleLoad(1, (1.0,), (0.5,), 0.7)


def test_aggregators_must_partition():
    net = network_15bus()
    sc = fixture_15bus()
    assert sc.network.num_buses == net.num_buses
    # remove one node from its aggregator: partition check must fire
    bad = [
        AggregatorDef(a.id, a.nodes - {11}) if 11 in a.nodes else a
        for a in sc.aggregators
    ]
    with pytest.raises(ScenarioError, match="partition"):
        Scenario(sc.network, sc.horizon, sc.loads, sc.ders, bad, sc.costs).validate()


def test_toy_fixture_shape():
    sc = fixture_toy()
    assert sc.network.num_buses == 2
    assert sc.horizon.T == 2
    assert sc.network.buses[1].X == 0.12
    load = sc.loads[1]
    assert load.E == 1.0
    assert load.tau_c == pytest.approx(0.3)
    assert sc.costs.alpha == (10.0, 3.0)
    assert sc.costs.beta == (10.0, 2.0)
    tracking = sc.costs.la_costs["la1"]
    assert isinstance(tracking, TrackingCost)
    assert tracking.weight == 10.0


def test_15bus_fixture_shape():
    sc = fixture_15bus(seed=0)
    assert sc.network.num_buses == 15
    assert sc.network.buses[1].X == 0.12
    assert sc.network.buses[1].S == 2.0
    assert sc.network.buses[12].S == 1.0
    assert sc.network.buses[8].S == 0.256
    assert len(sc.aggregators) == 5
    names = {a.id: tuple(sorted(a.nodes)) for a in sc.aggregators}
    assert names["agg2"] == (4, 5, 6, 12, 13)
    assert 11 in sc.ders
    assert sc.ders[11].rho_min == 0.0 and sc.ders[11].rho_max == 0.0
    # every non-root bus has a load entry, root has none
    assert set(sc.loads) == set(sc.network.non_root_ids)


def test_15bus_line_cap_override():
    sc = fixture_15bus(seed=0, line_caps={8: 0.300, 12: 0.405})
    assert sc.network.buses[8].S == 0.300
    assert sc.network.buses[12].S == 0.405
    assert sc.network.buses[1].S == 2.0


def test_table2_reference_profiles():
    p, q = fixture_15bus_table2_profiles()
    assert p.shape == (15, 2) and q.shape == (15, 2)
    assert np.all(p[0] == 0) and np.all(q[0] == 0)
    # realized optimal net loads, not the expected base loads
    assert p[1, 0] == pytest.approx(0.623)
    assert p[7, 1] == pytest.approx(-0.143)
    # DER bus: consumption minus generation
    assert p[11, 0] == pytest.approx(0.02 - 0.185)
    assert p[11, 1] == pytest.approx(0.026 - 0.194)
    assert q[12, 1] == pytest.approx(0.071)


def test_generator_determinism_and_recipe():
    net = network_15bus()
    base = _base_loads(net)
    a = generate_scenario(net, base, T=2, seed=42)
    b = generate_scenario(net, base, T=2, seed=42)
    c = generate_scenario(net, base, T=2, seed=43)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()
    for n, load in a.loads.items():
        p_hat = base[n][0]
        for t in range(2):
            lo, hi = load.Pmin[t], load.Pmax[t]
            assert lo <= hi
            if p_hat > 0:
                assert 0.0 <= lo <= p_hat
                assert p_hat <= hi <= 2 * p_hat
            elif p_hat < 0:
                # mirrored draw: bounds stay on the negative side
                assert 2 * p_hat <= lo <= p_hat
                assert p_hat <= hi <= 0.0
        assert sum(load.Pmin) - 1e-9 <= load.E <= sum(load.Pmax) + 1e-9
        if p_hat != 0:
            assert load.tau_c == pytest.approx(base[n][1] / p_hat)


def _base_loads(net):
    from dsomarket.scenario import _FEEDER15

    return {n: (row[5], row[6]) for n, row in _FEEDER15.items()}


def test_generator_zero_base_load():
    net = network_15bus()
    base = _base_loads(net)
    base[5] = (0.0, 0.0)
    sc = generate_scenario(net, base, T=2, seed=1)
    assert sc.loads[5].Pmax == (0.0, 0.0)
    assert sc.loads[5].E == 0.0
    base[5] = (0.0, 0.1)
    with pytest.raises(ScenarioError, match="tau_c undefined"):
        generate_scenario(net, base, T=2, seed=1)


def test_scenario_round_trip(tmp_path):
    sc = fixture_15bus(seed=7)
    path = tmp_path / "scenario.json"
    save_scenario(sc, str(path))
    back = load_scenario(str(path))
    assert back.to_dict() == sc.to_dict()
    back.validate()


def test_cost_model_eval():
    costs = CostModel(alpha=(1.0, 1.0), beta=(1.0, 0.0))
    assert costs.production_cost(0.5, 0) == pytest.approx(0.5 + 0.25)
    assert costs.production_cost(0.5, 1) == pytest.approx(0.5)
    tracked = CostModel(
        alpha=(1.0,),
        beta=(0.0,),
        la_costs={"a": TrackingCost(2.0, {3: (1.0,)})},
    )
    assert tracked.la_cost("a", {3: (0.0,)}) == pytest.approx(2.0)
    assert tracked.la_cost("missing", {3: (0.0,)}) == 0.0
