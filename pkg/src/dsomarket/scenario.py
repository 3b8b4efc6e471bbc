"""Scenario data: flexible loads, DER units, aggregators, costs.

A Scenario bundles everything the optimization layers need besides the wire
data: per-bus flexible consumption bounds, renewable availability, the
aggregator partition of the non-root buses, and the operator/aggregator cost
coefficients. Scenarios are immutable after construction and JSON
round-trippable.

Two canned instances are provided: a 2-bus toy used for the mechanism
comparison study, and a 15-bus feeder whose load bounds are redrawn from a
seed around fixed base values (so two scenarios from the same seed are
identical). `fixture_15bus_table2_profiles` returns the published reference
operating point of the 15-bus feeder as fixed net loads, used to cross-check
the solver against known results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .network import Bus, Network, TimeHorizon


class ScenarioError(ValueError):
    """Raised when scenario data violates an invariant."""


def _tup(values) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(values))


@dataclass(frozen=True)
class FlexibleLoad:
    """Aggregated flexible consumption at one bus.

    Consumption p^c is bounded per period and must meet a total energy
    requirement over the horizon; reactive consumption is tied to active by
    the ratio tau_c. Qmin/Qmax optionally box the bus's *net* reactive power.
    """

    bus: int
    Pmin: tuple[float, ...]
    Pmax: tuple[float, ...]
    E: float
    tau_c: float = 0.0
    Qmin: tuple[float, ...] | None = None
    Qmax: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "Pmin", _tup(self.Pmin))
        object.__setattr__(self, "Pmax", _tup(self.Pmax))
        if self.Qmin is not None:
            object.__setattr__(self, "Qmin", _tup(self.Qmin))
        if self.Qmax is not None:
            object.__setattr__(self, "Qmax", _tup(self.Qmax))
        if len(self.Pmin) != len(self.Pmax):
            raise ScenarioError(f"bus {self.bus}: Pmin/Pmax length mismatch")
        for lo, hi in zip(self.Pmin, self.Pmax):
            if lo > hi + 1e-12:
                raise ScenarioError(f"bus {self.bus}: Pmin > Pmax")
        # else the consumption subproblem is infeasible; reject at load time
        if not sum(self.Pmin) - 1e-9 <= self.E <= sum(self.Pmax) + 1e-9:
            raise ScenarioError(
                f"bus {self.bus}: energy requirement E={self.E} outside "
                f"[sum Pmin, sum Pmax] = [{sum(self.Pmin)}, {sum(self.Pmax)}]"
            )


@dataclass(frozen=True)
class DerUnit:
    """Renewable generation unit with an inverter reactive-power range.

    Active output is curtailable in [0, Pavail[t]]; reactive output is tied
    to active output by a ratio in [rho_min, rho_max].
    """

    bus: int
    Pavail: tuple[float, ...]
    rho_min: float = 0.0
    rho_max: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "Pavail", _tup(self.Pavail))
        if any(v < 0 for v in self.Pavail):
            raise ScenarioError(f"bus {self.bus}: negative available power")
        if self.rho_min > self.rho_max:
            raise ScenarioError(f"bus {self.bus}: rho_min > rho_max")


@dataclass(frozen=True)
class AggregatorDef:
    """One aggregator and the buses whose devices it controls."""

    id: str
    nodes: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(int(n) for n in self.nodes))


@dataclass(frozen=True)
class TrackingCost:
    """Aggregator disutility: weight * sum_(n,t) (p[n,t] - target[n][t])^2.

    Targets index the aggregator's buses by id; p is the net active profile.
    """

    weight: float
    target: dict[int, tuple[float, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "target", {int(n): _tup(prof) for n, prof in self.target.items()}
        )
        if self.weight < 0:
            raise ScenarioError("tracking cost weight must be >= 0")

    def value(self, profiles: dict[int, np.ndarray]) -> float:
        total = 0.0
        for n, ref in self.target.items():
            diff = np.asarray(profiles[n], dtype=float) - np.asarray(ref)
            total += float(diff @ diff)
        return self.weight * total


@dataclass(frozen=True)
class CostModel:
    """Operator production cost c_t(x) = alpha[t]*x + beta[t]*x^2, a loss
    penalty weight, and per-aggregator local costs (None = indifferent)."""

    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    alpha_loss: float = 0.0
    la_costs: dict[str, TrackingCost | None] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "alpha", _tup(self.alpha))
        object.__setattr__(self, "beta", _tup(self.beta))
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise ScenarioError("production cost coefficients must be >= 0")
        if self.alpha_loss < 0:
            raise ScenarioError("alpha_loss must be >= 0")

    def production_cost(self, x: float, t: int) -> float:
        return self.alpha[t] * x + self.beta[t] * x * x

    def la_cost(self, agg_id: str, profiles: dict[int, np.ndarray]) -> float:
        cost = self.la_costs.get(agg_id)
        return 0.0 if cost is None else cost.value(profiles)


@dataclass
class Scenario:
    """Immutable problem data for one coordination study."""

    network: Network
    horizon: TimeHorizon
    loads: dict[int, FlexibleLoad]
    ders: dict[int, DerUnit]
    aggregators: list[AggregatorDef]
    costs: CostModel
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        T = self.horizon.T
        nbus = self.network.num_buses
        for n, load in self.loads.items():
            if load.bus != n:
                raise ScenarioError(f"loads key {n} != load.bus {load.bus}")
            if not 1 <= n < nbus:
                raise ScenarioError(f"load at unknown or root bus {n}")
            if len(load.Pmin) != T:
                raise ScenarioError(f"bus {n}: load profile length != T={T}")
            for arr in (load.Qmin, load.Qmax):
                if arr is not None and len(arr) != T:
                    raise ScenarioError(f"bus {n}: Q bound length != T={T}")
        for n, der in self.ders.items():
            if der.bus != n:
                raise ScenarioError(f"ders key {n} != der.bus {der.bus}")
            if not 1 <= n < nbus:
                raise ScenarioError(f"DER at unknown or root bus {n}")
            if len(der.Pavail) != T:
                raise ScenarioError(f"bus {n}: Pavail length != T={T}")
        if len(self.costs.alpha) != T or len(self.costs.beta) != T:
            raise ScenarioError("cost coefficient length != T")
        # aggregators partition the non-root buses
        seen: set[int] = set()
        ids: set[str] = set()
        for agg in self.aggregators:
            if agg.id in ids:
                raise ScenarioError(f"duplicate aggregator id {agg.id}")
            ids.add(agg.id)
            overlap = seen & agg.nodes
            if overlap:
                raise ScenarioError(f"buses {sorted(overlap)} in several aggregators")
            seen |= agg.nodes
        missing = set(self.network.non_root_ids) - seen
        extra = seen - set(self.network.non_root_ids)
        if missing or extra:
            raise ScenarioError(
                f"aggregators must partition the non-root buses; "
                f"missing={sorted(missing)} extra={sorted(extra)}"
            )
        for agg_id in self.costs.la_costs:
            if agg_id not in ids:
                raise ScenarioError(f"la_costs references unknown aggregator {agg_id}")

    # -- convenience -------------------------------------------------------

    def aggregator(self, agg_id: str) -> AggregatorDef:
        for agg in self.aggregators:
            if agg.id == agg_id:
                return agg
        raise KeyError(agg_id)

    def aggregator_of(self, bus: int) -> AggregatorDef:
        for agg in self.aggregators:
            if bus in agg.nodes:
                return agg
        raise KeyError(bus)

    def sorted_nodes(self, agg: AggregatorDef) -> list[int]:
        return sorted(agg.nodes)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        def load_dict(ld: FlexibleLoad) -> dict:
            out = {
                "bus": ld.bus,
                "Pmin": list(ld.Pmin),
                "Pmax": list(ld.Pmax),
                "E": ld.E,
                "tau_c": ld.tau_c,
            }
            if ld.Qmin is not None:
                out["Qmin"] = list(ld.Qmin)
            if ld.Qmax is not None:
                out["Qmax"] = list(ld.Qmax)
            return out

        la_costs = {}
        for agg_id, cost in self.costs.la_costs.items():
            la_costs[agg_id] = (
                None
                if cost is None
                else {
                    "weight": cost.weight,
                    "target": {str(n): list(v) for n, v in cost.target.items()},
                }
            )
        return {
            "network": self.network.to_dict(),
            "horizon": {"T": self.horizon.T},
            "loads": [load_dict(ld) for _, ld in sorted(self.loads.items())],
            "ders": [
                {
                    "bus": d.bus,
                    "Pavail": list(d.Pavail),
                    "rho_min": d.rho_min,
                    "rho_max": d.rho_max,
                }
                for _, d in sorted(self.ders.items())
            ],
            "aggregators": [
                {"id": a.id, "nodes": sorted(a.nodes)} for a in self.aggregators
            ],
            "costs": {
                "alpha": list(self.costs.alpha),
                "beta": list(self.costs.beta),
                "alpha_loss": self.costs.alpha_loss,
                "la_costs": la_costs,
            },
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            network = Network.from_dict(data["network"])
            horizon = TimeHorizon(int(data["horizon"]["T"]))
            loads = {int(raw["bus"]): FlexibleLoad(**raw) for raw in data["loads"]}
            ders = {int(raw["bus"]): DerUnit(**raw) for raw in data["ders"]}
            aggregators = [
                AggregatorDef(raw["id"], frozenset(raw["nodes"]))
                for raw in data["aggregators"]
            ]
            raw_costs = data["costs"]
            la_costs = {}
            for agg_id, raw in raw_costs.get("la_costs", {}).items():
                la_costs[agg_id] = (
                    None
                    if raw is None
                    else TrackingCost(
                        raw["weight"],
                        {int(n): tuple(v) for n, v in raw["target"].items()},
                    )
                )
            costs = CostModel(
                raw_costs["alpha"],
                raw_costs["beta"],
                raw_costs.get("alpha_loss", 0.0),
                la_costs,
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario data: {exc}") from exc
        return cls(network, horizon, loads, ders, aggregators, costs, data.get("meta", {}))


def save_scenario(scn: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scn.to_dict(), fh, indent=2)
        fh.write("\n")


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"unparseable scenario file {path}: {exc}") from exc
    return Scenario.from_dict(data)


# ---------------------------------------------------------------------------
# random generation
# ---------------------------------------------------------------------------

RNG_IDENTITY = "numpy.random.Generator(PCG64)"


def generate_scenario(
    network: Network,
    base_loads: dict[int, tuple[float, float]],
    T: int,
    seed: int,
    *,
    aggregators: list[AggregatorDef] | None = None,
    costs: CostModel | None = None,
    der_specs: dict[int, tuple[float, float, float]] | None = None,
    name: str = "generated",
) -> Scenario:
    """Draw a random scenario around per-bus base loads (p_hat, q_hat).

    Per bus and period, consumption bounds are drawn uniformly:
    Pmin ~ U[0, p_hat], Pmax ~ U[p_hat, 2*p_hat], then the energy requirement
    E ~ U[sum Pmin, sum Pmax] and tau_c = q_hat / p_hat. Buses with p_hat < 0
    (net producers) use the mirrored intervals U[2*p_hat, p_hat] and
    U[p_hat, 0]. A zero p_hat fixes the bus to zero load and requires
    q_hat = 0.

    der_specs maps bus -> (avail_high, rho_min, rho_max); the unit's
    availability is drawn per period from U[0, avail_high].

    The draw order (buses ascending: Pmin per period, Pmax per period, E;
    then DER buses ascending: Pavail per period) is part of the format:
    changing it changes what a seed produces.
    """
    rng = np.random.default_rng(seed)
    horizon = TimeHorizon(T)
    loads: dict[int, FlexibleLoad] = {}
    for n in network.non_root_ids:
        if n not in base_loads:
            continue
        p_hat, q_hat = base_loads[n]
        if p_hat == 0.0:
            if q_hat != 0.0:
                raise ScenarioError(f"bus {n}: q_hat != 0 with p_hat = 0 leaves tau_c undefined")
            loads[n] = FlexibleLoad(n, (0.0,) * T, (0.0,) * T, 0.0, 0.0)
            continue
        if p_hat > 0:
            pmin = rng.uniform(0.0, p_hat, size=T)
            pmax = rng.uniform(p_hat, 2 * p_hat, size=T)
        else:
            pmin = rng.uniform(2 * p_hat, p_hat, size=T)
            pmax = rng.uniform(p_hat, 0.0, size=T)
        e = rng.uniform(pmin.sum(), pmax.sum())
        loads[n] = FlexibleLoad(n, pmin, pmax, float(e), q_hat / p_hat)
    ders: dict[int, DerUnit] = {}
    for n in sorted(der_specs or {}):
        hi, rho_min, rho_max = der_specs[n]
        ders[n] = DerUnit(n, rng.uniform(0.0, hi, size=T), rho_min, rho_max)
    if aggregators is None:
        aggregators = [AggregatorDef("all", frozenset(network.non_root_ids))]
    if costs is None:
        costs = CostModel((1.0,) * T, (0.0,) * T)
    meta = {"name": name, "seed": seed, "rng": RNG_IDENTITY}
    return Scenario(network, horizon, loads, ders, aggregators, costs, meta)


# ---------------------------------------------------------------------------
# canned instances
# ---------------------------------------------------------------------------


def fixture_toy() -> Scenario:
    """2-bus feeder with one flexible load tracking a preferred profile.

    The single line is nearly lossless (R=0.001) with ample capacity. Period 0
    energy is expensive (10x + 10x^2), period 1 cheap (3x + 2x^2); the load
    would rather consume 1.5 in both periods but only must cover E=1 in total.
    """
    net = Network(
        [
            Bus(0, None, Vmin=1.0, Vmax=1.0),
            Bus(1, 0, R=0.001, X=0.12, G=0.0, B=0.0011, S=5.0, Vmin=0.7, Vmax=1.3),
        ]
    )
    load = FlexibleLoad(
        1,
        Pmin=(0.3, 0.2),
        Pmax=(1.5, 2.0),
        E=1.0,
        tau_c=0.3,
        Qmin=(-0.5, -0.5),
        Qmax=(1.0, 1.0),
    )
    costs = CostModel(
        alpha=(10.0, 3.0),
        beta=(10.0, 2.0),
        la_costs={"la1": TrackingCost(10.0, {1: (1.5, 1.5)})},
    )
    return Scenario(
        network=net,
        horizon=TimeHorizon(2),
        loads={1: load},
        ders={},
        aggregators=[AggregatorDef("la1", frozenset({1}))],
        costs=costs,
        meta={"name": "toy"},
    )


# 15-bus feeder: per-bus (ancestor, R, X, S, B) and base loads (p_hat, q_hat).
# Two laterals hang off the main trunk: 3-(4,5,6) / 3-8-(7, 9-10-11), and
# 0-12-13-14. Bus 7 is a net producer; bus 11 hosts the renewable unit.
_FEEDER15 = {
    1: (0, 0.001, 0.12, 2.0, 1.1e-3, 0.7936, 0.1855),
    2: (1, 0.0883, 0.1262, 0.256, 2.8e-3, 0.0, 0.0),
    3: (2, 0.1384, 0.1978, 0.256, 2.4e-3, 0.0201, 0.0084),
    4: (3, 0.0191, 0.0273, 0.256, 0.4e-3, 0.0173, 0.0043),
    5: (4, 0.0175, 0.0251, 0.256, 0.8e-3, 0.0291, 0.0073),
    6: (5, 0.0482, 0.0689, 0.256, 0.6e-3, 0.0219, 0.0055),
    7: (8, 0.0523, 0.0747, 0.256, 0.6e-3, -0.1969, 0.0),
    8: (3, 0.0407, 0.0582, 0.256, 1.2e-3, 0.0235, 0.0059),
    9: (8, 0.01, 0.0143, 0.256, 0.4e-3, 0.0229, 0.0142),
    10: (9, 0.0241, 0.0345, 0.256, 0.4e-3, 0.0217, 0.0065),
    11: (10, 0.0103, 0.0148, 0.256, 0.1e-3, 0.0132, 0.0033),
    12: (0, 0.001, 0.12, 1.0, 0.1e-3, 0.6219, 0.1291),
    13: (12, 0.1559, 0.1119, 0.204, 0.2e-3, 0.0014, 0.0008),
    14: (13, 0.0953, 0.0684, 0.204, 0.1e-3, 0.0224, 0.0083),
}

AGGREGATORS_15BUS = (
    ("agg1", (1, 2, 3)),
    ("agg2", (4, 5, 6, 12, 13)),
    ("agg3", (8, 7, 14)),
    ("agg4", (9, 10)),
    ("agg5", (11,)),
)


def network_15bus(line_caps: dict[int, float] | None = None) -> Network:
    """The 15-bus feeder; line_caps optionally overrides S per bus."""
    caps = line_caps or {}
    buses = [Bus(0, None, Vmin=1.0, Vmax=1.0)]
    for n in range(1, 15):
        anc, R, X, S, B, _, _ = _FEEDER15[n]
        buses.append(
            Bus(n, anc, R=R, X=X, G=0.0, B=B, S=caps.get(n, S), Vmin=0.81, Vmax=1.21)
        )
    return Network(buses)


def fixture_15bus(seed: int = 0, line_caps: dict[int, float] | None = None) -> Scenario:
    """15-bus feeder with loads redrawn from `seed` around the base values.

    Expensive period 0 (x + x^2) and cheap period 1 (x); zero-cost
    aggregators; one fully-active renewable unit at bus 11 with availability
    drawn from U[0, 0.6] per period.
    """
    base = {n: (row[5], row[6]) for n, row in _FEEDER15.items()}
    aggs = [AggregatorDef(a, frozenset(nodes)) for a, nodes in AGGREGATORS_15BUS]
    costs = CostModel(alpha=(1.0, 1.0), beta=(1.0, 0.0))
    scn = generate_scenario(
        network_15bus(line_caps),
        base,
        T=2,
        seed=seed,
        aggregators=aggs,
        costs=costs,
        der_specs={11: (0.6, 0.0, 0.0)},
        name="feeder15",
    )
    return scn


# Published reference operating point of the 15-bus feeder: net loads
# (p, q) per bus and period. Bus 11 nets consumption against renewable
# output (0.02 - 0.185 and 0.026 - 0.194).
_REFERENCE_P = {
    #    t=0      t=1
    1: (0.623, 1.05),
    2: (0.0, 0.0),
    3: (0.028, 0.037),
    4: (0.005, 0.027),
    5: (0.001, 0.031),
    6: (0.013, 0.026),
    7: (-0.131, -0.143),
    8: (0.023, 0.006),
    9: (0.002, 0.036),
    10: (0.014, 0.015),
    11: (0.02 - 0.185, 0.026 - 0.194),
    12: (0.107, 0.342),
    13: (0.003, 0.002),
    14: (0.022, 0.03),
}
_REFERENCE_Q = {
    1: (0.146, 0.245),
    2: (0.0, 0.0),
    3: (0.012, 0.015),
    4: (0.001, 0.007),
    5: (0.0, 0.008),
    6: (0.003, 0.006),
    7: (0.0, 0.0),
    8: (0.006, 0.001),
    9: (0.001, 0.022),
    10: (0.004, 0.004),
    11: (0.005, 0.006),
    12: (0.022, 0.071),
    13: (0.002, 0.001),
    14: (0.008, 0.011),
}


def fixture_15bus_table2_profiles() -> tuple[np.ndarray, np.ndarray]:
    """Fixed net loads (p[n,t], q[n,t]) of the published 15-bus solution.

    Arrays are shaped (15, 2) with row 0 (the root) zeroed; feed them to the
    fixed-load operator problem to reproduce the published flows and prices.
    """
    p = np.zeros((15, 2))
    q = np.zeros((15, 2))
    for n in range(1, 15):
        p[n] = _REFERENCE_P[n]
        q[n] = _REFERENCE_Q[n]
    return p, q
