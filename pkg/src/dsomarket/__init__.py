"""Distribution-grid market toolkit: convex AC power-flow relaxations on
radial feeders, nodal marginal prices, decentralized operator/aggregator
negotiation, and settlement mechanisms."""

from .network import Bus, Network, NetworkError, TimeHorizon, load_network, save_network
from .scenario import (
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
    save_scenario,
)
from .conic import (
    ConicProgram,
    ConicProgramBuilder,
    ConicSolution,
    DEFAULT_TOL,
    INFEASIBLE,
    OPTIMAL,
    UNBOUNDED,
    kkt_residuals,
    solve,
)
from .opf import (
    DlmpSet,
    DualSet,
    OpfError,
    OpfSolution,
    OpfVariables,
    build_central,
    build_dso,
    build_dso_truncated,
    build_la,
    check_dlmp_ancestor_identity,
    check_exactness,
    check_subgradient,
    check_sufficient_conditions,
    extract_dlmps,
    extract_variables,
    solve_opf,
)
from .coordination import (
    AlgoConfig,
    CoordinationError,
    CoordinationResult,
    IterationLog,
    Message,
    check_message_locality,
    coordinate,
    delivered,
    la_best_response,
    operator_cost,
    primal_residual,
    run_admm,
    run_dual_ascent,
    run_pdgs,
    system_cost,
)
from .mechanism import (
    Example1Record,
    MechanismError,
    Settlement,
    StudyOutcome,
    VcgReport,
    payments_table,
    reproduce_example1,
    scenario_without,
    settle,
    vcg_payments,
)

__all__ = [
    "AggregatorDef",
    "AlgoConfig",
    "Bus",
    "ConicProgram",
    "ConicProgramBuilder",
    "ConicSolution",
    "CoordinationError",
    "CoordinationResult",
    "CostModel",
    "DEFAULT_TOL",
    "DerUnit",
    "DlmpSet",
    "DualSet",
    "Example1Record",
    "FlexibleLoad",
    "INFEASIBLE",
    "IterationLog",
    "MechanismError",
    "Message",
    "Network",
    "NetworkError",
    "OPTIMAL",
    "OpfError",
    "OpfSolution",
    "OpfVariables",
    "Scenario",
    "ScenarioError",
    "Settlement",
    "StudyOutcome",
    "TimeHorizon",
    "TrackingCost",
    "UNBOUNDED",
    "VcgReport",
    "build_central",
    "build_dso",
    "build_dso_truncated",
    "build_la",
    "check_dlmp_ancestor_identity",
    "check_exactness",
    "check_message_locality",
    "check_subgradient",
    "check_sufficient_conditions",
    "coordinate",
    "delivered",
    "extract_dlmps",
    "extract_variables",
    "fixture_15bus",
    "fixture_15bus_table2_profiles",
    "fixture_toy",
    "generate_scenario",
    "kkt_residuals",
    "la_best_response",
    "load_network",
    "load_scenario",
    "operator_cost",
    "payments_table",
    "primal_residual",
    "reproduce_example1",
    "run_admm",
    "run_dual_ascent",
    "run_pdgs",
    "save_network",
    "save_scenario",
    "scenario_without",
    "settle",
    "solve",
    "solve_opf",
    "system_cost",
    "vcg_payments",
]
