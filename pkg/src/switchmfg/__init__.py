"""Numerical laboratory for contract competition with a switching agent.

One agent works for whichever of n symmetric principals currently employs it
and may switch at a controlled Poisson intensity; each principal offers a
promised-value contract.  The package solves the agent's coupled promised-
value system by regression Monte Carlo, simulates the randomized switching,
finds the contract-competition fixed point over a continuum of principals,
and measures how the finite systems approach that limit.
"""
from .cost_model import (
    ConjugateTable,
    CostSpec,
    argmax_intensity,
    conjugate,
    cost,
    verify_conjugacy,
)
from .stochastic_core import (
    MeasureFlow,
    PathBundle,
    TimeGrid,
    derive_seed,
    flow_metadata,
    flow_to_csv_bytes,
    generate_brownian,
    w2_marginal,
    w2_path_coupled,
    w2_path_exact,
)
from .agent_bsde import (
    BsdeSolution,
    ContractSpec,
    PicardConvergenceError,
    RegressionConfig,
    RegressionError,
    build_meanfield_contract,
    deviation_volatility,
    evaluate_contract,
    marginal_tables,
    meanfield_intensity,
    optimal_intensity,
    solution_to_csv_bytes,
    solve_meanfield_bsde,
    solve_nplayer,
)
from .switching_simulator import (
    ConstantRatePolicy,
    DeterministicContracts,
    GirsanovCheck,
    GridTooCoarseError,
    MeanFieldContracts,
    OptimalSwitchPolicy,
    SwitchTrajectory,
    UtilitySpec,
    agent_value_mc,
    check_girsanov,
    principal_value_direct,
    principal_value_weighted,
    simulate_switching,
    survival_weights,
    trajectory_to_csv_bytes,
)
from .mfg_solver import (
    BestResponse,
    DefectCheck,
    EquilibriumResult,
    MfgConfig,
    best_response,
    best_response_defect,
    fixed_point,
    principal_objective,
)
from .chaos_experiments import (
    ChaosConfig,
    ChaosReport,
    ExperimentFailure,
    ValueReport,
    attach_lemma,
    chaos_sweep,
    lemma_estimates_check,
    reference_sample,
    report,
    value_convergence,
)
from .config import ConfigError, ExperimentConfig

__all__ = [
    "BestResponse",
    "BsdeSolution",
    "ChaosConfig",
    "ChaosReport",
    "ConfigError",
    "ConjugateTable",
    "ConstantRatePolicy",
    "ContractSpec",
    "CostSpec",
    "DefectCheck",
    "DeterministicContracts",
    "EquilibriumResult",
    "ExperimentConfig",
    "ExperimentFailure",
    "GirsanovCheck",
    "GridTooCoarseError",
    "MeanFieldContracts",
    "MeasureFlow",
    "MfgConfig",
    "OptimalSwitchPolicy",
    "PathBundle",
    "PicardConvergenceError",
    "RegressionConfig",
    "RegressionError",
    "SwitchTrajectory",
    "TimeGrid",
    "UtilitySpec",
    "ValueReport",
    "agent_value_mc",
    "argmax_intensity",
    "attach_lemma",
    "best_response",
    "best_response_defect",
    "build_meanfield_contract",
    "chaos_sweep",
    "check_girsanov",
    "conjugate",
    "cost",
    "derive_seed",
    "deviation_volatility",
    "evaluate_contract",
    "fixed_point",
    "flow_metadata",
    "flow_to_csv_bytes",
    "generate_brownian",
    "lemma_estimates_check",
    "marginal_tables",
    "meanfield_intensity",
    "optimal_intensity",
    "principal_objective",
    "principal_value_direct",
    "principal_value_weighted",
    "reference_sample",
    "report",
    "simulate_switching",
    "solution_to_csv_bytes",
    "solve_meanfield_bsde",
    "solve_nplayer",
    "survival_weights",
    "trajectory_to_csv_bytes",
    "value_convergence",
    "verify_conjugacy",
    "w2_marginal",
    "w2_path_coupled",
    "w2_path_exact",
]
