"""Dynamic discrete replacement models with localized within-group interactions.

Units (e.g. GPUs in shared cages) age, fail, and get replaced; each unit's flow
utility may depend on lagged replacement activity and contemporaneous failures
among its group neighbors. Because groups do not interact, the controlled
transition kernel is block diagonal and the joint dynamic program decomposes
exactly into per-group programs; this package solves the per-group model, checks
the decomposition against a brute-force joint solver, estimates the structural
parameters by nested fixed point maximum likelihood, and simulates
counterfactual scenarios under common random numbers.
"""

from .bellman import (
    DecompositionReport,
    JointSolveResult,
    SolveResult,
    StructuralParams,
    benchmark_decomposition,
    blockdiag_matvec_pair,
    ccp_table,
    flow_utility,
    flow_utility_table,
    random_group,
    solve_joint_oracle,
    solve_vfi,
    verify_decomposition,
    write_solution_csv,
)
from .config import RunConfig, default_truth
from .counterfactual import (
    ChannelEffects,
    CostReport,
    Scenario,
    ScenarioComparison,
    SimInit,
    SimResult,
    UnitCosts,
    channel_decomposition,
    discounted_cost,
    init_from_panel,
    run_scenarios,
    simulate,
    standard_scenarios,
    uniform_init,
)
from .errors import (
    BlockDPError,
    BootstrapError,
    ConfigError,
    ConvergenceError,
    EstimationError,
    KernelError,
    PanelError,
    SimulationError,
    SizeError,
)
from .estimate import (
    BootstrapResult,
    EstimationResult,
    LikelihoodContext,
    LRResult,
    OptimizerConfig,
    SurfaceGrid,
    asymptotic_se,
    block_bootstrap,
    build_likelihood_context,
    default_init,
    fit_mle,
    information_criteria,
    likelihood_surface,
    lr_test,
    negative_log_likelihood,
    null_nll,
    pseudo_r2,
)
from .panel import (
    Panel,
    PanelValidationReport,
    Topology,
    derive_neighbor_vars,
    load_panel,
    validate_panel,
    write_panel,
)
from .statespace import (
    JointGroupSpec,
    JointSpace,
    NeighborBinning,
    StateSpace,
    StateSpec,
    UnitState,
    build_joint_space,
    build_state_space,
)
from .synthetic import (
    SyntheticHazardConfig,
    default_cages,
    default_topology,
    generate_synthetic,
)
from .transitions import (
    CONTINUE,
    REPLACE,
    ControlledKernel,
    FailureHazard,
    KernelValidationReport,
    NeighborProcess,
    assemble_kernel,
    estimate_failure_hazard,
    estimate_neighbor_process,
    kernel_triplets,
    validate_kernel,
    write_kernel_csv,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # state space
    "NeighborBinning",
    "StateSpec",
    "UnitState",
    "StateSpace",
    "JointGroupSpec",
    "JointSpace",
    "build_state_space",
    "build_joint_space",
    # panel
    "Panel",
    "Topology",
    "PanelValidationReport",
    "load_panel",
    "write_panel",
    "derive_neighbor_vars",
    "validate_panel",
    # transitions
    "FailureHazard",
    "NeighborProcess",
    "CONTINUE",
    "REPLACE",
    "ControlledKernel",
    "KernelValidationReport",
    "estimate_failure_hazard",
    "estimate_neighbor_process",
    "assemble_kernel",
    "validate_kernel",
    "kernel_triplets",
    "write_kernel_csv",
    # bellman
    "StructuralParams",
    "SolveResult",
    "JointSolveResult",
    "DecompositionReport",
    "flow_utility",
    "flow_utility_table",
    "solve_vfi",
    "ccp_table",
    "write_solution_csv",
    "solve_joint_oracle",
    "verify_decomposition",
    "blockdiag_matvec_pair",
    "random_group",
    "benchmark_decomposition",
    # estimation
    "LikelihoodContext",
    "OptimizerConfig",
    "EstimationResult",
    "BootstrapResult",
    "LRResult",
    "SurfaceGrid",
    "build_likelihood_context",
    "negative_log_likelihood",
    "null_nll",
    "information_criteria",
    "pseudo_r2",
    "lr_test",
    "default_init",
    "fit_mle",
    "asymptotic_se",
    "block_bootstrap",
    "likelihood_surface",
    # counterfactual
    "SimInit",
    "SimResult",
    "Scenario",
    "ScenarioComparison",
    "UnitCosts",
    "CostReport",
    "ChannelEffects",
    "uniform_init",
    "init_from_panel",
    "simulate",
    "standard_scenarios",
    "run_scenarios",
    "discounted_cost",
    "channel_decomposition",
    # synthetic data
    "SyntheticHazardConfig",
    "default_topology",
    "default_cages",
    "generate_synthetic",
    # config
    "RunConfig",
    "default_truth",
    # errors
    "BlockDPError",
    "ConfigError",
    "PanelError",
    "KernelError",
    "SizeError",
    "ConvergenceError",
    "EstimationError",
    "BootstrapError",
    "SimulationError",
]
