"""Shared fixtures: a small fast state space and synthetic panel for the
module tests. The large canonical experiments live in test_acceptance.py."""

import numpy as np
import pytest

from blockdp import (
    NeighborBinning,
    OptimizerConfig,
    StateSpec,
    StructuralParams,
    SyntheticHazardConfig,
    build_likelihood_context,
    build_state_space,
    default_topology,
    fit_mle,
    generate_synthetic,
)

# Reference spatial-model parameter values used for utility and recovery oracles.
REF_SPATIAL = StructuralParams(
    theta_age=(-0.0060, -0.0085, -0.0183),
    theta_fail=-8.7453,
    theta_rc=-9.3352,
    gamma_lag=(-0.4314,),
    gamma_fail=(-0.4184,),
    beta=0.90,
)

# Toy data generating process: 208 states, strong signal, fast fits.
TOY_TRUTH = StructuralParams(
    theta_age=(-0.10, -0.16),
    theta_fail=-3.0,
    theta_rc=-4.0,
    gamma_lag=(-0.5,),
    gamma_fail=(-0.5,),
    beta=0.90,
)
TOY_HAZARD = SyntheticHazardConfig(base=(0.05, 0.08), slope=(0.004, 0.006), cap=0.3)

# Looser simplex settings for module-level fits; tolerances stay far below
# the parameter scales being asserted.
FAST_OPT = OptimizerConfig(xatol=1e-5, fatol=1e-7)


@pytest.fixture(scope="session")
def toy_space():
    return build_state_space(
        StateSpec(age_max=12, n_cages=2, binning=NeighborBinning.BINARY)
    )


@pytest.fixture(scope="session")
def toy_panel(toy_space):
    return generate_synthetic(
        TOY_TRUTH, TOY_HAZARD, default_topology(15, 8), toy_space, T=60, seed=0
    )


@pytest.fixture(scope="session")
def toy_ctx(toy_panel, toy_space):
    return build_likelihood_context(toy_panel, toy_space)


@pytest.fixture(scope="session")
def toy_fit(toy_ctx):
    return fit_mle(
        toy_ctx,
        TOY_TRUTH.with_vector(np.array([-0.01, -0.01, -5.0, -8.0, 0.0, 0.0])),
        optimizer_cfg=FAST_OPT,
    )


@pytest.fixture(scope="session")
def space_354():
    return build_state_space(
        StateSpec(age_max=58, n_cages=3, binning=NeighborBinning.NONE)
    )


@pytest.fixture(scope="session")
def space_1416():
    return build_state_space(
        StateSpec(age_max=58, n_cages=3, binning=NeighborBinning.BINARY)
    )
