"""Synthetic panel generation for recovery experiments.

Nodes are simulated jointly within groups: failures come from a known hazard
table, neighbor summaries are computed from actual group-mate events, and
decisions are drawn from the CCPs of a solved model at the true parameters.

Because agents' continuation values depend on beliefs about how the neighbor
summaries evolve, the generator runs a short fixed-point loop: solve the policy
under current neighbor-process beliefs, simulate, re-estimate the neighbor
process from the simulated panel, repeat. After a few rounds the process the
data exhibit matches the process the policy was solved under, which is what a
recovery experiment needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bellman import StructuralParams, solve_vfi
from .counterfactual import SimInit, simulate
from .errors import ConfigError
from .panel import Panel, Topology
from .statespace import StateSpace
from .transitions import (
    FailureHazard,
    NeighborProcess,
    assemble_kernel,
    estimate_neighbor_process,
)

__all__ = [
    "SyntheticHazardConfig",
    "default_topology",
    "default_cages",
    "generate_synthetic",
]

_STREAM_INIT_AGE = 3


@dataclass(frozen=True)
class SyntheticHazardConfig:
    """Ground-truth failure hazard, affine in age per cage and clipped.

    P(fail | age, cage c) = min(base[c] + slope[c] * age, cap).
    """

    base: tuple[float, ...] = (0.004, 0.007, 0.012)
    slope: tuple[float, ...] = (0.00008, 0.00014, 0.00024)
    cap: float = 0.30

    def table(self, n_ages: int, n_cages: int) -> np.ndarray:
        if len(self.base) != n_cages or len(self.slope) != n_cages:
            raise ConfigError(
                f"hazard config has {len(self.base)} cages, space needs {n_cages}"
            )
        ages = np.arange(n_ages)[:, None]
        t = np.asarray(self.base)[None, :] + np.asarray(self.slope)[None, :] * ages
        return np.clip(t, 0.0, self.cap)

    def to_hazard(self, n_ages: int, n_cages: int) -> FailureHazard:
        return FailureHazard.from_table(self.table(n_ages, n_cages))


def default_topology(n_groups: int = 100, group_size: int = 30) -> Topology:
    """Contiguous node ids, groups of equal size."""
    n = n_groups * group_size
    nodes = np.arange(n, dtype=np.int64)
    return Topology(nodes, nodes // group_size)


def default_cages(topology: Topology, n_cages: int) -> np.ndarray:
    """Assign each group a cage class round-robin."""
    return (topology.group_of_node % n_cages).astype(np.int64)


def _initial_guess_process(
    hazard_table: np.ndarray, n_cages: int, n_levels: int, group_size: float
) -> NeighborProcess:
    """Pre-simulation beliefs: neighbor event counts roughly Poisson with rates
    implied by the mean hazard and a nominal 1% replacement rate, independent of
    the current level. Refined away by the belief rounds."""
    if n_levels == 1:
        return NeighborProcess.trivial(n_cages, 1)

    def binned_poisson(lam: float) -> np.ndarray:
        ks = np.arange(n_levels - 1)
        pmf = np.exp(-lam) * lam**ks / np.array([math.factorial(k) for k in ks])
        return np.concatenate([pmf, [max(1.0 - pmf.sum(), 0.0)]])

    lag_tables, fail_tables = [], []
    for c in range(n_cages):
        lam_fail = float(hazard_table[:, c].mean()) * (group_size - 1)
        row_fail = binned_poisson(lam_fail)
        row_lag = binned_poisson(0.01 * (group_size - 1))
        lag_tables.append(np.tile(row_lag, (n_levels, 1)))
        fail_tables.append(np.tile(row_fail, (n_levels, 1)))
    return NeighborProcess(np.stack(lag_tables), np.stack(fail_tables))


def generate_synthetic(
    truth: StructuralParams,
    hazard_cfg: SyntheticHazardConfig,
    topology: Topology,
    space: StateSpace,
    T: int = 80,
    seed: int = 0,
    cages: np.ndarray | None = None,
    belief_rounds: int = 3,
    vfi_tol: float = 1e-10,
    vfi_max_iter: int = 10_000,
) -> Panel:
    """Simulate a panel at known parameters; byte-for-byte reproducible per seed.

    Initial ages are uniform on the age grid (keyed by the master seed), initial
    failures are drawn at those ages, and the first period's lagged neighbor
    summaries are zero.
    """
    if T < 2:
        raise ConfigError("need T >= 2 to generate usable transitions")
    if len(truth.gamma_lag) != space.n_levels - 1:
        raise ConfigError(
            f"truth gamma arity {len(truth.gamma_lag)} does not match the "
            f"space's {space.n_levels} neighbor levels"
        )
    if cages is None:
        cages = default_cages(topology, space.spec.n_cages)
    hazard = hazard_cfg.to_hazard(space.n_ages, space.spec.n_cages)

    rng = np.random.default_rng([seed, _STREAM_INIT_AGE])
    init = SimInit(
        ages=rng.integers(0, space.n_ages, size=topology.n_nodes),
        cages=cages,
        prev_decision=np.zeros(topology.n_nodes, dtype=np.int64),
    )

    sizes = list(topology.group_sizes().values())
    nbr = _initial_guess_process(
        hazard.table, space.spec.n_cages, space.n_levels, float(np.mean(sizes))
    )
    panel = None
    for _ in range(max(belief_rounds, 1)):
        kernel = assemble_kernel(hazard, nbr, space)
        solved = solve_vfi(space, kernel, truth, vfi_tol, vfi_max_iter)
        sim = simulate(
            solved.ccp, space, topology, hazard, init, T=T, seed=seed, label="truth"
        )
        panel = sim.event_log
        nbr = estimate_neighbor_process(panel, space)
    return panel
