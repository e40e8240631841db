"""Forward simulation with endogenous within-group feedback, scenario comparisons
under common random numbers, present-value cost accounting, and the channel
decomposition of interaction effects.

Within-period order is fixed: observe failures, observe neighbor summaries,
decide, then transition. Shock streams are keyed by (seed, node id, stream), so
every scenario in a comparison sees identical failure draws and decision
uniforms; only the CCP thresholds differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .bellman import StructuralParams, solve_vfi
from .errors import ConfigError, SimulationError
from .panel import Panel, Topology
from .statespace import StateSpace
from .transitions import FailureHazard, NeighborProcess, assemble_kernel

__all__ = [
    "SimInit",
    "SimResult",
    "Scenario",
    "UnitCosts",
    "CostReport",
    "ScenarioComparison",
    "ChannelEffects",
    "uniform_init",
    "init_from_panel",
    "simulate",
    "standard_scenarios",
    "run_scenarios",
    "discounted_cost",
    "channel_decomposition",
]

_STREAM_FAIL = 1
_STREAM_DECIDE = 2
_STREAM_INIT_AGE = 3


@dataclass(frozen=True)
class SimInit:
    """Initial cross-section: per-node age and cage, plus the previous period's
    decisions (they seed the lagged neighbor summaries at t=0)."""

    ages: np.ndarray
    cages: np.ndarray
    prev_decision: np.ndarray

    def __post_init__(self):
        for name in ("ages", "cages", "prev_decision"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n = self.ages.shape[0]
        if self.cages.shape != (n,) or self.prev_decision.shape != (n,):
            raise ConfigError("init arrays must be aligned")


def uniform_init(
    topology: Topology, cages: np.ndarray, age_max: int, seed: int = 0
) -> SimInit:
    """Panel-free fallback: ages uniform on the grid, no previous replacements."""
    rng = np.random.default_rng([seed, _STREAM_INIT_AGE])
    ages = rng.integers(0, age_max + 1, size=topology.n_nodes)
    return SimInit(ages, np.asarray(cages, dtype=np.int64), np.zeros(topology.n_nodes, np.int64))


def init_from_panel(panel: Panel, topology: Topology | None = None) -> SimInit:
    """Empirical initial distribution: each node's state in its final observed
    period; that period's decisions seed the t=0 lagged neighbor summaries."""
    if topology is None:
        topology = Topology.from_panel(panel)
    # panel is sorted by (node, period): the last row per node is its final period
    last = np.searchsorted(panel.node_id, topology.node_ids, side="right") - 1
    absent = (last < 0) | (panel.node_id[np.maximum(last, 0)] != topology.node_ids)
    if np.any(absent):
        missing = topology.node_ids[absent]
        raise SimulationError(f"topology nodes missing from panel: {missing[:5].tolist()}")
    return SimInit(panel.age[last], panel.cage[last], panel.decision[last])


@dataclass
class SimResult:
    """Per-period series plus the full per-node event log (a Panel)."""

    label: str
    seed: int
    replacements: np.ndarray   # (T,) replacement counts
    failures: np.ndarray       # (T,) failure counts
    mean_age: np.ndarray       # (T,) mean age at decision time
    event_log: Panel

    @property
    def horizon(self) -> int:
        return int(self.replacements.shape[0])

    @property
    def cumulative_replacements(self) -> int:
        return int(self.replacements.sum())

    @property
    def cumulative_failures(self) -> int:
        return int(self.failures.sum())


def _keyed_uniforms(seed: int, node_ids: np.ndarray, stream: int, T: int) -> np.ndarray:
    """(N, T) uniforms; row i is the stream keyed by (seed, node_ids[i], stream)."""
    out = np.empty((node_ids.size, T))
    for i, node in enumerate(node_ids):
        out[i] = np.random.default_rng([seed, int(node), stream]).random(T)
    return out


def simulate(
    ccp: np.ndarray,
    space: StateSpace,
    topology: Topology,
    hazard: FailureHazard,
    init: SimInit,
    T: int = 36,
    seed: int = 0,
    label: str = "sim",
) -> SimResult:
    """Simulate all nodes for T periods under a per-state replacement probability.

    Neighbor summaries are computed from actual group-mate events (focal node
    excluded): lagged counts from t-1 decisions, failure counts from this
    period's draws. Replacement resets age next period; continuation saturates
    at the space's age cap. Failure draws use the hazard at the current age.
    """
    ccp = np.asarray(ccp, dtype=float)
    if ccp.shape != (space.size,):
        raise SimulationError(
            f"policy has {ccp.shape} entries, state space has {space.size}"
        )
    if T < 1:
        raise ConfigError("horizon T must be >= 1")
    n = topology.n_nodes
    if init.ages.shape != (n,):
        raise SimulationError("init not aligned with topology")
    if np.any(init.cages >= space.spec.n_cages) or np.any(init.ages > space.n_ages - 1):
        raise SimulationError("initial states fall outside the policy's state space")

    node_ids = topology.node_ids
    # compress group ids to 0..G-1 for bincount accumulation
    _, group_idx = np.unique(topology.group_of_node, return_inverse=True)
    n_groups = int(group_idx.max()) + 1
    binning = space.spec.binning

    u_fail = _keyed_uniforms(seed, node_ids, _STREAM_FAIL, T)
    u_dec = _keyed_uniforms(seed, node_ids, _STREAM_DECIDE, T)

    age = init.ages.copy()
    cages = init.cages
    prev_dec = init.prev_decision.astype(np.int64).copy()

    repl_series = np.zeros(T, dtype=np.int64)
    fail_series = np.zeros(T, dtype=np.int64)
    age_series = np.zeros(T)
    log_node, log_period = [], []
    log_age, log_fail, log_dec, log_nl, log_nf = [], [], [], [], []

    for t in range(T):
        fail = (u_fail[:, t] < hazard.table[age, cages]).astype(np.int64)
        grp_prev_repl = np.bincount(group_idx, weights=prev_dec, minlength=n_groups)
        nbr_lag_count = grp_prev_repl[group_idx].astype(np.int64) - prev_dec
        grp_fail = np.bincount(group_idx, weights=fail, minlength=n_groups)
        nbr_fail_count = grp_fail[group_idx].astype(np.int64) - fail

        sid = space.encode(
            age, cages, fail, binning.bin_count(nbr_lag_count),
            binning.bin_count(nbr_fail_count),
        )
        dec = (u_dec[:, t] < ccp[sid]).astype(np.int64)

        repl_series[t] = dec.sum()
        fail_series[t] = fail.sum()
        age_series[t] = age.mean()
        log_node.append(node_ids)
        log_period.append(np.full(n, t, dtype=np.int64))
        log_age.append(age.copy())
        log_fail.append(fail)
        log_dec.append(dec)
        log_nl.append(nbr_lag_count)
        log_nf.append(nbr_fail_count)

        age = np.where(dec == 1, 0, np.minimum(age + 1, space.n_ages - 1))
        prev_dec = dec

    event_log = Panel(
        np.concatenate(log_node),
        np.tile(topology.group_of_node, T),
        np.concatenate(log_period),
        np.concatenate(log_age),
        np.tile(cages, T),
        np.concatenate(log_fail),
        np.concatenate(log_dec),
        np.concatenate(log_nl),
        np.concatenate(log_nf),
    )
    return SimResult(label, seed, repl_series, fail_series, age_series, event_log)


@dataclass(frozen=True)
class Scenario:
    """A policy restriction applied to fitted parameters before the solve.

    zero_lag / zero_fail shut interaction channels off; gamma_scale rescales the
    surviving coefficients (for spillover-strength experiments).
    """

    label: str
    zero_lag: bool = False
    zero_fail: bool = False
    gamma_scale: float = 1.0

    def apply(self, params: StructuralParams) -> StructuralParams:
        arity = len(params.gamma_lag)
        lag = (0.0,) * arity if self.zero_lag else tuple(
            g * self.gamma_scale for g in params.gamma_lag
        )
        fail = (0.0,) * arity if self.zero_fail else tuple(
            g * self.gamma_scale for g in params.gamma_fail
        )
        return dc_replace(params, gamma_lag=lag, gamma_fail=fail)


def standard_scenarios(gamma_scale: float = 1.0) -> list[Scenario]:
    """The four-way comparison: both channels, each alone, and none."""
    return [
        Scenario("full", gamma_scale=gamma_scale),
        Scenario("lag-only", zero_fail=True, gamma_scale=gamma_scale),
        Scenario("fail-only", zero_lag=True, gamma_scale=gamma_scale),
        Scenario("none", zero_lag=True, zero_fail=True),
    ]


@dataclass(frozen=True)
class UnitCosts:
    """Replacement unit cost and the failure-cost multiplier applied to it.

    The failure-event cost is a modeling convention (replacement cost times
    failure_multiplier, default 1.0), not a measured quantity; cost reports
    carry a note saying so.
    """

    replacement: float = 7699.0
    failure_multiplier: float = 1.0

    def __post_init__(self):
        if self.replacement < 0 or self.failure_multiplier < 0:
            raise ConfigError("unit costs must be nonnegative")

    @property
    def failure(self) -> float:
        return self.replacement * self.failure_multiplier


@dataclass
class CostReport:
    discounted_replacement_cost: float
    discounted_failure_cost: float
    total: float
    unit_replacement_cost: float
    unit_failure_cost: float
    beta: float
    note: str = (
        "failure unit cost = replacement cost x configurable multiplier "
        "(default 1.0), a convention rather than a measured price"
    )

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def discounted_cost(sim: SimResult, unit_costs: UnitCosts, beta: float) -> CostReport:
    """Present value sum_t beta^t (replace_cost * repl_t + fail_cost * fail_t)."""
    discount = beta ** np.arange(sim.horizon)
    repl = float(np.sum(discount * unit_costs.replacement * sim.replacements))
    fail = float(np.sum(discount * unit_costs.failure * sim.failures))
    return CostReport(
        discounted_replacement_cost=repl,
        discounted_failure_cost=fail,
        total=repl + fail,
        unit_replacement_cost=unit_costs.replacement,
        unit_failure_cost=unit_costs.failure,
        beta=beta,
    )


@dataclass
class ScenarioComparison:
    """Paired scenario outputs sharing topology, hazard, horizon, and shocks."""

    results: dict[str, SimResult]
    costs: dict[str, CostReport]
    reference: str = "full"

    def outcome(self, label: str, name: str) -> float:
        if label not in self.results:
            raise ConfigError(f"comparison has no scenario {label!r}")
        if name == "cumulative_replacements":
            return float(self.results[label].cumulative_replacements)
        if name == "cumulative_failures":
            return float(self.results[label].cumulative_failures)
        if name == "total_cost":
            return float(self.costs[label].total)
        raise ConfigError(f"unknown outcome {name!r}")

    def difference_vs_reference(self, label: str, name: str) -> float:
        """Signed change caused by moving from the reference to this scenario."""
        return self.outcome(label, name) - self.outcome(self.reference, name)


def run_scenarios(
    params_or_fit,
    space: StateSpace,
    hazard: FailureHazard,
    nbr_process: NeighborProcess,
    topology: Topology,
    init: SimInit,
    scenarios: list[Scenario] | None = None,
    T: int = 36,
    seed: int = 0,
    unit_costs: UnitCosts | None = None,
    vfi_tol: float = 1e-10,
    vfi_max_iter: int = 10_000,
) -> ScenarioComparison:
    """Solve and simulate each scenario under shared shock streams."""
    params = getattr(params_or_fit, "params_hat", params_or_fit)
    if not isinstance(params, StructuralParams):
        raise ConfigError("run_scenarios needs StructuralParams or an EstimationResult")
    scenarios = standard_scenarios() if scenarios is None else scenarios
    unit_costs = unit_costs or UnitCosts()
    kernel = assemble_kernel(hazard, nbr_process, space)
    results, costs = {}, {}
    for sc in scenarios:
        solved = solve_vfi(space, kernel, sc.apply(params), vfi_tol, vfi_max_iter)
        sim = simulate(
            solved.ccp, space, topology, hazard, init, T=T, seed=seed, label=sc.label
        )
        results[sc.label] = sim
        costs[sc.label] = discounted_cost(sim, unit_costs, params.beta)
    return ScenarioComparison(results, costs)


@dataclass
class ChannelEffects:
    """One outcome's decomposition across the two interaction channels.

    Effects are oriented as the change caused by removing a channel, so with
    negative interaction coefficients (neighbor activity encourages own
    replacement) removing a channel lowers replacements and the effects come
    out negative.
    """

    outcome: str
    full_value: float
    lag_effect: float      # fail-only minus full: removing the lag channel
    fail_effect: float     # lag-only minus full: removing the failure channel
    total_effect: float    # none minus full: removing both
    residual: float        # total minus lag minus fail (channel interaction)
    residual_share: float  # residual / total (0 when total is 0)

    def to_dict(self) -> dict:
        return self.__dict__.copy()


OUTCOMES = ("cumulative_replacements", "cumulative_failures", "total_cost")


def channel_decomposition(comparison: ScenarioComparison) -> dict[str, ChannelEffects]:
    """Split each outcome's total interaction effect into lag and failure channels
    plus the interaction residual; lag + fail + residual = total exactly.

    The lag effect is measured by removing the lag channel (the fail-only
    scenario), the failure effect by removing the failure channel (lag-only),
    and the total by removing both (none), each relative to the full model."""
    needed = {"full", "lag-only", "fail-only", "none"}
    missing = needed - set(comparison.results)
    if missing:
        raise ConfigError(f"channel decomposition needs scenarios {sorted(missing)}")
    out = {}
    for name in OUTCOMES:
        full = comparison.outcome("full", name)
        lag_eff = comparison.outcome("fail-only", name) - full
        fail_eff = comparison.outcome("lag-only", name) - full
        total = comparison.outcome("none", name) - full
        residual = total - lag_eff - fail_eff
        share = residual / total if total != 0 else 0.0
        out[name] = ChannelEffects(name, full, lag_eff, fail_eff, total, residual, share)
    return out
