"""Run configuration: one JSON document drives every command-line entry point.

Every section is optional and falls back to the defaults used throughout the
package, so `{}` is a complete configuration. Unknown keys anywhere in the
document are rejected rather than ignored; a typo like "vfi_tol" at the top
level should fail loudly, not silently run at the default tolerance. Parsing
is lossless: `RunConfig.from_dict(cfg.to_dict()) == cfg`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bellman import StructuralParams
from .counterfactual import UnitCosts
from .errors import ConfigError
from .estimate import OptimizerConfig
from .statespace import NeighborBinning, StateSpec
from .synthetic import SyntheticHazardConfig

SCENARIO_LABELS = ("full", "lag-only", "fail-only", "none")


def _section(data: dict, key: str) -> dict:
    raw = data.pop(key, None)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {key!r} must be a JSON object")
    return dict(raw)


def _reject_unknown(raw: dict, where: str) -> None:
    if raw:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(raw)}")


def _number(raw: dict, key: str, default: float, where: str) -> float:
    if key not in raw:
        return default
    val = raw.pop(key)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {val!r}")
    return float(val)


def _integer(raw: dict, key: str, default: int, where: str) -> int:
    if key not in raw:
        return default
    val = raw.pop(key)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{where}.{key} must be an integer, got {val!r}")
    return val


def _number_tuple(raw: dict, key: str, default, where: str):
    if key not in raw:
        return default
    val = raw.pop(key)
    if not isinstance(val, (list, tuple)) or any(
        isinstance(v, bool) or not isinstance(v, (int, float)) for v in val
    ):
        raise ConfigError(f"{where}.{key} must be a list of numbers, got {val!r}")
    return tuple(float(v) for v in val)


def _string_tuple(raw: dict, key: str, default, where: str):
    if key not in raw:
        return default
    val = raw.pop(key)
    if not isinstance(val, (list, tuple)) or any(not isinstance(v, str) for v in val):
        raise ConfigError(f"{where}.{key} must be a list of strings, got {val!r}")
    return tuple(val)


def default_truth(n_cages: int, gamma_arity: int, beta: float) -> StructuralParams:
    """Built-in data generating values for synthetic panels.

    The binary-interaction and two-bin intensity defaults are the values used by
    the recovery experiments; other arities need explicit truth in the config.
    """
    if n_cages == 3:
        theta_age = (-0.0060, -0.0085, -0.0183)
    else:
        theta_age = tuple(np.linspace(-0.0060, -0.0183, n_cages))
    gammas = {
        0: ((), ()),
        1: ((-0.4314,), (-0.4184,)),
        2: ((-0.252, -0.887), (-0.375, -0.479)),
    }
    if gamma_arity not in gammas:
        raise ConfigError(
            f"no built-in truth for gamma arity {gamma_arity}; "
            "set synthetic.truth explicitly"
        )
    gamma_lag, gamma_fail = gammas[gamma_arity]
    return StructuralParams(
        theta_age=theta_age,
        theta_fail=-8.7453,
        theta_rc=-9.3352,
        gamma_lag=gamma_lag,
        gamma_fail=gamma_fail,
        beta=beta,
    )


@dataclass(frozen=True)
class SimulationConfig:
    """Counterfactual horizon, seeding, and scenario selection."""

    T: int = 36
    seed: int = 0
    scenarios: tuple[str, ...] = SCENARIO_LABELS
    gamma_scale: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"simulation.T must be >= 1, got {self.T}")
        bad = [s for s in self.scenarios if s not in SCENARIO_LABELS]
        if bad:
            raise ConfigError(
                f"unknown scenario label(s) {bad}; valid: {list(SCENARIO_LABELS)}"
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "SimulationConfig":
        out = cls(
            T=_integer(raw, "T", 36, "simulation"),
            seed=_integer(raw, "seed", 0, "simulation"),
            scenarios=_string_tuple(raw, "scenarios", SCENARIO_LABELS, "simulation"),
            gamma_scale=_number(raw, "gamma_scale", 1.0, "simulation"),
        )
        _reject_unknown(raw, "simulation")
        return out

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "seed": self.seed,
            "scenarios": list(self.scenarios),
            "gamma_scale": self.gamma_scale,
        }


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError(f"bootstrap.B must be >= 1, got {self.B}")

    @classmethod
    def from_dict(cls, raw: dict) -> "BootstrapConfig":
        out = cls(
            B=_integer(raw, "B", 100, "bootstrap"),
            seed=_integer(raw, "seed", 0, "bootstrap"),
        )
        _reject_unknown(raw, "bootstrap")
        return out

    def to_dict(self) -> dict:
        return {"B": self.B, "seed": self.seed}


@dataclass(frozen=True)
class SyntheticConfig:
    """Synthetic panel dimensions plus the data generating parameters.

    truth is stored as raw field tuples (not StructuralParams) so the section
    round-trips through JSON; build_truth attaches the run-level beta.
    """

    n_groups: int = 100
    group_size: int = 30
    T: int = 80
    seed: int = 0
    belief_rounds: int = 3
    truth: tuple | None = None      # (theta_age, theta_fail, theta_rc, gamma_lag, gamma_fail)
    hazard: SyntheticHazardConfig = SyntheticHazardConfig()

    def __post_init__(self):
        if self.n_groups < 1 or self.group_size < 2:
            raise ConfigError("synthetic panel needs n_groups >= 1 and group_size >= 2")

    @classmethod
    def from_dict(cls, raw: dict, n_cages: int) -> "SyntheticConfig":
        truth_raw = _section(raw, "truth")
        truth = None
        if truth_raw:
            truth = (
                _number_tuple(truth_raw, "theta_age", None, "synthetic.truth"),
                _number(truth_raw, "theta_fail", None, "synthetic.truth"),
                _number(truth_raw, "theta_rc", None, "synthetic.truth"),
                _number_tuple(truth_raw, "gamma_lag", (), "synthetic.truth"),
                _number_tuple(truth_raw, "gamma_fail", (), "synthetic.truth"),
            )
            if truth[0] is None or truth[1] is None or truth[2] is None:
                raise ConfigError(
                    "synthetic.truth needs theta_age, theta_fail, and theta_rc"
                )
            _reject_unknown(truth_raw, "synthetic.truth")
        hazard_raw = _section(raw, "hazard")
        default_h = SyntheticHazardConfig()
        hazard = SyntheticHazardConfig(
            base=_number_tuple(hazard_raw, "base", default_h.base, "synthetic.hazard"),
            slope=_number_tuple(hazard_raw, "slope", default_h.slope, "synthetic.hazard"),
            cap=_number(hazard_raw, "cap", default_h.cap, "synthetic.hazard"),
        )
        _reject_unknown(hazard_raw, "synthetic.hazard")
        if len(hazard.base) != n_cages or len(hazard.slope) != n_cages:
            raise ConfigError(
                f"synthetic.hazard base/slope need one entry per cage type "
                f"({n_cages}), got {len(hazard.base)}/{len(hazard.slope)}"
            )
        out = cls(
            n_groups=_integer(raw, "n_groups", 100, "synthetic"),
            group_size=_integer(raw, "group_size", 30, "synthetic"),
            T=_integer(raw, "T", 80, "synthetic"),
            seed=_integer(raw, "seed", 0, "synthetic"),
            belief_rounds=_integer(raw, "belief_rounds", 3, "synthetic"),
            truth=truth,
            hazard=hazard,
        )
        _reject_unknown(raw, "synthetic")
        return out

    def build_truth(self, n_cages: int, gamma_arity: int, beta: float) -> StructuralParams:
        if self.truth is None:
            return default_truth(n_cages, gamma_arity, beta)
        theta_age, theta_fail, theta_rc, gamma_lag, gamma_fail = self.truth
        if len(theta_age) != n_cages:
            raise ConfigError(
                f"synthetic.truth.theta_age has {len(theta_age)} entries "
                f"but the state spec has {n_cages} cage types"
            )
        if len(gamma_lag) != gamma_arity or len(gamma_fail) != gamma_arity:
            raise ConfigError(
                f"synthetic.truth gamma arity must be {gamma_arity} to match "
                "the neighbor binning"
            )
        return StructuralParams(theta_age, theta_fail, theta_rc,
                                gamma_lag, gamma_fail, beta)

    def to_dict(self) -> dict:
        out = {
            "n_groups": self.n_groups,
            "group_size": self.group_size,
            "T": self.T,
            "seed": self.seed,
            "belief_rounds": self.belief_rounds,
            "hazard": {
                "base": list(self.hazard.base),
                "slope": list(self.hazard.slope),
                "cap": self.hazard.cap,
            },
        }
        if self.truth is not None:
            theta_age, theta_fail, theta_rc, gamma_lag, gamma_fail = self.truth
            out["truth"] = {
                "theta_age": list(theta_age),
                "theta_fail": theta_fail,
                "theta_rc": theta_rc,
                "gamma_lag": list(gamma_lag),
                "gamma_fail": list(gamma_fail),
            }
        return out


@dataclass(frozen=True)
class RunConfig:
    """Everything a batch run needs besides the data files themselves."""

    state: StateSpec = StateSpec()
    beta: float = 0.90
    hazard_alpha: float = 0.5
    vfi_tol: float = 1e-10
    vfi_max_iter: int = 10_000
    optimizer: OptimizerConfig = OptimizerConfig()
    bootstrap: BootstrapConfig = BootstrapConfig()
    simulation: SimulationConfig = SimulationConfig()
    unit_costs: UnitCosts = UnitCosts()
    synthetic: SyntheticConfig = SyntheticConfig()

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.vfi_tol <= 0 or self.vfi_max_iter < 1:
            raise ConfigError("vfi.tol must be > 0 and vfi.max_iter >= 1")
        if self.hazard_alpha < 0:
            raise ConfigError(f"hazard_alpha must be >= 0, got {self.hazard_alpha}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        raw = dict(data)

        state_raw = _section(raw, "state")
        spec_default = StateSpec()
        binning_name = state_raw.pop("binning", spec_default.binning.value)
        if not isinstance(binning_name, str):
            raise ConfigError(f"state.binning must be a string, got {binning_name!r}")
        state = StateSpec(
            age_max=_integer(state_raw, "age_max", spec_default.age_max, "state"),
            n_cages=_integer(state_raw, "n_cages", spec_default.n_cages, "state"),
            binning=NeighborBinning.from_name(binning_name),
        )
        _reject_unknown(state_raw, "state")

        vfi_raw = _section(raw, "vfi")
        vfi_tol = _number(vfi_raw, "tol", 1e-10, "vfi")
        vfi_max_iter = _integer(vfi_raw, "max_iter", 10_000, "vfi")
        _reject_unknown(vfi_raw, "vfi")

        opt_raw = _section(raw, "optimizer")
        opt_default = OptimizerConfig()
        optimizer = OptimizerConfig(
            xatol=_number(opt_raw, "xatol", opt_default.xatol, "optimizer"),
            fatol=_number(opt_raw, "fatol", opt_default.fatol, "optimizer"),
            max_evals=_integer(opt_raw, "max_evals", opt_default.max_evals, "optimizer"),
            max_restarts=_integer(
                opt_raw, "max_restarts", opt_default.max_restarts, "optimizer"
            ),
            restart_improvement=_number(
                opt_raw, "restart_improvement",
                opt_default.restart_improvement, "optimizer",
            ),
        )
        _reject_unknown(opt_raw, "optimizer")

        costs_raw = _section(raw, "unit_costs")
        costs_default = UnitCosts()
        unit_costs = UnitCosts(
            replacement=_number(
                costs_raw, "replacement", costs_default.replacement, "unit_costs"
            ),
            failure_multiplier=_number(
                costs_raw, "failure_multiplier",
                costs_default.failure_multiplier, "unit_costs",
            ),
        )
        _reject_unknown(costs_raw, "unit_costs")

        out = cls(
            state=state,
            beta=_number(raw, "beta", 0.90, "config"),
            hazard_alpha=_number(raw, "hazard_alpha", 0.5, "config"),
            vfi_tol=vfi_tol,
            vfi_max_iter=vfi_max_iter,
            optimizer=optimizer,
            bootstrap=BootstrapConfig.from_dict(_section(raw, "bootstrap")),
            simulation=SimulationConfig.from_dict(_section(raw, "simulation")),
            unit_costs=unit_costs,
            synthetic=SyntheticConfig.from_dict(
                _section(raw, "synthetic"), state.n_cages
            ),
        )
        _reject_unknown(raw, "config")
        return out

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "state": {
                "age_max": self.state.age_max,
                "n_cages": self.state.n_cages,
                "binning": self.state.binning.value,
            },
            "beta": self.beta,
            "hazard_alpha": self.hazard_alpha,
            "vfi": {"tol": self.vfi_tol, "max_iter": self.vfi_max_iter},
            "optimizer": {
                "xatol": self.optimizer.xatol,
                "fatol": self.optimizer.fatol,
                "max_evals": self.optimizer.max_evals,
                "max_restarts": self.optimizer.max_restarts,
                "restart_improvement": self.optimizer.restart_improvement,
            },
            "bootstrap": self.bootstrap.to_dict(),
            "simulation": self.simulation.to_dict(),
            "unit_costs": {
                "replacement": self.unit_costs.replacement,
                "failure_multiplier": self.unit_costs.failure_multiplier,
            },
            "synthetic": self.synthetic.to_dict(),
        }
