"""State enumeration for the per-unit replacement problem and for joint group products.

A unit state is (age, cage, fail, nbr_lag, nbr_fail). Enumeration is lexicographic
with age slowest, then cage, fail, nbr_lag, nbr_fail; the all-zeros state gets id 0.
The ordering is part of the external contract: exported tables and kernels are keyed
by these ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, SizeError

__all__ = [
    "NeighborBinning",
    "StateSpec",
    "UnitState",
    "StateSpace",
    "build_state_space",
    "encode",
    "decode",
    "JointGroupSpec",
    "JointSpace",
    "build_joint_space",
]


class NeighborBinning(Enum):
    """How raw neighbor-event counts map to discrete levels.

    none            1 level, count ignored (no interaction terms)
    binary          2 levels: 0 vs any
    bins_0_1_2plus  3 levels: 0, 1, 2 or more
    bins_0_1_2_3plus 4 levels: 0, 1, 2, 3 or more
    """

    NONE = "none"
    BINARY = "binary"
    BINS_0_1_2PLUS = "bins_0_1_2plus"
    BINS_0_1_2_3PLUS = "bins_0_1_2_3plus"

    @property
    def n_levels(self) -> int:
        return {
            NeighborBinning.NONE: 1,
            NeighborBinning.BINARY: 2,
            NeighborBinning.BINS_0_1_2PLUS: 3,
            NeighborBinning.BINS_0_1_2_3PLUS: 4,
        }[self]

    def bin_count(self, count):
        """Map raw nonnegative counts (scalar or array) to levels 0..n_levels-1."""
        counts = np.asarray(count)
        if np.any(counts < 0):
            raise ValueError("neighbor counts must be nonnegative")
        levels = np.minimum(counts, self.n_levels - 1)
        return int(levels) if np.isscalar(count) else levels.astype(np.int64)

    @classmethod
    def from_name(cls, name: str) -> "NeighborBinning":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(b.value for b in cls)
            raise ConfigError(f"unknown neighbor binning {name!r}; expected one of: {valid}")


@dataclass(frozen=True)
class StateSpec:
    """Dimensions of the per-unit state space."""

    age_max: int = 58
    n_cages: int = 3
    binning: NeighborBinning = NeighborBinning.BINARY

    def __post_init__(self):
        # age_max = 0 is a legal degenerate grid: a single age level.
        if self.age_max < 0:
            raise ConfigError(f"age_max must be >= 0, got {self.age_max}")
        if self.n_cages < 1:
            raise ConfigError(f"n_cages must be >= 1, got {self.n_cages}")
        if not isinstance(self.binning, NeighborBinning):
            raise ConfigError(f"binning must be a NeighborBinning, got {self.binning!r}")


@dataclass(frozen=True)
class UnitState:
    """One decoded point of the per-unit state space."""

    age: int
    cage: int
    fail: int
    nbr_lag: int = 0
    nbr_fail: int = 0


@dataclass(frozen=True)
class StateSpace:
    """Enumerated state space with encode/decode between states and dense ids."""

    spec: StateSpec
    # radices in enumeration order: (age, cage, fail, nbr_lag, nbr_fail)
    _radices: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        levels = self.spec.binning.n_levels
        object.__setattr__(
            self, "_radices", (self.spec.age_max + 1, self.spec.n_cages, 2, levels, levels)
        )

    @property
    def size(self) -> int:
        return int(np.prod(self._radices))

    @property
    def n_ages(self) -> int:
        return self._radices[0]

    @property
    def n_levels(self) -> int:
        return self._radices[3]

    def encode(self, age, cage, fail, nbr_lag=0, nbr_fail=0):
        """Encode state fields (scalars or arrays) to dense ids. Out-of-range raises IndexError."""
        digits = (age, cage, fail, nbr_lag, nbr_fail)
        scalar = all(np.isscalar(d) for d in digits)
        arrs = [np.asarray(d, dtype=np.int64) for d in digits]
        sid = np.zeros_like(arrs[0])
        for arr, radix in zip(arrs, self._radices):
            if np.any(arr < 0) or np.any(arr >= radix):
                raise IndexError(
                    f"state field out of range: value(s) outside [0, {radix - 1}]"
                )
            sid = sid * radix + arr
        return int(sid) if scalar else sid

    def encode_state(self, state: UnitState) -> int:
        return self.encode(state.age, state.cage, state.fail, state.nbr_lag, state.nbr_fail)

    def decode(self, state_id: int) -> UnitState:
        """Decode a dense id back to a UnitState. Inverse of encode."""
        sid = int(state_id)
        if sid < 0 or sid >= self.size:
            raise IndexError(f"state id {sid} outside [0, {self.size - 1}]")
        digits = []
        for radix in reversed(self._radices):
            digits.append(sid % radix)
            sid //= radix
        age, cage, fail, nbr_lag, nbr_fail = reversed(digits)
        return UnitState(age, cage, fail, nbr_lag, nbr_fail)

    def fields(self) -> dict[str, np.ndarray]:
        """Decoded field arrays for all ids in order, keyed by field name."""
        grids = np.indices(self._radices).reshape(5, -1)
        names = ("age", "cage", "fail", "nbr_lag", "nbr_fail")
        return {name: grids[i].astype(np.int64) for i, name in enumerate(names)}


def build_state_space(spec: StateSpec) -> StateSpace:
    """Construct the enumerated space for a spec."""
    return StateSpace(spec)


def encode(state: UnitState, space: StateSpace) -> int:
    return space.encode_state(state)


def decode(state_id: int, space: StateSpace) -> UnitState:
    return space.decode(state_id)


@dataclass(frozen=True)
class JointGroupSpec:
    """One group's subproblem for the joint/decomposed comparison.

    utilities: (n_states, n_actions) flow utilities
    kernels:   (n_actions, n_states, n_states) row-stochastic transition matrices
    """

    utilities: np.ndarray
    kernels: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.utilities, dtype=float)
        k = np.asarray(self.kernels, dtype=float)
        object.__setattr__(self, "utilities", u)
        object.__setattr__(self, "kernels", k)
        if u.ndim != 2:
            raise ConfigError("utilities must be (n_states, n_actions)")
        if k.shape != (u.shape[1], u.shape[0], u.shape[0]):
            raise ConfigError(
                f"kernels must be (n_actions, n_states, n_states); got {k.shape} "
                f"for utilities {u.shape}"
            )
        if np.any(k < 0):
            raise ConfigError("kernels must be nonnegative")
        if k.size and np.max(np.abs(k.sum(axis=2) - 1.0)) > 1e-9:
            raise ConfigError("kernel rows must sum to 1 within 1e-9")

    @property
    def n_states(self) -> int:
        return self.utilities.shape[0]

    @property
    def n_actions(self) -> int:
        return self.utilities.shape[1]


@dataclass(frozen=True)
class JointSpace:
    """Mixed-radix enumeration of a Cartesian product of group spaces.

    Joint enumeration is lexicographic in group order: group 0 varies slowest.
    """

    state_sizes: tuple[int, ...]
    action_sizes: tuple[int, ...]

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_sizes))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_sizes))

    @staticmethod
    def _digits(radices: tuple[int, ...], n: int) -> np.ndarray:
        """(len(radices), n) digit table for ids 0..n-1 under mixed radix."""
        ids = np.arange(n, dtype=np.int64)
        out = np.empty((len(radices), n), dtype=np.int64)
        for g in range(len(radices) - 1, -1, -1):
            out[g] = ids % radices[g]
            ids //= radices[g]
        return out

    def state_digits(self) -> np.ndarray:
        """(n_groups, n_states) table: group-local state index per joint state id."""
        return self._digits(self.state_sizes, self.n_states)

    def action_digits(self) -> np.ndarray:
        """(n_groups, n_actions) table: group-local action index per joint action id."""
        return self._digits(self.action_sizes, self.n_actions)

    def encode_state(self, local_states) -> int:
        sid = 0
        for s, radix in zip(local_states, self.state_sizes):
            if s < 0 or s >= radix:
                raise IndexError(f"group state {s} outside [0, {radix - 1}]")
            sid = sid * radix + int(s)
        return sid


def build_joint_space(groups: list[JointGroupSpec], max_joint_states: int = 4096) -> JointSpace:
    """Enumerate the product space of a list of group subproblems.

    Raises SizeError if the joint state count exceeds max_joint_states.
    """
    if not groups:
        raise ConfigError("need at least one group")
    state_sizes = tuple(g.n_states for g in groups)
    action_sizes = tuple(g.n_actions for g in groups)
    n_joint = int(np.prod(state_sizes))
    if n_joint > max_joint_states:
        raise SizeError(
            f"joint state space has {n_joint} states, exceeding the cap of "
            f"{max_joint_states}; raise the cap explicitly to force the solve"
        )
    return JointSpace(state_sizes, action_sizes)
