"""Nonparametric transition estimation and per-action kernel assembly.

The controlled process factors into independent components: a deterministic age
law (continue steps age by one up to the cap, replace resets to zero), an
immutable cage, a failure draw at the post-decision age, and exogenous Markov
chains for the two neighbor levels conditioned on (current level, cage).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, EstimationError, KernelError
from .panel import Panel
from .statespace import StateSpace

__all__ = [
    "CONTINUE",
    "REPLACE",
    "FailureHazard",
    "NeighborProcess",
    "ControlledKernel",
    "KernelValidationReport",
    "estimate_failure_hazard",
    "estimate_neighbor_process",
    "assemble_kernel",
    "validate_kernel",
    "kernel_triplets",
    "write_kernel_csv",
]

CONTINUE, REPLACE = 0, 1
ROW_SUM_TOL = 1e-9


@dataclass
class FailureHazard:
    """P(fail'=1 | age, cage) table with the counts behind it.

    table is (n_ages, n_cages). Cells with zero exposures fall back to the
    smoothed prior alpha / (2 alpha) (taken as 0 when alpha = 0).
    """

    table: np.ndarray
    exposures: np.ndarray
    failures: np.ndarray
    alpha: float
    n_empty_cells: int

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        if np.any(self.table < 0) or np.any(self.table > 1):
            raise ConfigError("hazard entries must lie in [0, 1]")

    @classmethod
    def from_table(cls, table: np.ndarray) -> "FailureHazard":
        """Wrap a known hazard table (e.g. a synthetic truth) with no counts."""
        table = np.asarray(table, dtype=float)
        zeros = np.zeros_like(table)
        return cls(table, zeros, zeros, alpha=0.0, n_empty_cells=0)


def estimate_failure_hazard(panel: Panel, space: StateSpace, alpha: float = 0.5) -> FailureHazard:
    """Cell frequencies (failures + alpha) / (exposures + 2 alpha) per (age, cage).

    Panel ages above the space's cap count toward the cap cell, matching the
    saturating age law.
    """
    if alpha < 0:
        raise ConfigError(f"smoothing weight must be >= 0, got {alpha}")
    if panel.n_obs == 0:
        raise EstimationError("cannot estimate a hazard from an empty panel")
    n_ages, n_cages = space.n_ages, space.spec.n_cages
    if np.any(panel.cage >= n_cages):
        raise ConfigError("panel cage outside the space's cage range")
    ages = np.minimum(panel.age, n_ages - 1)
    cell = ages * n_cages + panel.cage
    exposures = np.bincount(cell, minlength=n_ages * n_cages).reshape(n_ages, n_cages)
    failures = np.bincount(cell, weights=panel.fail, minlength=n_ages * n_cages).reshape(
        n_ages, n_cages
    )
    with np.errstate(invalid="ignore"):
        table = (failures + alpha) / (exposures + 2 * alpha)
    table = np.nan_to_num(table, nan=0.0)  # only hit when alpha=0 and exposures=0
    n_empty = int(np.sum(exposures == 0))
    return FailureHazard(table, exposures, failures.astype(np.int64), alpha, n_empty)


@dataclass
class NeighborProcess:
    """Markov chains for the binned neighbor levels, one row set per cage.

    lag_table / fail_table are (n_cages, L, L): row [c, l] is the distribution of
    next-period level given current level l in cage c. Rows never observed in the
    data fall back to a point mass at level 0 and are counted in n_fallback_rows.
    """

    lag_table: np.ndarray
    fail_table: np.ndarray
    n_fallback_rows: int = 0

    def __post_init__(self):
        for name in ("lag_table", "fail_table"):
            t = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, t)
            if t.ndim != 3 or t.shape[1] != t.shape[2]:
                raise ConfigError(f"{name} must be (n_cages, L, L)")
            if np.any(t < 0):
                raise ConfigError(f"{name} has negative entries")
            if np.max(np.abs(t.sum(axis=2) - 1.0)) > 1e-12:
                raise ConfigError(f"{name} rows must sum to 1 within 1e-12")

    @classmethod
    def trivial(cls, n_cages: int, n_levels: int) -> "NeighborProcess":
        """Absorbing-at-zero process; exact for binning 'none' (single level)."""
        t = np.zeros((n_cages, n_levels, n_levels))
        t[:, :, 0] = 1.0
        return cls(t, t.copy())


def _level_transition_counts(
    levels: np.ndarray, cage: np.ndarray, consec: np.ndarray, n_cages: int, L: int
) -> np.ndarray:
    """Count level transitions over consecutive same-node period pairs, by cage."""
    idx = (cage[consec] * L + levels[consec]) * L + levels[consec + 1]
    return np.bincount(idx, minlength=n_cages * L * L).reshape(n_cages, L, L).astype(float)


def _normalize_rows(counts: np.ndarray) -> tuple[np.ndarray, int]:
    row_sums = counts.sum(axis=2, keepdims=True)
    empty = row_sums[..., 0] == 0
    table = np.zeros_like(counts)
    np.divide(counts, row_sums, out=table, where=row_sums > 0)
    table[empty, :] = 0.0
    table[empty, 0] = 1.0
    return table, int(empty.sum())


def estimate_neighbor_process(panel: Panel, space: StateSpace) -> NeighborProcess:
    """Empirical conditional frequencies of next-period neighbor levels by cage."""
    if not panel.has_neighbor_vars:
        raise ConfigError(
            "panel lacks neighbor columns; run derive_neighbor_vars before "
            "estimating the neighbor process"
        )
    n_cages = space.spec.n_cages
    if np.any(panel.cage >= n_cages):
        raise ConfigError("panel cage outside the space's cage range")
    L = space.n_levels
    if L == 1:
        return NeighborProcess.trivial(n_cages, 1)
    binning = space.spec.binning
    lag_levels = binning.bin_count(panel.nbr_lag)
    fail_levels = binning.bin_count(panel.nbr_fail)

    consec = np.flatnonzero(
        (panel.node_id[1:] == panel.node_id[:-1])
        & (panel.period[1:] == panel.period[:-1] + 1)
    )
    lag_counts = _level_transition_counts(lag_levels, panel.cage, consec, n_cages, L)
    fail_counts = _level_transition_counts(fail_levels, panel.cage, consec, n_cages, L)
    lag_table, lag_empty = _normalize_rows(lag_counts)
    fail_table, fail_empty = _normalize_rows(fail_counts)
    return NeighborProcess(lag_table, fail_table, lag_empty + fail_empty)


@dataclass
class ControlledKernel:
    """Sparse row-stochastic transition matrix per action over a StateSpace."""

    space: StateSpace
    matrices: dict[int, sp.csr_matrix]

    @property
    def actions(self) -> tuple[int, ...]:
        return tuple(sorted(self.matrices))

    def matrix(self, action: int) -> sp.csr_matrix:
        return self.matrices[action]


def _assemble_action(
    hazard: FailureHazard, nbr: NeighborProcess, space: StateSpace, action: int
) -> sp.csr_matrix:
    f = space.fields()
    n_cages, L, S = space.spec.n_cages, space.n_levels, space.size
    age2 = np.zeros(S, dtype=np.int64) if action == REPLACE else np.minimum(
        f["age"] + 1, space.n_ages - 1
    )
    pfail = hazard.table[age2, f["cage"]]
    fail_marg = np.stack([1.0 - pfail, pfail], axis=1)          # (S, 2)
    lag_rows = nbr.lag_table[f["cage"], f["nbr_lag"], :]        # (S, L)
    fail_rows = nbr.fail_table[f["cage"], f["nbr_fail"], :]     # (S, L)

    probs = (
        fail_marg[:, :, None, None]
        * lag_rows[:, None, :, None]
        * fail_rows[:, None, None, :]
    )  # (S, 2, L, L)

    base = age2 * n_cages + f["cage"]
    fgrid = np.arange(2)[None, :, None, None]
    lgrid = np.arange(L)[None, None, :, None]
    mgrid = np.arange(L)[None, None, None, :]
    cols = ((base[:, None, None, None] * 2 + fgrid) * L + lgrid) * L + mgrid

    per_row = 2 * L * L
    mat = sp.csr_matrix(
        (probs.ravel(), cols.ravel(), np.arange(0, S * per_row + 1, per_row)),
        shape=(S, S),
    )
    dev = np.max(np.abs(np.asarray(mat.sum(axis=1)).ravel() - 1.0))
    if dev > ROW_SUM_TOL:
        raise KernelError(f"assembled kernel row sums off by {dev:.3e} (> {ROW_SUM_TOL})")
    return mat


def assemble_kernel(
    hazard: FailureHazard,
    nbr: NeighborProcess,
    space: StateSpace,
    action: int | None = None,
) -> ControlledKernel:
    """Build the per-action kernel(s); action None assembles both actions.

    Requires hazard and neighbor tables shaped for the space.
    """
    if hazard.table.shape != (space.n_ages, space.spec.n_cages):
        raise ConfigError(
            f"hazard table shape {hazard.table.shape} does not match space "
            f"({space.n_ages}, {space.spec.n_cages})"
        )
    L = space.n_levels
    if nbr.lag_table.shape != (space.spec.n_cages, L, L):
        raise ConfigError(
            f"neighbor tables shaped {nbr.lag_table.shape}, space needs "
            f"({space.spec.n_cages}, {L}, {L})"
        )
    actions = (CONTINUE, REPLACE) if action is None else (action,)
    if any(a not in (CONTINUE, REPLACE) for a in actions):
        raise ConfigError(f"unknown action {action}")
    return ControlledKernel(
        space, {a: _assemble_action(hazard, nbr, space, a) for a in actions}
    )


@dataclass
class KernelValidationReport:
    """Report-only diagnostics for a ControlledKernel."""

    max_row_deviation: float
    n_negative_entries: int
    flagged_rows: list = field(default_factory=list)  # (action, state_id, row_sum)
    # states with no inbound mass from any other state (self-loops don't count)
    unreachable_states: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def ok(self) -> bool:
        return self.max_row_deviation <= 1e-12 and self.n_negative_entries == 0


def validate_kernel(kernel: ControlledKernel, row_tol: float = 1e-12) -> KernelValidationReport:
    """Check row sums and nonnegativity; list states no transition can reach."""
    max_dev, n_neg = 0.0, 0
    flagged = []
    col_mass = np.zeros(kernel.space.size)
    for action in kernel.actions:
        mat = kernel.matrix(action)
        col_mass += np.asarray(mat.sum(axis=0)).ravel() - mat.diagonal()
        row_sums = np.asarray(mat.sum(axis=1)).ravel()
        dev = np.abs(row_sums - 1.0)
        max_dev = max(max_dev, float(dev.max()) if dev.size else 0.0)
        n_neg += int((mat.data < 0).sum())
        for s in np.flatnonzero(dev > row_tol):
            flagged.append((action, int(s), float(row_sums[s])))
    unreachable = np.flatnonzero(col_mass == 0.0).astype(np.int64)
    return KernelValidationReport(max_dev, n_neg, flagged, unreachable)


def kernel_triplets(kernel: ControlledKernel):
    """Yield (state_id, next_state_id, action, prob) rows, deterministically ordered."""
    for action in kernel.actions:
        coo = kernel.matrix(action).tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            yield int(coo.row[i]), int(coo.col[i]), action, float(coo.data[i])


def write_kernel_csv(kernel: ControlledKernel, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("state_id,next_state_id,action,prob\n")
        for s, s2, a, p in kernel_triplets(kernel):
            fh.write(f"{s},{s2},{a},{p!r}\n")
