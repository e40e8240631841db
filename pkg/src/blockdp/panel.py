"""Panel data container, CSV loader, neighbor-variable derivation, validation.

CSV format: header node_id,group_id,period,age,cage,fail,decision,nbr_lag,nbr_fail
with the last two columns optional. All cells are integers. nbr_lag / nbr_fail hold
raw event counts among group mates (excluding the unit itself); discretization to
levels happens downstream, so one panel file serves every interaction binning.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PanelError

__all__ = [
    "Panel",
    "Topology",
    "PanelValidationReport",
    "load_panel",
    "write_panel",
    "derive_neighbor_vars",
    "validate_panel",
]

BASE_COLUMNS = ("node_id", "group_id", "period", "age", "cage", "fail", "decision")
NEIGHBOR_COLUMNS = ("nbr_lag", "nbr_fail")


@dataclass
class Panel:
    """Observations sorted by (node_id, period). Neighbor columns are counts or None."""

    node_id: np.ndarray
    group_id: np.ndarray
    period: np.ndarray
    age: np.ndarray
    cage: np.ndarray
    fail: np.ndarray
    decision: np.ndarray
    nbr_lag: np.ndarray | None = None
    nbr_fail: np.ndarray | None = None

    def __post_init__(self):
        cols = ["node_id", "group_id", "period", "age", "cage", "fail", "decision"]
        if self.nbr_lag is not None:
            cols += ["nbr_lag", "nbr_fail"]
        for name in cols:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n = self.node_id.shape[0]
        for name in cols:
            if getattr(self, name).shape != (n,):
                raise PanelError(f"column {name} has wrong length")
        order = np.lexsort((self.period, self.node_id))
        if not np.all(order[:-1] < order[1:]):
            for name in cols:
                setattr(self, name, getattr(self, name)[order])

    @property
    def n_obs(self) -> int:
        return int(self.node_id.shape[0])

    @property
    def has_neighbor_vars(self) -> bool:
        return self.nbr_lag is not None and self.nbr_fail is not None

    def nodes(self) -> np.ndarray:
        return np.unique(self.node_id)

    def groups(self) -> np.ndarray:
        return np.unique(self.group_id)


@dataclass(frozen=True)
class Topology:
    """Node-to-group assignment. node_ids and group_of_node are aligned arrays."""

    node_ids: np.ndarray
    group_of_node: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "node_ids", np.asarray(self.node_ids, dtype=np.int64))
        object.__setattr__(self, "group_of_node", np.asarray(self.group_of_node, dtype=np.int64))
        if self.node_ids.shape != self.group_of_node.shape:
            raise PanelError("node_ids and group_of_node must be aligned")
        if np.unique(self.node_ids).size != self.node_ids.size:
            raise PanelError("duplicate node ids in topology")

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.size)

    def group_sizes(self) -> dict[int, int]:
        gids, counts = np.unique(self.group_of_node, return_counts=True)
        return {int(g): int(c) for g, c in zip(gids, counts)}

    @classmethod
    def from_panel(cls, panel: Panel) -> "Topology":
        nodes, first = np.unique(panel.node_id, return_index=True)
        return cls(nodes, panel.group_id[first])


def _diagnose_rows(path: str, n_cols: int, names: tuple[str, ...]) -> None:
    """Slow re-read that pins parse failures to 1-based CSV row numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header, row 1
        for rownum, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise PanelError(f"row {rownum}: expected {n_cols} cells, got {len(row)}")
            for name, cell in zip(names, row):
                try:
                    int(cell)
                except ValueError:
                    raise PanelError(
                        f"row {rownum}: non-integer value {cell!r} in column {name}"
                    ) from None


def load_panel(path: str) -> Panel:
    """Load and check a panel CSV. Errors name 1-based row numbers where applicable."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    names = tuple(header.split(","))
    if names == BASE_COLUMNS + NEIGHBOR_COLUMNS:
        with_nbr = True
    elif names == BASE_COLUMNS:
        with_nbr = False
    else:
        raise PanelError(
            f"bad header {header!r}; expected {','.join(BASE_COLUMNS)} "
            f"optionally followed by {','.join(NEIGHBOR_COLUMNS)}"
        )
    try:
        with warnings.catch_warnings():
            # an empty data section raises a clean PanelError below instead
            warnings.filterwarnings("ignore", message="loadtxt: input contained no data")
            data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    except ValueError:
        _diagnose_rows(path, len(names), names)
        raise  # diagnostics found nothing; re-raise the original parse error
    if data.shape[0] == 0:
        raise PanelError("panel has no data rows")
    if data.shape[1] != len(names):
        _diagnose_rows(path, len(names), names)
        raise PanelError(
            f"data has {data.shape[1]} columns but header names {len(names)}"
        )

    cols = {name: data[:, i] for i, name in enumerate(names)}

    for name in names:
        if np.any(cols[name] < 0):
            bad = int(np.argmax(cols[name] < 0))
            raise PanelError(f"row {bad + 2}: negative value in column {name}")
    for name in ("fail", "decision"):
        if np.any(cols[name] > 1):
            bad = int(np.argmax(cols[name] > 1))
            raise PanelError(f"row {bad + 2}: column {name} must be 0 or 1")

    # duplicate (node, period) detection, reported with original row numbers
    stride = int(cols["period"].max()) + 1
    key = cols["node_id"] * stride + cols["period"]
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        dup_key = uniq[np.argmax(counts > 1)]
        rows = np.flatnonzero(key == dup_key) + 2
        node, per = int(dup_key // stride), int(dup_key % stride)
        raise PanelError(
            f"duplicate observation for node {node}, period {per} "
            f"at rows {', '.join(str(r) for r in rows)}"
        )

    # per-node constants must not change
    for name in ("group_id", "cage"):
        pairs = np.unique(np.stack([cols["node_id"], cols[name]], axis=1), axis=0)
        if pairs.shape[0] != np.unique(cols["node_id"]).size:
            seen, first = {}, None
            for node, val in pairs:
                if node in seen:
                    first = (int(node), seen[node], int(val))
                    break
                seen[int(node)] = int(val)
            raise PanelError(
                f"node {first[0]} changes {name} across periods "
                f"({first[1]} vs {first[2]}); {name} is fixed per unit"
            )

    return Panel(
        cols["node_id"], cols["group_id"], cols["period"], cols["age"],
        cols["cage"], cols["fail"], cols["decision"],
        cols.get("nbr_lag"), cols.get("nbr_fail"),
    )


def write_panel(panel: Panel, path: str) -> None:
    """Write a panel back to CSV, byte-deterministically."""
    names = BASE_COLUMNS + (NEIGHBOR_COLUMNS if panel.has_neighbor_vars else ())
    mat = np.stack([getattr(panel, n) for n in names], axis=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in mat:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def derive_neighbor_vars(panel: Panel, topology: Topology | None = None) -> Panel:
    """Fill nbr_lag / nbr_fail event counts from group mates.

    nbr_lag(i, t)  = replacements among group mates of i at period t-1, excluding i;
                     0 when t-1 is not in the panel.
    nbr_fail(i, t) = failures among group mates of i at period t, excluding i.

    topology defaults to the panel's own group assignment. Deriving twice is a no-op.
    """
    if topology is not None:
        topo_map = dict(zip(topology.node_ids.tolist(), topology.group_of_node.tolist()))
        panel_map = dict(zip(panel.node_id.tolist(), panel.group_id.tolist()))
        for node, grp in panel_map.items():
            if topo_map.get(node, grp) != grp:
                raise PanelError(
                    f"node {node} is in group {grp} in the panel but group "
                    f"{topo_map[node]} in the topology"
                )

    periods = panel.period
    stride = int(periods.max()) + 2
    key = panel.group_id * stride + periods

    size = int(key.max()) + 2
    repl_at = np.bincount(key, weights=panel.decision, minlength=size)
    fail_at = np.bincount(key, weights=panel.fail, minlength=size)

    # own decision at t-1, where the previous row of the same node is period t-1
    prev_dec = np.zeros(panel.n_obs, dtype=np.int64)
    contiguous = np.zeros(panel.n_obs, dtype=bool)
    contiguous[1:] = (panel.node_id[1:] == panel.node_id[:-1]) & (
        periods[1:] == periods[:-1] + 1
    )
    prev_dec[1:][contiguous[1:]] = panel.decision[:-1][contiguous[1:]]

    lag_key = key - 1  # (group, period-1); valid only when period >= 1
    lag_total = np.where(periods >= 1, repl_at[np.maximum(lag_key, 0)], 0.0)
    nbr_lag = lag_total - prev_dec
    nbr_fail = fail_at[key] - panel.fail

    if np.any(nbr_lag < 0) or np.any(nbr_fail < 0):
        raise PanelError("internal error: negative neighbor count")

    return Panel(
        panel.node_id, panel.group_id, panel.period, panel.age, panel.cage,
        panel.fail, panel.decision,
        nbr_lag.astype(np.int64), nbr_fail.astype(np.int64),
    )


@dataclass
class PanelValidationReport:
    """Findings from validate_panel. Empty lists mean a clean panel."""

    n_obs: int
    n_nodes: int
    n_groups: int
    age_cap_used: int
    age_violations: list = field(default_factory=list)   # (node, period, age, next_age, decision)
    period_gaps: list = field(default_factory=list)      # (node, period, next_period)
    range_violations: list = field(default_factory=list)  # messages

    @property
    def ok(self) -> bool:
        return not (self.age_violations or self.range_violations)

    def summary(self) -> str:
        status = "ok" if self.ok else "FAILED"
        return (
            f"panel validation {status}: {self.n_obs} obs, {self.n_nodes} nodes, "
            f"{self.n_groups} groups; {len(self.age_violations)} age-law violations, "
            f"{len(self.period_gaps)} period gaps, "
            f"{len(self.range_violations)} range violations"
        )


def validate_panel(panel: Panel, age_max: int | None = None) -> PanelValidationReport:
    """Check the deterministic age law and field ranges.

    After continue, age must step to min(age+1, cap); after replace it must reset
    to 0. The cap defaults to the panel's maximum observed age when not given.
    """
    cap = int(panel.age.max()) if age_max is None else int(age_max)
    report = PanelValidationReport(
        n_obs=panel.n_obs,
        n_nodes=int(np.unique(panel.node_id).size),
        n_groups=int(np.unique(panel.group_id).size),
        age_cap_used=cap,
    )

    for name in ("fail", "decision"):
        col = getattr(panel, name)
        bad = (col < 0) | (col > 1)
        if np.any(bad):
            report.range_violations.append(
                f"column {name} outside {{0,1}} in {int(bad.sum())} rows"
            )
    if np.any(panel.age < 0):
        report.range_violations.append("negative ages")
    if age_max is not None and np.any(panel.age > cap):
        report.range_violations.append(f"ages above cap {cap}")

    same_node = panel.node_id[1:] == panel.node_id[:-1]
    step = panel.period[1:] - panel.period[:-1]

    gap_idx = np.flatnonzero(same_node & (step > 1))
    for i in gap_idx:
        report.period_gaps.append(
            (int(panel.node_id[i]), int(panel.period[i]), int(panel.period[i + 1]))
        )

    consec = np.flatnonzero(same_node & (step == 1))
    expected = np.where(
        panel.decision[consec] == 1, 0, np.minimum(panel.age[consec] + 1, cap)
    )
    bad = np.flatnonzero(panel.age[consec + 1] != expected)
    for j in bad:
        i = consec[j]
        report.age_violations.append(
            (
                int(panel.node_id[i]), int(panel.period[i]),
                int(panel.age[i]), int(panel.age[i + 1]), int(panel.decision[i]),
            )
        )
    return report
