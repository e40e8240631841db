"""Logsum Bellman solver, conditional choice probabilities, and the joint-state oracle.

The per-unit problem is solved by value function iteration on the integrated value
function: EV(s) = log sum_d exp(u(s,d) + beta * E[EV(s') | s, d]), computed with
max-subtraction. Type-I extreme value shocks give logit choice probabilities.

The joint oracle solves the brute-force product-space problem (additive utilities,
product kernels) so that the block decomposition can be verified exactly: the joint
fixed point must equal the sum of per-group fixed points, and joint argmax policies
must factor into per-group argmaxes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .errors import ConfigError, ConvergenceError, SizeError
from .statespace import JointGroupSpec, JointSpace, StateSpace, UnitState, build_joint_space
from .transitions import CONTINUE, REPLACE, ControlledKernel

__all__ = [
    "StructuralParams",
    "SolveResult",
    "DecompositionReport",
    "flow_utility",
    "flow_utility_table",
    "solve_vfi",
    "ccp_table",
    "solve_joint_oracle",
    "verify_decomposition",
    "blockdiag_matvec_pair",
    "random_group",
    "benchmark_decomposition",
    "write_solution_csv",
]

JOINT_ENTRY_CAP = 120_000_000  # dense (n_actions, N, N) memory guard, ~0.9 GB


@dataclass(frozen=True)
class StructuralParams:
    """Flow-utility coefficients and the discount factor.

    theta_age has one slope per cage. gamma_lag / gamma_fail hold one coefficient
    per nonzero neighbor level (so their length is binning levels minus one):
    () for no interactions, (g,) for binary, (g1, g2plus) for three bins, etc.
    """

    theta_age: tuple[float, ...]
    theta_fail: float
    theta_rc: float
    gamma_lag: tuple[float, ...] = ()
    gamma_fail: tuple[float, ...] = ()
    beta: float = 0.90

    def __post_init__(self):
        object.__setattr__(self, "theta_age", tuple(float(t) for t in self.theta_age))
        object.__setattr__(self, "gamma_lag", tuple(float(g) for g in self.gamma_lag))
        object.__setattr__(self, "gamma_fail", tuple(float(g) for g in self.gamma_fail))
        # beta = 0 (the myopic limit) is admitted for diagnostics; 1 is not.
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if len(self.gamma_lag) != len(self.gamma_fail):
            raise ConfigError("gamma_lag and gamma_fail must have the same arity")

    @property
    def n_cages(self) -> int:
        return len(self.theta_age)

    @property
    def n_params(self) -> int:
        """Free coefficients (beta is calibrated, not counted)."""
        return self.n_cages + 2 + len(self.gamma_lag) + len(self.gamma_fail)

    def names(self) -> list[str]:
        out = [f"theta_age_c{i}" for i in range(self.n_cages)]
        out += ["theta_fail", "theta_rc"]
        out += _gamma_names("gamma_lag", len(self.gamma_lag))
        out += _gamma_names("gamma_fail", len(self.gamma_fail))
        return out

    def as_vector(self) -> np.ndarray:
        return np.array(
            list(self.theta_age)
            + [self.theta_fail, self.theta_rc]
            + list(self.gamma_lag)
            + list(self.gamma_fail),
            dtype=float,
        )

    def with_vector(self, vec: np.ndarray) -> "StructuralParams":
        """Rebuild params from a packed vector, keeping beta and arities."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ConfigError(f"expected vector of length {self.n_params}, got {vec.shape}")
        c, g = self.n_cages, len(self.gamma_lag)
        return dc_replace(
            self,
            theta_age=tuple(vec[:c]),
            theta_fail=float(vec[c]),
            theta_rc=float(vec[c + 1]),
            gamma_lag=tuple(vec[c + 2 : c + 2 + g]),
            gamma_fail=tuple(vec[c + 2 + g :]),
        )

    def to_dict(self) -> dict:
        return dict(zip(self.names(), self.as_vector().tolist())) | {"beta": self.beta}


def _gamma_names(prefix: str, arity: int) -> list[str]:
    if arity == 0:
        return []
    if arity == 1:
        return [prefix]
    return [f"{prefix}_{lvl}" for lvl in range(1, arity)] + [f"{prefix}_{arity}plus"]


def _gamma_coefs(gamma: tuple[float, ...], n_levels: int, which: str) -> np.ndarray:
    if len(gamma) != n_levels - 1:
        raise ConfigError(
            f"{which} has {len(gamma)} coefficients but the binning has "
            f"{n_levels} levels (needs {n_levels - 1})"
        )
    return np.concatenate([[0.0], np.asarray(gamma, dtype=float)])


def flow_utility_table(space: StateSpace, params: StructuralParams) -> np.ndarray:
    """Per-state flow utilities, shape (size, 2): column 0 continue, column 1 replace."""
    if params.n_cages != space.spec.n_cages:
        raise ConfigError(
            f"params carry {params.n_cages} age slopes, space has {space.spec.n_cages} cages"
        )
    lag_coef = _gamma_coefs(params.gamma_lag, space.n_levels, "gamma_lag")
    fail_coef = _gamma_coefs(params.gamma_fail, space.n_levels, "gamma_fail")
    f = space.fields()
    theta_age = np.asarray(params.theta_age)
    u = np.empty((space.size, 2))
    u[:, CONTINUE] = (
        theta_age[f["cage"]] * f["age"]
        + params.theta_fail * f["fail"]
        + lag_coef[f["nbr_lag"]]
        + fail_coef[f["nbr_fail"]]
    )
    u[:, REPLACE] = params.theta_rc
    return u


def flow_utility(state: UnitState, action: int, params: StructuralParams) -> float:
    """Flow utility of one action at one state."""
    if action == REPLACE:
        return float(params.theta_rc)
    if action != CONTINUE:
        raise ConfigError(f"unknown action {action}")
    if state.cage >= params.n_cages:
        raise ConfigError(f"state cage {state.cage} outside params' {params.n_cages} slopes")
    n_levels = len(params.gamma_lag) + 1
    lag_coef = _gamma_coefs(params.gamma_lag, n_levels, "gamma_lag")
    fail_coef = _gamma_coefs(params.gamma_fail, n_levels, "gamma_fail")
    if state.nbr_lag >= n_levels or state.nbr_fail >= n_levels:
        raise ConfigError(
            f"neighbor level out of range for gamma arity {len(params.gamma_lag)}"
        )
    return float(
        params.theta_age[state.cage] * state.age
        + params.theta_fail * state.fail
        + lag_coef[state.nbr_lag]
        + fail_coef[state.nbr_fail]
    )


@dataclass
class SolveResult:
    """Converged integrated values and choice probabilities."""

    ev: np.ndarray                 # (S,) integrated value per state
    ccp: np.ndarray                # (S,) P(replace | state)
    log_ccp: np.ndarray            # (S, 2) log choice probabilities
    choice_values: np.ndarray      # (S, 2) u + beta * E[EV | s, d]
    iterations: int
    final_sup_norm: float
    gap_history: np.ndarray | None = None


def solve_vfi(
    space: StateSpace,
    kernel: ControlledKernel,
    params: StructuralParams,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    ev0: np.ndarray | None = None,
    track_gaps: bool = False,
) -> SolveResult:
    """Iterate the logsum Bellman operator until the sup-norm gap falls below tol.

    Jacobi sweeps only: each update reads the previous iterate, and sums run in
    fixed state-id order, so results are bitwise reproducible and independent of
    any parallel scheduling.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    u = flow_utility_table(space, params)
    p_cont, p_rep = kernel.matrix(CONTINUE), kernel.matrix(REPLACE)
    beta = params.beta
    ev = np.zeros(space.size) if ev0 is None else np.asarray(ev0, dtype=float).copy()
    gaps = [] if track_gaps else None

    u_cont, u_rep = u[:, CONTINUE], u[:, REPLACE]
    for it in range(1, max_iter + 1):
        v_cont = u_cont + beta * (p_cont @ ev)
        v_rep = u_rep + beta * (p_rep @ ev)
        m = np.maximum(v_cont, v_rep)
        ev_new = m + np.log(np.exp(v_cont - m) + np.exp(v_rep - m))
        gap = float(np.max(np.abs(ev_new - ev)))
        if gaps is not None:
            gaps.append(gap)
        ev = ev_new
        if gap <= tol:
            log_ccp = np.stack([v_cont - ev, v_rep - ev], axis=1)
            return SolveResult(
                ev=ev,
                ccp=np.exp(log_ccp[:, REPLACE]),
                log_ccp=log_ccp,
                choice_values=np.stack([v_cont, v_rep], axis=1),
                iterations=it,
                final_sup_norm=gap,
                gap_history=np.array(gaps) if gaps is not None else None,
            )
    raise ConvergenceError(
        f"value iteration did not reach tol={tol} in {max_iter} iterations "
        f"(last gap {gap:.3e})",
        last_gap=gap,
    )


def ccp_table(result: SolveResult) -> np.ndarray:
    """Per-state choice probabilities, shape (S, 2): [P(continue), P(replace)]."""
    return np.exp(result.log_ccp)


def write_solution_csv(space: StateSpace, result: SolveResult, path: str) -> None:
    """Export EV / CCP keyed by state id with decoded state columns."""
    f = space.fields()
    with open(path, "w", newline="") as fh:
        fh.write("state_id,age,cage,fail,nbr_lag,nbr_fail,ev,ccp_replace\n")
        for s in range(space.size):
            fh.write(
                f"{s},{f['age'][s]},{f['cage'][s]},{f['fail'][s]},"
                f"{f['nbr_lag'][s]},{f['nbr_fail'][s]},"
                f"{float(result.ev[s])!r},{float(result.ccp[s])!r}\n"
            )


# ---------------------------------------------------------------------------
# dense generic-action solver (used for group subproblems and the joint oracle)
# ---------------------------------------------------------------------------


def _solve_logsum_dense(
    utilities: np.ndarray,      # (n, A)
    kernels: np.ndarray,        # (A, n, n)
    beta: float,
    tol: float,
    max_iter: int = 100_000,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Dense logsum VFI; returns (ev, choice_values (n, A), iterations)."""
    n, n_actions = utilities.shape
    stacked = kernels.reshape(n_actions * n, n)
    ev = np.zeros(n)
    ut = utilities.T  # (A, n)
    for it in range(1, max_iter + 1):
        v = ut + beta * (stacked @ ev).reshape(n_actions, n)
        m = v.max(axis=0)
        ev_new = m + np.log(np.exp(v - m).sum(axis=0))
        gap = float(np.max(np.abs(ev_new - ev)))
        ev = ev_new
        if gap <= tol:
            return ev, v.T, it
    raise ConvergenceError(
        f"dense value iteration stalled at gap {gap:.3e} after {max_iter} iterations",
        last_gap=gap,
    )


def _certified_update_tol(value_tol: float, beta: float) -> float:
    """Update-gap tolerance guaranteeing the iterate is within value_tol of the
    fixed point (sup-norm error <= beta/(1-beta) * gap)."""
    return max(min(value_tol, value_tol * (1.0 - beta) / max(beta, 1e-12)), 1e-14)


def joint_utility(groups: list[JointGroupSpec], jspace: JointSpace) -> np.ndarray:
    """Additive joint utilities over product states and product actions, (N, A)."""
    s_digits = jspace.state_digits()
    a_digits = jspace.action_digits()
    total = np.zeros((jspace.n_states, jspace.n_actions))
    for g, grp in enumerate(groups):
        total += grp.utilities[s_digits[g][:, None], a_digits[g][None, :]]
    return total


def joint_kernels(groups: list[JointGroupSpec], jspace: JointSpace) -> np.ndarray:
    """Dense product kernels, shape (A, N, N): one Kronecker product per joint action."""
    n, a = jspace.n_states, jspace.n_actions
    if a * n * n > JOINT_ENTRY_CAP:
        raise SizeError(
            f"joint kernel needs {a} x {n} x {n} = {a * n * n} entries, over the "
            f"memory guard of {JOINT_ENTRY_CAP}"
        )
    a_digits = jspace.action_digits()
    out = np.empty((a, n, n))
    for d in range(a):
        k = np.ones((1, 1))
        for g, grp in enumerate(groups):
            k = np.kron(k, grp.kernels[a_digits[g, d]])
        out[d] = k
    return out


@dataclass
class JointSolveResult:
    ev: np.ndarray              # (N,) joint integrated values
    choice_values: np.ndarray   # (N, A)
    policy: np.ndarray          # (N,) argmax joint action
    jspace: JointSpace
    iterations: int


def solve_joint_oracle(
    groups: list[JointGroupSpec],
    beta: float,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    max_joint_states: int = 4096,
    utility_extra: np.ndarray | None = None,
) -> JointSolveResult:
    """Brute-force VFI on the Cartesian product of the group problems.

    Deliberately naive: materializes dense joint kernels and pays the full
    (prod |S_g|)^2 cost per sweep. utility_extra, if given, is added to the joint
    utility table; a term that does not separate across groups breaks the additive
    structure and lets tests exercise that failure mode.
    """
    jspace = build_joint_space(groups, max_joint_states)
    u = joint_utility(groups, jspace)
    if utility_extra is not None:
        u = u + np.asarray(utility_extra, dtype=float)
    kernels = joint_kernels(groups, jspace)
    ev, values, iters = _solve_logsum_dense(u, kernels, beta, tol, max_iter)
    return JointSolveResult(ev, values, values.argmax(axis=1), jspace, iters)


@dataclass
class DecompositionReport:
    """Joint-versus-decomposed comparison on one instance."""

    max_abs_value_gap: float
    policy_agreement: float
    joint_states: int
    time_joint: float
    time_decomposed: float
    iterations_joint: int
    iterations_decomposed: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_value_gap <= self.tol and self.policy_agreement == 1.0

    def to_dict(self) -> dict:
        return {
            "max_abs_value_gap": self.max_abs_value_gap,
            "policy_agreement": self.policy_agreement,
            "joint_states": self.joint_states,
            "time_joint": self.time_joint,
            "time_decomposed": self.time_decomposed,
            "iterations_joint": self.iterations_joint,
            "iterations_decomposed": self.iterations_decomposed,
            "tol": self.tol,
            "passed": self.passed,
        }


def verify_decomposition(
    groups: list[JointGroupSpec],
    beta: float,
    tol: float = 1e-9,
    max_joint_states: int = 4096,
    utility_extra: np.ndarray | None = None,
) -> DecompositionReport:
    """Solve the joint problem and the per-group problems; report the value gap
    max_s |V_joint(s) - sum_g V_g(s_g)| and the fraction of joint states whose
    joint argmax action equals the profile of per-group argmaxes."""
    solve_tol = _certified_update_tol(tol / 4.0, beta)

    t0 = time.perf_counter()
    joint = solve_joint_oracle(
        groups, beta, solve_tol, max_joint_states=max_joint_states,
        utility_extra=utility_extra,
    )
    time_joint = time.perf_counter() - t0

    group_tol = solve_tol / max(len(groups), 1)
    t0 = time.perf_counter()
    evs, pols, iters_dec = [], [], 0
    for grp in groups:
        ev_g, values_g, it_g = _solve_logsum_dense(grp.utilities, grp.kernels, beta, group_tol)
        evs.append(ev_g)
        pols.append(values_g.argmax(axis=1))
        iters_dec = max(iters_dec, it_g)
    time_decomposed = time.perf_counter() - t0

    s_digits = joint.jspace.state_digits()
    decomposed_ev = np.zeros(joint.jspace.n_states)
    for g in range(len(groups)):
        decomposed_ev += evs[g][s_digits[g]]

    profile = np.zeros(joint.jspace.n_states, dtype=np.int64)
    for g in range(len(groups)):
        profile = profile * groups[g].n_actions + pols[g][s_digits[g]]

    return DecompositionReport(
        max_abs_value_gap=float(np.max(np.abs(joint.ev - decomposed_ev))),
        policy_agreement=float(np.mean(joint.policy == profile)),
        joint_states=joint.jspace.n_states,
        time_joint=time_joint,
        time_decomposed=time_decomposed,
        iterations_joint=joint.iterations,
        iterations_decomposed=iters_dec,
        tol=tol,
    )


def blockdiag_matvec_pair(
    blocks: list[np.ndarray], vectors: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Audit helper: multiply the block-diagonal matrix built from `blocks` against
    the stacked vector, and separately stack the per-block products.

    Both sides accumulate entry-by-entry in identical index order, so on a
    conforming instance they must agree bit for bit (the off-block terms are exact
    multiplications by zero).
    """
    sizes = [b.shape[0] for b in blocks]
    n = sum(sizes)
    full = np.zeros((n, n))
    offset = 0
    for b, sz in zip(blocks, sizes):
        full[offset : offset + sz, offset : offset + sz] = b
        offset += sz
    stacked_v = np.concatenate([np.asarray(v, dtype=float) for v in vectors])

    joint_out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += full[i, j] * stacked_v[j]
        joint_out[i] = acc

    parts = []
    for b, v, sz in zip(blocks, vectors, sizes):
        v = np.asarray(v, dtype=float)
        out = np.empty(sz)
        for i in range(sz):
            acc = 0.0
            for j in range(sz):
                acc += b[i, j] * v[j]
            out[i] = acc
        parts.append(out)
    return joint_out, np.concatenate(parts)


def random_group(
    rng: np.random.Generator, n_states: int, n_actions: int = 2, u_scale: float = 1.0
) -> JointGroupSpec:
    """Random conforming group subproblem: Dirichlet kernel rows, normal utilities."""
    utilities = rng.normal(0.0, u_scale, size=(n_states, n_actions))
    kernels = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
    return JointGroupSpec(utilities, kernels)


def benchmark_decomposition(
    configs: list[tuple[int, int]],
    beta: float = 0.9,
    seed: int = 0,
    target_seconds: float = 0.05,
    repeats: int = 3,
) -> list[dict]:
    """Measure per-sweep cost of the joint operator versus the decomposed operators.

    configs is a list of (n_groups, states_per_group). The joint sweep pays
    (m^G)^2 per action profile; the decomposed sweeps pay G * m^2 per action.
    Returns one dict per config with median per-sweep times and their ratio.
    """
    rows = []
    for n_groups, m in configs:
        rng = np.random.default_rng([seed, n_groups, m])
        groups = [random_group(rng, m) for _ in range(n_groups)]
        jspace = build_joint_space(groups, max_joint_states=10**9)
        u = joint_utility(groups, jspace)
        kernels = joint_kernels(groups, jspace)
        stacked = kernels.reshape(jspace.n_actions * jspace.n_states, jspace.n_states)
        ut = u.T

        def joint_sweep(ev):
            v = ut + beta * (stacked @ ev).reshape(jspace.n_actions, jspace.n_states)
            mx = v.max(axis=0)
            return mx + np.log(np.exp(v - mx).sum(axis=0))

        group_stacks = [g.kernels.reshape(g.n_actions * g.n_states, g.n_states) for g in groups]
        group_uts = [g.utilities.T for g in groups]

        def decomposed_sweep(evs):
            out = []
            for g, grp in enumerate(groups):
                v = group_uts[g] + beta * (group_stacks[g] @ evs[g]).reshape(
                    grp.n_actions, grp.n_states
                )
                mx = v.max(axis=0)
                out.append(mx + np.log(np.exp(v - mx).sum(axis=0)))
            return out

        def time_per_sweep(fn, state):
            # calibrate sweep count for a stable clock reading
            t0 = time.perf_counter()
            state = fn(state)
            once = max(time.perf_counter() - t0, 1e-7)
            sweeps = max(3, int(target_seconds / once))
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                for _ in range(sweeps):
                    state = fn(state)
                best = min(best, (time.perf_counter() - t0) / sweeps)
            return best

        t_joint = time_per_sweep(joint_sweep, np.zeros(jspace.n_states))
        t_dec = time_per_sweep(decomposed_sweep, [np.zeros(m) for _ in range(n_groups)])
        rows.append(
            {
                "n_groups": n_groups,
                "states_per_group": m,
                "joint_states": jspace.n_states,
                "seconds_per_sweep_joint": t_joint,
                "seconds_per_sweep_decomposed": t_dec,
                "joint_over_decomposed": t_joint / t_dec,
            }
        )
    return rows
