"""Nested fixed point maximum likelihood and inference.

Outer loop: derivative-free simplex descent (Nelder-Mead with restart-on-stall)
over the flow-utility coefficients; beta is calibrated, never estimated. Inner
loop: the logsum Bellman solve of bellman.solve_vfi. Inference: central
finite-difference Hessian for asymptotic standard errors and a group-block
bootstrap. Model comparison: likelihood ratio, AIC/BIC, McFadden pseudo-R2,
and profile likelihood surfaces over the interaction coefficients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .bellman import SolveResult, StructuralParams, solve_vfi
from .errors import (
    BootstrapError,
    ConfigError,
    ConvergenceError,
    EstimationError,
)
from .panel import Panel, derive_neighbor_vars
from .statespace import StateSpace
from .transitions import (
    ControlledKernel,
    FailureHazard,
    NeighborProcess,
    assemble_kernel,
    estimate_failure_hazard,
    estimate_neighbor_process,
)

__all__ = [
    "LikelihoodContext",
    "OptimizerConfig",
    "OptimizerTrace",
    "EstimationResult",
    "LRResult",
    "BootstrapResult",
    "SurfaceGrid",
    "build_likelihood_context",
    "negative_log_likelihood",
    "null_nll",
    "fit_mle",
    "default_init",
    "asymptotic_se",
    "fd_hessian",
    "block_bootstrap",
    "lr_test",
    "information_criteria",
    "pseudo_r2",
    "likelihood_surface",
]


@dataclass
class LikelihoodContext:
    """Everything a likelihood evaluation needs, encoded once.

    counts[s, d] aggregates observations by (state id, action), so one evaluation
    costs a Bellman solve plus an O(size) weighted sum in fixed index order.
    """

    panel: Panel
    space: StateSpace
    kernel: ControlledKernel
    hazard: FailureHazard
    nbr_process: NeighborProcess
    state_ids: np.ndarray
    actions: np.ndarray
    counts: np.ndarray
    vfi_tol: float = 1e-10
    vfi_max_iter: int = 10_000

    @property
    def n_obs(self) -> int:
        return int(self.actions.shape[0])


def build_likelihood_context(
    panel: Panel,
    space: StateSpace,
    hazard_alpha: float = 0.5,
    vfi_tol: float = 1e-10,
    vfi_max_iter: int = 10_000,
    hazard: FailureHazard | None = None,
    nbr_process: NeighborProcess | None = None,
) -> LikelihoodContext:
    """Estimate transition components from the panel (unless supplied), assemble
    kernels, and pre-encode observations. Neighbor columns are derived on the fly
    when the binning needs them and the panel lacks them."""
    if space.n_levels > 1 and not panel.has_neighbor_vars:
        panel = derive_neighbor_vars(panel)
    if hazard is None:
        hazard = estimate_failure_hazard(panel, space, hazard_alpha)
    if nbr_process is None:
        nbr_process = estimate_neighbor_process(panel, space)
    kernel = assemble_kernel(hazard, nbr_process, space)

    binning = space.spec.binning
    if panel.has_neighbor_vars:
        nbr_lag = binning.bin_count(panel.nbr_lag)
        nbr_fail = binning.bin_count(panel.nbr_fail)
    else:
        nbr_lag = nbr_fail = np.zeros(panel.n_obs, dtype=np.int64)
    state_ids = space.encode(
        np.minimum(panel.age, space.n_ages - 1), panel.cage, panel.fail, nbr_lag, nbr_fail
    )
    actions = panel.decision.astype(np.int64)
    counts = np.zeros((space.size, 2))
    np.add.at(counts, (state_ids, actions), 1.0)
    return LikelihoodContext(
        panel, space, kernel, hazard, nbr_process,
        state_ids, actions, counts, vfi_tol, vfi_max_iter,
    )


def _nll_from_solve(ctx: LikelihoodContext, result: SolveResult) -> float:
    return float(-np.sum(ctx.counts * result.log_ccp))


def negative_log_likelihood(
    ctx: LikelihoodContext, params: StructuralParams, ev0: np.ndarray | None = None
) -> float:
    """-sum log P(d_it | s_it; params). Deterministic for fixed inputs: the inner
    solve starts from ev0 (zeros by default) and sums run in fixed state order."""
    result = solve_vfi(
        ctx.space, ctx.kernel, params, ctx.vfi_tol, ctx.vfi_max_iter, ev0=ev0
    )
    return _nll_from_solve(ctx, result)


def null_nll(ctx: LikelihoodContext) -> float:
    """Intercept-only static logit on the choice column (the pseudo-R2 null)."""
    n = ctx.n_obs
    n1 = float(np.sum(ctx.actions))
    out = 0.0
    for cnt in (n1, n - n1):
        if cnt > 0:
            out -= cnt * np.log(cnt / n)
    return out


def information_criteria(nll: float, k: int, n_obs: int) -> tuple[float, float]:
    """(AIC, BIC) = (2k + 2 nll, k ln(n_obs) + 2 nll)."""
    if k < 1 or n_obs < 1:
        raise ConfigError(f"need k >= 1 and n_obs >= 1, got k={k}, n_obs={n_obs}")
    return 2.0 * k + 2.0 * nll, k * float(np.log(n_obs)) + 2.0 * nll


def pseudo_r2(nll_model: float, nll_null: float) -> float:
    """McFadden pseudo-R2, 1 - nll_model / nll_null."""
    if nll_null == 0:
        raise ZeroDivisionError("null NLL is zero; pseudo-R2 undefined")
    if nll_null < 0:
        raise ConfigError(f"null NLL must be positive, got {nll_null}")
    return 1.0 - nll_model / nll_null


@dataclass
class LRResult:
    statistic: float
    df: int
    p_value: float

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def lr_test(nll_restricted: float, nll_full: float, df: int, slack: float = 1e-6) -> LRResult:
    """Likelihood ratio statistic 2 (nll_restricted - nll_full) against chi2(df)."""
    stat = 2.0 * (nll_restricted - nll_full)
    if stat < -slack:
        raise EstimationError(
            f"restricted NLL {nll_restricted} is below full NLL {nll_full} by more "
            f"than the numerical slack; the models are not nested as claimed"
        )
    stat = max(stat, 0.0)
    return LRResult(stat, df, float(stats.chi2.sf(stat, df)))


@dataclass(frozen=True)
class OptimizerConfig:
    """Simplex settings: converged when vertex spread < xatol and f-spread < fatol."""

    xatol: float = 1e-6
    fatol: float = 1e-8
    max_evals: int = 40_000
    max_restarts: int = 2
    restart_improvement: float = 1e-8


@dataclass
class OptimizerTrace:
    iterations: int
    evaluations: int
    seconds_total: float
    seconds_per_eval: float
    restarts: int
    converged: bool

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class EstimationResult:
    params_hat: StructuralParams
    nll: float
    n_obs: int
    k: int
    aic: float
    bic: float
    pseudo_r2: float
    trace: OptimizerTrace
    se_asymptotic: dict[str, float] | None = None
    se_bootstrap: dict[str, float] | None = None
    fixed: tuple[str, ...] = ()
    init: StructuralParams | None = None

    def to_dict(self) -> dict:
        return {
            "params": self.params_hat.to_dict(),
            "nll": self.nll,
            "n_obs": self.n_obs,
            "k": self.k,
            "aic": self.aic,
            "bic": self.bic,
            "pseudo_r2": self.pseudo_r2,
            "se_asymptotic": self.se_asymptotic,
            "se_bootstrap": self.se_bootstrap,
            "fixed": list(self.fixed),
            "optimizer": self.trace.to_dict(),
        }


def default_init(n_cages: int, gamma_arity: int, beta: float) -> StructuralParams:
    """Conventional starting point: mild age decay, strong failure and replacement
    costs, interactions off (so the spatial search starts at the baseline fit)."""
    return StructuralParams(
        theta_age=(-0.01,) * n_cages,
        theta_fail=-5.0,
        theta_rc=-8.0,
        gamma_lag=(0.0,) * gamma_arity,
        gamma_fail=(0.0,) * gamma_arity,
        beta=beta,
    )


def _free_indices(template: StructuralParams, fixed: tuple[str, ...]) -> np.ndarray:
    names = template.names()
    unknown = set(fixed) - set(names)
    if unknown:
        raise ConfigError(f"unknown fixed parameter name(s): {sorted(unknown)}")
    return np.array([i for i, n in enumerate(names) if n not in fixed], dtype=np.int64)


class _WarmObjective:
    """NLL as a function of the free-parameter subvector, with the inner solve
    warm-started from the previous evaluation's fixed point. The sequence of
    evaluations, hence every returned value, is deterministic."""

    def __init__(self, ctx: LikelihoodContext, template: StructuralParams, free: np.ndarray):
        self.ctx = ctx
        self.template = template
        self.free = free
        self.base = template.as_vector()
        self.ev = None
        self.evaluations = 0

    def params_at(self, x_free: np.ndarray) -> StructuralParams:
        vec = self.base.copy()
        vec[self.free] = x_free
        return self.template.with_vector(vec)

    def __call__(self, x_free: np.ndarray) -> float:
        params = self.params_at(x_free)
        result = solve_vfi(
            self.ctx.space, self.ctx.kernel, params,
            self.ctx.vfi_tol, self.ctx.vfi_max_iter, ev0=self.ev,
        )
        self.ev = result.ev
        self.evaluations += 1
        return _nll_from_solve(self.ctx, result)


def fit_mle(
    ctx: LikelihoodContext,
    init: StructuralParams,
    optimizer_cfg: OptimizerConfig | None = None,
    fixed: tuple[str, ...] = (),
    compute_se: bool = True,
) -> EstimationResult:
    """Nested fixed point MLE.

    fixed names parameters pinned at their init values (for channel-restricted
    fits); they do not count toward k. If the evaluation budget runs out, the
    best point so far is returned with trace.converged False.
    """
    cfg = optimizer_cfg or OptimizerConfig()
    free = _free_indices(init, fixed)
    if free.size == 0:
        raise ConfigError("no free parameters to estimate")
    objective = _WarmObjective(ctx, init, free)

    t0 = time.perf_counter()
    x = init.as_vector()[free]
    best_x, best_f = x, objective(x)
    iterations, restarts, converged = 0, 0, False
    while True:
        remaining = cfg.max_evals - objective.evaluations
        if remaining <= 1:
            break
        res = optimize.minimize(
            objective,
            best_x,
            method="Nelder-Mead",
            options={
                "xatol": cfg.xatol,
                "fatol": cfg.fatol,
                "maxfev": remaining,
                "disp": False,
            },
        )
        iterations += int(res.nit)
        improvement = best_f - res.fun
        if res.fun < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float), float(res.fun)
        if not res.success:
            converged = False
            break
        converged = True
        if restarts >= cfg.max_restarts or improvement < cfg.restart_improvement:
            break  # simplex converged and a fresh start would not move it
        restarts += 1
    seconds = time.perf_counter() - t0

    params_hat = objective.params_at(best_x)
    nll = negative_log_likelihood(ctx, params_hat)  # canonical cold-start value
    k = int(free.size)
    aic, bic = information_criteria(nll, k, ctx.n_obs)
    r2 = pseudo_r2(nll, null_nll(ctx))
    trace = OptimizerTrace(
        iterations=iterations,
        evaluations=objective.evaluations,
        seconds_total=seconds,
        seconds_per_eval=seconds / max(objective.evaluations, 1),
        restarts=restarts,
        converged=converged,
    )
    se = None
    if compute_se:
        se = asymptotic_se(ctx, params_hat, fixed=fixed)
    return EstimationResult(
        params_hat=params_hat, nll=nll, n_obs=ctx.n_obs, k=k,
        aic=aic, bic=bic, pseudo_r2=r2, trace=trace,
        se_asymptotic=se, fixed=fixed, init=init,
    )


def fd_hessian(f, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central finite-difference Hessian of f at x with per-coordinate steps."""
    x = np.asarray(x, dtype=float)
    k = x.size
    h = np.asarray(steps, dtype=float)
    hess = np.empty((k, k))
    f0 = f(x)

    def at(*offsets):
        xp = x.copy()
        for idx, delta in offsets:
            xp[idx] += delta
        return f(xp)

    for i in range(k):
        fp = at((i, h[i]))
        fm = at((i, -h[i]))
        hess[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
    for i in range(k):
        for j in range(i + 1, k):
            fpp = at((i, h[i]), (j, h[j]))
            fpm = at((i, h[i]), (j, -h[j]))
            fmp = at((i, -h[i]), (j, h[j]))
            fmm = at((i, -h[i]), (j, -h[j]))
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return hess


def asymptotic_se(
    ctx_or_objective,
    params_hat: StructuralParams,
    fixed: tuple[str, ...] = (),
    step_scale: float = 1e-4,
) -> dict[str, float]:
    """Inverse-Hessian standard errors of the NLL at the optimum.

    Steps are step_scale * max(1, |param|) per coordinate, central differences.
    The first argument is normally a LikelihoodContext; a bare callable over the
    free-parameter vector is accepted for diagnostics. A Hessian that is not
    positive definite raises, listing its eigenvalues.
    """
    free = _free_indices(params_hat, fixed)
    names = [params_hat.names()[i] for i in free]
    x_hat = params_hat.as_vector()[free]
    if callable(ctx_or_objective):
        f = ctx_or_objective
    else:
        objective = _WarmObjective(ctx_or_objective, params_hat, free)
        f = objective
    steps = step_scale * np.maximum(1.0, np.abs(x_hat))
    hess = fd_hessian(f, x_hat, steps)
    eigenvalues = np.linalg.eigvalsh(hess)
    if np.any(eigenvalues <= 0):
        raise EstimationError(
            "Hessian at the reported optimum is not positive definite; "
            f"eigenvalues: {eigenvalues.tolist()}"
        )
    cov = np.linalg.inv(hess)
    ses = np.sqrt(np.diag(cov))
    return dict(zip(names, ses.tolist()))


@dataclass
class BootstrapResult:
    se: dict[str, float]
    estimates: np.ndarray           # (n_kept, n_free) replicate estimates
    names: list[str]
    n_requested: int
    n_dropped: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "se": self.se,
            "replicates": self.n_requested,
            "dropped": self.n_dropped,
            "seed": self.seed,
        }


def _resample_panel(panel: Panel, draw: np.ndarray) -> Panel:
    """Concatenate the drawn groups, relabeling group and node ids so duplicated
    groups stay distinct blocks. No observation crosses groups."""
    by_group = {int(g): np.flatnonzero(panel.group_id == g) for g in np.unique(panel.group_id)}
    node_stride = int(panel.node_id.max()) + 1
    idx_parts, gid_parts, nid_parts = [], [], []
    for j, g in enumerate(draw):
        rows = by_group[int(g)]
        idx_parts.append(rows)
        gid_parts.append(np.full(rows.size, j, dtype=np.int64))
        nid_parts.append(panel.node_id[rows] + j * node_stride)
    idx = np.concatenate(idx_parts)
    return Panel(
        np.concatenate(nid_parts), np.concatenate(gid_parts), panel.period[idx],
        panel.age[idx], panel.cage[idx], panel.fail[idx], panel.decision[idx],
    )


def block_bootstrap(
    ctx: LikelihoodContext,
    params_hat: StructuralParams,
    B: int = 100,
    seed: int = 0,
    optimizer_cfg: OptimizerConfig | None = None,
    fixed: tuple[str, ...] = (),
    hazard_alpha: float | None = None,
) -> BootstrapResult:
    """Group-block bootstrap: resample whole groups with replacement, re-derive
    neighbor variables, re-estimate transitions, refit, and take the standard
    deviation of the replicate estimates.

    Replicates are keyed by (seed, index), so results do not depend on execution
    order. Failed replicate fits are dropped and counted; more than 20% dropped
    raises.
    """
    groups = np.unique(ctx.panel.group_id)
    if groups.size < 2:
        raise BootstrapError("block bootstrap needs at least 2 groups to resample")
    if B < 2:
        raise ConfigError("need at least 2 replicates")
    alpha = ctx.hazard.alpha if hazard_alpha is None else hazard_alpha
    free = _free_indices(params_hat, fixed)
    names = [params_hat.names()[i] for i in free]

    estimates, n_dropped = [], 0
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        draw = rng.choice(groups, size=groups.size, replace=True)
        try:
            rep_panel = derive_neighbor_vars(_resample_panel(ctx.panel, draw))
            rep_ctx = build_likelihood_context(
                rep_panel, ctx.space, hazard_alpha=alpha,
                vfi_tol=ctx.vfi_tol, vfi_max_iter=ctx.vfi_max_iter,
            )
            rep_fit = fit_mle(
                rep_ctx, params_hat, optimizer_cfg, fixed=fixed, compute_se=False
            )
            if not rep_fit.trace.converged:
                raise ConvergenceError("replicate fit did not converge")
            estimates.append(rep_fit.params_hat.as_vector()[free])
        except (ConvergenceError, EstimationError, ConfigError):
            n_dropped += 1
    if n_dropped > 0.2 * B:
        raise BootstrapError(
            f"{n_dropped} of {B} bootstrap replicates failed; standard errors "
            f"would be unreliable"
        )
    est = np.asarray(estimates)
    ses = est.std(axis=0, ddof=1)
    return BootstrapResult(
        se=dict(zip(names, ses.tolist())),
        estimates=est,
        names=names,
        n_requested=B,
        n_dropped=n_dropped,
        seed=seed,
    )


@dataclass
class SurfaceGrid:
    """Profile NLL over the two interaction coefficients, others held fixed."""

    gamma_lag_values: np.ndarray
    gamma_fail_values: np.ndarray
    nll: np.ndarray           # (n_lag, n_fail); NaN where the solve failed
    delta: np.ndarray         # nll - nanmin(nll)
    failed: np.ndarray        # bool mask of failed cells
    min_cell: tuple[int, int]
    contour_level: float      # chi2_2(0.95) / 2

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("gamma_lag,gamma_fail,delta_nll\n")
            for i, gl in enumerate(self.gamma_lag_values):
                for j, gf in enumerate(self.gamma_fail_values):
                    d = "nan" if self.failed[i, j] else repr(float(self.delta[i, j]))
                    fh.write(f"{float(gl)!r},{float(gf)!r},{d}\n")


def likelihood_surface(
    ctx: LikelihoodContext,
    params_hat: StructuralParams,
    gamma_lag_values: np.ndarray,
    gamma_fail_values: np.ndarray,
) -> SurfaceGrid:
    """Evaluate the NLL over a (gamma_lag, gamma_fail) grid, all other parameters
    held at params_hat. Failed cells are marked and skipped, not fatal."""
    if len(params_hat.gamma_lag) != 1 or len(params_hat.gamma_fail) != 1:
        raise ConfigError(
            "likelihood_surface needs scalar interaction coefficients "
            "(binary neighbor binning)"
        )
    gl_vals = np.asarray(gamma_lag_values, dtype=float)
    gf_vals = np.asarray(gamma_fail_values, dtype=float)
    if gl_vals.size == 0 or gf_vals.size == 0 or not (
        np.all(np.isfinite(gl_vals)) and np.all(np.isfinite(gf_vals))
    ):
        raise ConfigError("surface grid must be finite and non-empty")
    nll = np.full((gl_vals.size, gf_vals.size), np.nan)
    failed = np.zeros_like(nll, dtype=bool)
    ev = None
    for i, gl in enumerate(gl_vals):
        for j, gf in enumerate(gf_vals):
            params = StructuralParams(
                theta_age=params_hat.theta_age,
                theta_fail=params_hat.theta_fail,
                theta_rc=params_hat.theta_rc,
                gamma_lag=(float(gl),),
                gamma_fail=(float(gf),),
                beta=params_hat.beta,
            )
            try:
                result = solve_vfi(
                    ctx.space, ctx.kernel, params, ctx.vfi_tol, ctx.vfi_max_iter, ev0=ev
                )
                ev = result.ev
                nll[i, j] = _nll_from_solve(ctx, result)
            except ConvergenceError:
                failed[i, j] = True
    if np.all(failed):
        raise EstimationError("every surface cell failed to solve")
    delta = nll - np.nanmin(nll)
    min_cell = np.unravel_index(np.nanargmin(nll), nll.shape)
    return SurfaceGrid(
        gl_vals, gf_vals, nll, delta, failed,
        (int(min_cell[0]), int(min_cell[1])),
        contour_level=float(stats.chi2.ppf(0.95, 2) / 2.0),
    )
