"""Batch command-line front end.

Nine subcommands cover the full workflow: generate or ingest a panel, estimate
transition primitives, fit the structural model, attach bootstrap standard
errors, compare models, map the interaction-coefficient likelihood surface,
run counterfactual scenarios, benchmark the block decomposition, and verify
it against the brute-force joint solver.

Conventions shared by every subcommand:
  - results are JSON on stdout (tabular artifacts go to CSV files),
  - each result embeds the fully resolved config and the seed it used, so any
    artifact can be regenerated from itself plus the input files,
  - wall-clock facts (timestamps, timings) live only under the "metadata" key,
    so byte comparison of everything else is meaningful,
  - failures exit nonzero with a one-line error JSON on stderr.

Numeric imports happen inside the command handlers, keeping ``--help`` and
argument errors fast; the ``--threads`` cap is applied to the already-loaded
BLAS/OpenMP pools at runtime.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

# model name -> (neighbor binning, gamma channels fixed at zero)
_MODELS = {
    "baseline": ("binary", ("gamma_lag", "gamma_fail")),
    "spatial": ("binary", ()),
    "lag-only": ("binary", ("gamma_fail",)),
    "fail-only": ("binary", ("gamma_lag",)),
    "intensity": ("bins_0_1_2plus", ()),
}


_thread_limit_holder = None  # keeps the threadpoolctl limit alive for the process


def _apply_threads(argv: list[str]) -> None:
    """Cap worker threads in the linked BLAS/OpenMP runtimes. Results never
    depend on the thread count; this only bounds CPU use."""
    global _thread_limit_holder
    n = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif arg.startswith("--threads="):
            n = arg.split("=", 1)[1]
    if n is not None:
        try:
            limit = int(n)
        except ValueError:
            return  # let argparse report the bad value
        for var in _THREAD_VARS:
            os.environ[var] = str(limit)
        import threadpoolctl

        _thread_limit_holder = threadpoolctl.threadpool_limits(limits=limit)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples to JSON-native types."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _envelope(command: str, config, seed, body: dict, runtime: dict | None = None) -> dict:
    from . import __version__

    meta = {"created": _now(), "version": __version__}
    if runtime:
        meta["runtime"] = runtime
    out = {"command": command, "config": config, "seed": seed}
    out.update(body)
    out["metadata"] = meta
    return _jsonable(out)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _load_config(path: str | None):
    from .config import RunConfig

    return RunConfig.load(path) if path else RunConfig.from_dict({})


def _model_space(cfg, model: str):
    """State space implied by the model name (binning) and the config (sizes)."""
    from .statespace import NeighborBinning, StateSpec, build_state_space

    binning, fixed_channels = _MODELS[model]
    spec = StateSpec(
        age_max=cfg.state.age_max,
        n_cages=cfg.state.n_cages,
        binning=NeighborBinning.from_name(binning),
    )
    return build_state_space(spec), fixed_channels


def _fixed_names(init, channels: tuple[str, ...]) -> tuple[str, ...]:
    return tuple(n for n in init.names() if n.startswith(channels)) if channels else ()


def _params_from_fit(envelope: dict):
    """Rebuild (config, space, params, fixed) from an estimate artifact."""
    import numpy as np

    from .config import RunConfig
    from .estimate import default_init

    cfg = RunConfig.from_dict(envelope["config"])
    model = envelope["model"]
    if model not in _MODELS:
        raise ValueError(f"fit artifact has unknown model {model!r}")
    space, fixed_channels = _model_space(cfg, model)
    template = default_init(space.spec.n_cages, space.n_levels - 1, cfg.beta)
    flat = envelope["fit"]["params"]
    vec = np.array([float(flat[name]) for name in template.names()])
    return cfg, space, template.with_vector(vec), _fixed_names(template, fixed_channels)


def _load_panel_checked(path: str):
    from .panel import load_panel

    return load_panel(path)


def _ensure_neighbor_vars(panel, space):
    from .panel import derive_neighbor_vars

    if space.n_levels > 1 and not panel.has_neighbor_vars:
        return derive_neighbor_vars(panel)
    return panel


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> tuple[dict, bool]:
    from .panel import write_panel
    from .statespace import build_state_space
    from .synthetic import default_topology, generate_synthetic

    cfg = _load_config(args.config)
    syn = cfg.synthetic
    seed = syn.seed if args.seed is None else args.seed
    space = build_state_space(cfg.state)
    truth = syn.build_truth(cfg.state.n_cages, space.n_levels - 1, cfg.beta)
    topology = default_topology(syn.n_groups, syn.group_size)
    panel = generate_synthetic(
        truth,
        syn.hazard,
        topology,
        space,
        T=syn.T,
        seed=seed,
        belief_rounds=syn.belief_rounds,
        vfi_tol=cfg.vfi_tol,
        vfi_max_iter=cfg.vfi_max_iter,
    )
    write_panel(panel, args.out)
    n = panel.n_obs
    body = {
        "out": args.out,
        "n_obs": n,
        "n_nodes": topology.n_nodes,
        "n_groups": syn.n_groups,
        "T": syn.T,
        "replacement_rate": float(panel.decision.mean()),
        "failure_rate": float(panel.fail.mean()),
        "truth": truth.to_dict(),
    }
    return _envelope("gen", cfg.to_dict(), seed, body), True


def cmd_transitions(args) -> tuple[dict, bool]:
    from .statespace import build_state_space
    from .transitions import (
        assemble_kernel,
        estimate_failure_hazard,
        estimate_neighbor_process,
        validate_kernel,
        write_kernel_csv,
    )

    cfg = _load_config(args.config)
    space = build_state_space(cfg.state)
    panel = _ensure_neighbor_vars(_load_panel_checked(args.panel), space)
    hazard = estimate_failure_hazard(panel, space, alpha=cfg.hazard_alpha)
    nbr = estimate_neighbor_process(panel, space)
    kernel = assemble_kernel(hazard, nbr, space)
    report = validate_kernel(kernel)
    write_kernel_csv(kernel, args.out)
    body = {
        "panel": args.panel,
        "out": args.out,
        "n_states": space.size,
        "hazard": {
            "alpha": hazard.alpha,
            "n_empty_cells": hazard.n_empty_cells,
            "min": float(hazard.table.min()),
            "mean": float(hazard.table.mean()),
            "max": float(hazard.table.max()),
        },
        "neighbor_process": {
            "n_levels": space.n_levels,
            "n_fallback_rows": nbr.n_fallback_rows,
            "lag_table": nbr.lag_table,
            "fail_table": nbr.fail_table,
        },
        "kernel_validation": {
            "ok": report.ok,
            "max_row_deviation": report.max_row_deviation,
            "n_negative_entries": report.n_negative_entries,
            "n_flagged_rows": len(report.flagged_rows),
            "n_unreachable_states": int(report.unreachable_states.size),
        },
    }
    return _envelope("transitions", cfg.to_dict(), None, body), report.ok


def _fit_body(model: str, panel_path: str, space, fit, nll0: float) -> tuple[dict, dict]:
    fit_dict = fit.to_dict()
    opt = fit_dict["optimizer"]
    runtime = {
        "seconds_total": opt.pop("seconds_total"),
        "seconds_per_eval": opt.pop("seconds_per_eval"),
    }
    body = {
        "model": model,
        "panel": panel_path,
        "binning": space.spec.binning.value,
        "fit": fit_dict,
        "null_nll": nll0,
    }
    return body, runtime


def cmd_estimate(args) -> tuple[dict, bool]:
    from .estimate import build_likelihood_context, default_init, fit_mle, null_nll

    cfg = _load_config(args.config)
    space, fixed_channels = _model_space(cfg, args.model)
    panel = _load_panel_checked(args.panel)
    ctx = build_likelihood_context(
        panel,
        space,
        hazard_alpha=cfg.hazard_alpha,
        vfi_tol=cfg.vfi_tol,
        vfi_max_iter=cfg.vfi_max_iter,
    )
    init = default_init(space.spec.n_cages, space.n_levels - 1, cfg.beta)
    fixed = _fixed_names(init, fixed_channels)
    fit = fit_mle(ctx, init, optimizer_cfg=cfg.optimizer, fixed=fixed)
    body, runtime = _fit_body(args.model, args.panel, space, fit, null_nll(ctx))
    payload = _envelope("estimate", cfg.to_dict(), None, body, runtime)
    if args.out:
        _write_json(args.out, payload)
    return payload, fit.trace.converged


def cmd_bootstrap(args) -> tuple[dict, bool]:
    from .estimate import block_bootstrap, build_likelihood_context

    envelope = _load_json(args.fit)
    cfg, space, params_hat, fixed = _params_from_fit(envelope)
    B = cfg.bootstrap.B if args.B is None else args.B
    seed = cfg.bootstrap.seed if args.seed is None else args.seed
    panel = _load_panel_checked(args.panel)
    ctx = build_likelihood_context(
        panel,
        space,
        hazard_alpha=cfg.hazard_alpha,
        vfi_tol=cfg.vfi_tol,
        vfi_max_iter=cfg.vfi_max_iter,
    )
    boot = block_bootstrap(
        ctx,
        params_hat,
        B=B,
        seed=seed,
        optimizer_cfg=cfg.optimizer,
        fixed=fixed,
        hazard_alpha=cfg.hazard_alpha,
    )
    envelope["fit"]["se_bootstrap"] = _jsonable(boot.se)
    envelope["bootstrap"] = _jsonable(boot.to_dict())
    envelope.setdefault("metadata", {})["created"] = _now()
    out = args.out or args.fit
    _write_json(out, envelope)
    return envelope, True


def cmd_lrtest(args) -> tuple[dict, bool]:
    from .estimate import lr_test

    file_mode = args.restricted is not None and args.full is not None
    value_mode = args.nll_restricted is not None and args.nll_full is not None
    if file_mode == value_mode:
        raise ValueError(
            "lrtest needs either --restricted and --full fit files, "
            "or --nll-restricted, --nll-full, and --df"
        )
    if file_mode:
        restricted = _load_json(args.restricted)
        full = _load_json(args.full)
        nll_r, nll_f = restricted["fit"]["nll"], full["fit"]["nll"]
        df = full["fit"]["k"] - restricted["fit"]["k"]
        if restricted["fit"]["n_obs"] != full["fit"]["n_obs"]:
            raise ValueError(
                "restricted and full fits were estimated on different sample sizes"
            )
        config = full["config"]
        inputs = {"restricted": args.restricted, "full": args.full}
    else:
        if args.df is None:
            raise ValueError("--df is required with --nll-restricted/--nll-full")
        nll_r, nll_f, df = args.nll_restricted, args.nll_full, args.df
        config = {"nll_restricted": nll_r, "nll_full": nll_f, "df": df}
        inputs = {}
    result = lr_test(nll_r, nll_f, df)
    body = {**inputs, "lr": result.to_dict()}
    return _envelope("lrtest", config, None, body), True


def _parse_grid(spec: str):
    import numpy as np

    try:
        parts = spec.split(",")
        if len(parts) != 2:
            raise ValueError
        axes = []
        for part in parts:
            lo, hi, n = part.split(":")
            axes.append(np.linspace(float(lo), float(hi), int(n)))
        return axes[0], axes[1]
    except ValueError:
        raise ValueError(
            f"bad --grid {spec!r}; expected 'lo:hi:n,lo:hi:n' "
            "(lag axis first, then fail axis)"
        )


def cmd_surface(args) -> tuple[dict, bool]:
    from .estimate import build_likelihood_context, likelihood_surface

    envelope = _load_json(args.fit)
    cfg, space, params_hat, _ = _params_from_fit(envelope)
    panel_path = args.panel or envelope.get("panel")
    if not panel_path:
        raise ValueError("no --panel given and the fit artifact records none")
    panel = _load_panel_checked(panel_path)
    ctx = build_likelihood_context(
        panel,
        space,
        hazard_alpha=cfg.hazard_alpha,
        vfi_tol=cfg.vfi_tol,
        vfi_max_iter=cfg.vfi_max_iter,
    )
    gl_values, gf_values = _parse_grid(args.grid)
    grid = likelihood_surface(ctx, params_hat, gl_values, gf_values)
    grid.to_csv(args.out)
    body = {
        "fit": args.fit,
        "panel": panel_path,
        "out": args.out,
        "grid": args.grid,
        "gamma_lag_values": grid.gamma_lag_values,
        "gamma_fail_values": grid.gamma_fail_values,
        "min_cell": list(grid.min_cell),
        "min_gamma_lag": float(grid.gamma_lag_values[grid.min_cell[0]]),
        "min_gamma_fail": float(grid.gamma_fail_values[grid.min_cell[1]]),
        "contour_level": grid.contour_level,
        "n_failed_cells": int(grid.failed.sum()),
        "n_inside_contour": int((grid.delta[~grid.failed] <= grid.contour_level).sum()),
    }
    return _envelope("surface", cfg.to_dict(), None, body), True


def cmd_simulate(args) -> tuple[dict, bool]:
    from .counterfactual import (
        UnitCosts,
        channel_decomposition,
        init_from_panel,
        run_scenarios,
        standard_scenarios,
    )
    from .panel import Topology
    from .transitions import estimate_failure_hazard, estimate_neighbor_process

    envelope = _load_json(args.fit)
    cfg, space, params_hat, _ = _params_from_fit(envelope)
    sim_cfg = cfg.simulation
    T = sim_cfg.T if args.T is None else args.T
    seed = sim_cfg.seed if args.seed is None else args.seed
    gamma_scale = sim_cfg.gamma_scale if args.gamma_scale is None else args.gamma_scale
    labels = tuple(args.scenarios.split(",")) if args.scenarios else sim_cfg.scenarios

    panel_path = args.panel or envelope.get("panel")
    if not panel_path:
        raise ValueError("no --panel given and the fit artifact records none")
    panel = _ensure_neighbor_vars(_load_panel_checked(panel_path), space)
    topology = Topology.from_panel(panel)
    hazard = estimate_failure_hazard(panel, space, alpha=cfg.hazard_alpha)
    nbr = estimate_neighbor_process(panel, space)
    init = init_from_panel(panel, topology)

    scenarios = [s for s in standard_scenarios(gamma_scale) if s.label in labels]
    unknown = set(labels) - {s.label for s in standard_scenarios()}
    if unknown:
        raise ValueError(f"unknown scenario label(s): {sorted(unknown)}")
    comparison = run_scenarios(
        params_hat,
        space,
        hazard,
        nbr,
        topology,
        init,
        scenarios=scenarios,
        T=T,
        seed=seed,
        unit_costs=UnitCosts(
            replacement=cfg.unit_costs.replacement,
            failure_multiplier=cfg.unit_costs.failure_multiplier,
        ),
        vfi_tol=cfg.vfi_tol,
        vfi_max_iter=cfg.vfi_max_iter,
    )

    if args.series_csv:
        with open(args.series_csv, "w", newline="") as fh:
            fh.write("scenario,period,replacements,failures,mean_age\n")
            for label in labels:
                sim = comparison.results[label]
                for t in range(sim.horizon):
                    fh.write(
                        f"{label},{t},{int(sim.replacements[t])},"
                        f"{int(sim.failures[t])},{float(sim.mean_age[t])!r}\n"
                    )

    summary = {}
    for label in labels:
        sim = comparison.results[label]
        summary[label] = {
            "cumulative_replacements": sim.cumulative_replacements,
            "cumulative_failures": sim.cumulative_failures,
            "cost": comparison.costs[label].to_dict(),
        }
    body = {
        "fit": args.fit,
        "panel": panel_path,
        "T": T,
        "gamma_scale": gamma_scale,
        "scenarios": summary,
        "series_csv": args.series_csv,
        "shock_streams": "failure and decision streams are shared across "
        "scenarios (common random numbers); only the policies differ",
    }
    if {"full", "lag-only", "fail-only", "none"} <= set(labels):
        effects = channel_decomposition(comparison)
        body["channel_effects"] = {k: v.to_dict() for k, v in effects.items()}
    payload = _envelope("simulate", cfg.to_dict(), seed, body)
    if args.out:
        _write_json(args.out, payload)
    return payload, True


def cmd_bench(args) -> tuple[dict, bool]:
    from .bellman import benchmark_decomposition

    groups = [int(g) for g in args.groups.split(",")]
    configs = [(g, args.group_size) for g in groups]
    rows = benchmark_decomposition(
        configs,
        beta=args.beta,
        seed=args.seed,
        target_seconds=args.target_seconds,
        repeats=args.repeats,
    )
    config = {
        "groups": groups,
        "group_size": args.group_size,
        "beta": args.beta,
        "target_seconds": args.target_seconds,
        "repeats": args.repeats,
    }
    return _envelope("bench", config, args.seed, {"rows": rows}), True


def cmd_verify_decomposition(args) -> tuple[dict, bool]:
    import numpy as np

    from .bellman import random_group, verify_decomposition

    instances = []
    n_pass = 0
    worst_gap, worst_agreement = 0.0, 1.0
    for i in range(args.instances):
        rng = np.random.default_rng([args.seed, i])
        n_groups = int(rng.integers(2, 5))
        sizes = rng.integers(2, 7, size=n_groups)
        beta = float(rng.uniform(0.5, 0.95))
        groups = [random_group(rng, int(m)) for m in sizes]
        report = verify_decomposition(
            groups, beta, tol=args.tol, max_joint_states=args.max_joint
        )
        n_pass += report.passed
        worst_gap = max(worst_gap, report.max_abs_value_gap)
        worst_agreement = min(worst_agreement, report.policy_agreement)
        instances.append(
            {
                "instance": i,
                "n_groups": n_groups,
                "sizes": sizes.tolist(),
                "beta": beta,
                **report.to_dict(),
            }
        )
    config = {
        "instances": args.instances,
        "tol": args.tol,
        "max_joint": args.max_joint,
    }
    body = {
        "n_pass": n_pass,
        "n_fail": args.instances - n_pass,
        "max_abs_value_gap": worst_gap,
        "min_policy_agreement": worst_agreement,
        "all_passed": n_pass == args.instances,
        "results": instances,
    }
    return _envelope("verify-decomposition", config, args.seed, body), n_pass == args.instances


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap BLAS/OpenMP threads (default: all cores); results do not "
        "depend on the thread count",
    )

    parser = argparse.ArgumentParser(
        prog="blockdp",
        description="Estimate and simulate dynamic replacement models with "
        "localized within-group interactions.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic panel")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="panel CSV path")
    p.add_argument("--seed", type=int, default=None, help="override synthetic.seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser(
        "transitions",
        parents=[common],
        help="estimate hazard and neighbor processes, write the kernel CSV",
    )
    p.add_argument("--panel", required=True)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="kernel CSV path")
    p.set_defaults(func=cmd_transitions)

    p = sub.add_parser("estimate", parents=[common], help="fit the structural model")
    p.add_argument("--panel", required=True)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", help="fit artifact JSON path")
    p.add_argument(
        "--model",
        choices=sorted(_MODELS),
        default="spatial",
        help="baseline: no interactions; spatial: binary neighbor terms; "
        "intensity: 0/1/2+ binned terms; lag-only/fail-only: one channel",
    )
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser(
        "bootstrap", parents=[common], help="attach group-block bootstrap SEs to a fit"
    )
    p.add_argument("--panel", required=True)
    p.add_argument("--fit", required=True, help="fit artifact from `estimate`")
    p.add_argument("--B", type=int, default=None, help="replicates (default from config)")
    p.add_argument("--seed", type=int, default=None, help="default from config")
    p.add_argument("--out", help="output path (default: rewrite --fit in place)")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser(
        "lrtest", parents=[common], help="likelihood ratio test between two fits"
    )
    p.add_argument("--restricted", help="restricted-model fit artifact")
    p.add_argument("--full", help="full-model fit artifact")
    p.add_argument("--nll-restricted", type=float, help="raw NLL alternative")
    p.add_argument("--nll-full", type=float, help="raw NLL alternative")
    p.add_argument("--df", type=int, help="degrees of freedom (raw NLL mode)")
    p.set_defaults(func=cmd_lrtest)

    p = sub.add_parser(
        "surface",
        parents=[common],
        help="profile NLL over the two interaction coefficients",
    )
    p.add_argument("--fit", required=True)
    p.add_argument("--panel", help="default: panel recorded in the fit artifact")
    p.add_argument(
        "--grid",
        default="-0.9:0.1:11,-0.9:0.1:11",
        help="lag and fail axes as 'lo:hi:n,lo:hi:n'; write --grid=-0.9:... "
        "when the range starts with a minus sign",
    )
    p.add_argument("--out", required=True, help="surface CSV path")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser(
        "simulate", parents=[common], help="counterfactual scenario simulation"
    )
    p.add_argument("--fit", required=True)
    p.add_argument("--panel", help="default: panel recorded in the fit artifact")
    p.add_argument(
        "--scenarios", help="comma list among full,lag-only,fail-only,none"
    )
    p.add_argument("--T", type=int, default=None, help="horizon (default from config)")
    p.add_argument("--seed", type=int, default=None, help="default from config")
    p.add_argument("--gamma-scale", type=float, default=None, dest="gamma_scale")
    p.add_argument("--out", help="summary JSON path")
    p.add_argument("--series-csv", dest="series_csv", help="per-period CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "bench",
        parents=[common],
        help="joint vs decomposed per-sweep timing",
    )
    p.add_argument("--groups", default="1,2,3", help="comma list of group counts")
    p.add_argument("--group-size", type=int, default=8, dest="group_size")
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument(
        "--target-seconds", type=float, default=0.05, dest="target_seconds"
    )
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser(
        "verify-decomposition",
        parents=[common],
        help="randomized check of the block decomposition against the joint solver",
    )
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-joint", type=int, default=4096, dest="max_joint")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify_decomposition)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _apply_threads(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        payload, ok = args.func(args)
    except Exception as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error), file=sys.stderr)
        return 1
    print(json.dumps(payload, indent=2))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
