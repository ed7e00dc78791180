"""Command-line entry point.

Commands: solve, verify, iterate, simulate, diagnostics.  Exit codes
distinguish scientific results from faults: 0 success, 1 input error,
2 no equilibrium of the assumed form (a result, not a failure), 3
verification failure.  Every command writes a manifest next to its
outputs and, unless --no-plot is given, a rendered figure alongside each
delimited file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .equilibrium import (
    EquilibriumProfile,
    policy_iteration,
    profile_from_theta,
    solve_equilibrium,
    verify_spike,
)
from .errors import EmeqError, NoEquilibriumOfThisForm, SchemaError, ValidationError
from .market import Family, WealthIndependent, make_problem
from .reporting import (
    figure_path,
    render_diagnostics_figure,
    render_profile_figure,
    render_samples_figure,
    render_trace_figure,
    render_verification_figure,
    utcnow,
    write_csv,
    write_manifest,
)
from .simulate import estimate_J, flow_diagnostics, simulate, spike_derivative_mc

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NO_EQUILIBRIUM = 2
EXIT_VERIFY_FAILED = 3


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(
            f"malformed JSON in {path}: {exc.msg} at line {exc.lineno}, "
            f"column {exc.colno}"
        ) from None


def _resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if config.get("seed") is not None:
        return int(config["seed"])
    return 0


def _emit_profile(profile, out: Path, plot: bool, manifest_extra=None, **manifest_kw):
    outputs = [str(out)]
    profile.to_csv(out)
    if plot:
        fig = figure_path(out)
        render_profile_figure(profile, fig)
        outputs.append(str(fig))
    manifest = out.with_suffix(out.suffix + ".manifest.json")
    write_manifest(manifest, outputs=outputs, extra=manifest_extra, **manifest_kw)
    return outputs


def cmd_solve(args) -> int:
    started = utcnow()
    config = _load_config(args.config)
    spec = make_problem(config)
    out = Path(args.out)
    try:
        profile = solve_equilibrium(spec, mode=args.mode)
    except NoEquilibriumOfThisForm as exc:
        print(
            "only the zero solution Lambda1 = 0 found; no equilibrium of "
            f"the proportional form ({exc.diagnostic})",
            file=sys.stderr,
        )
        manifest = out.with_suffix(out.suffix + ".manifest.json")
        write_manifest(
            manifest,
            command="solve",
            config=config,
            seed=_resolve_seed(args, config),
            outputs=[],
            started_at=started,
            extra={"result": "no_equilibrium_of_this_form", "diagnostic": exc.diagnostic},
        )
        return EXIT_NO_EQUILIBRIUM
    _emit_profile(
        profile,
        out,
        plot=not args.no_plot,
        command="solve",
        config=config,
        seed=_resolve_seed(args, config),
        started_at=started,
    )
    print(f"wrote {out} ({spec.family.value}, {spec.grid.n_steps} steps)")
    return EXIT_OK


def cmd_verify(args) -> int:
    started = utcnow()
    config = _load_config(args.config)
    spec = make_problem(config)
    theta = EquilibriumProfile.theta_from_csv(args.profile)
    if theta.size != spec.grid.n_steps + 1:
        raise ValidationError(
            f"profile has {theta.size} rows but the grid has "
            f"{spec.grid.n_steps + 1} nodes"
        )
    profile = profile_from_theta(spec, theta)
    report = verify_spike(spec, profile, tolerance=args.tol)
    out = Path(args.out)
    rows = [list(r) for r in report.rows]
    header = ["t", "x", "u", "operator_value"]
    if args.mc:
        header += ["mc_estimate", "mc_se"]
        strat = profile.theta_strategy()
        checked = {}
        for t, x, u, _ in report.rows[: args.mc_cells]:
            key = (float(t), float(x), float(u))
            d, se, _tbl = spike_derivative_mc(
                spec,
                strat,
                key[0],
                key[1],
                key[2],
                eps_list=[0.04 * (spec.grid.T - key[0]), 0.02 * (spec.grid.T - key[0])],
                n_paths=args.paths,
                seed=_resolve_seed(args, config),
                workers=args.workers,
            )
            checked[key] = (d, se)
        rows = [
            list(r) + list(checked.get((float(r[0]), float(r[1]), float(r[2])), ("", "")))
            for r in report.rows
        ]
    write_csv(out, header, rows)
    outputs = [str(out)]
    if not args.no_plot:
        fig = figure_path(out)
        render_verification_figure(report, fig)
        outputs.append(str(fig))
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        command="verify",
        config=config,
        seed=_resolve_seed(args, config),
        outputs=outputs,
        started_at=started,
        extra={
            "passed": report.passed,
            "max_operator_value": report.max_value,
            "tolerance": report.tolerance,
        },
    )
    if report.passed:
        print(f"verification passed: max operator value {report.max_value:.3e}")
        return EXIT_OK
    print(
        f"verification FAILED: max operator value {report.max_value:.6e} "
        f"> tol {args.tol:.1e}",
        file=sys.stderr,
    )
    return EXIT_VERIFY_FAILED


def cmd_iterate(args) -> int:
    started = utcnow()
    config = _load_config(args.config)
    spec = make_problem(config)
    theta0 = WealthIndependent.constant(args.theta0)
    profile, trace = policy_iteration(
        spec, theta0, max_iter=args.max_iter, tol=args.tol
    )
    for k, change in enumerate(trace, start=1):
        print(f"iter {k:3d}: sup|dtheta| = {change:.3e}")
    out = Path(args.out)
    outputs = _emit_profile(
        profile,
        out,
        plot=not args.no_plot,
        command="iterate",
        config=config,
        seed=_resolve_seed(args, config),
        started_at=started,
        manifest_extra={
            "iterations": profile.diagnostics["iterations"],
            "converged": profile.diagnostics["converged"],
        },
    )
    if not args.no_plot and trace:
        tr = figure_path(out.with_name(out.stem + "_trace" + out.suffix))
        render_trace_figure(trace, tr)
        outputs.append(str(tr))
    if not profile.diagnostics["converged"]:
        print("warning: max_iter exceeded; returning best iterate", file=sys.stderr)
    return EXIT_OK


def _strategy_for_run(args, spec):
    if args.theta is not None:
        return WealthIndependent.constant(args.theta), f"constant theta={args.theta}"
    if args.profile is not None:
        theta = EquilibriumProfile.theta_from_csv(args.profile)
        return (
            WealthIndependent.from_nodes(spec.grid, theta),
            f"profile {args.profile}",
        )
    profile = solve_equilibrium(spec)
    return profile.theta_strategy(), "solved equilibrium"


def cmd_simulate(args) -> int:
    started = utcnow()
    config = _load_config(args.config)
    spec = make_problem(config)
    seed = _resolve_seed(args, config)
    strategy, origin = _strategy_for_run(args, spec)
    t = args.t if args.t is not None else spec.grid.t0
    if args.x is not None:
        x = args.x
    else:
        x = spec.market.floor_x + 1.0 if spec.family is Family.MEAN_ES else 1.0
    est, se = estimate_J(spec, strategy, t, x, args.paths, seed,
                         workers=args.workers)
    batch = simulate(spec.dynamics(), strategy, t, x, spec.grid, args.paths, seed)
    out = Path(args.out)
    batch.terminal.to_csv(out)
    outputs = [str(out)]
    if not args.no_plot:
        fig = figure_path(out)
        render_samples_figure(batch.samples, est, se, fig)
        outputs.append(str(fig))
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        command="simulate",
        config=config,
        seed=seed,
        outputs=outputs,
        started_at=started,
        extra={
            "strategy": origin,
            "t": t,
            "x": x,
            "J_estimate": est,
            "J_bootstrap_se": se,
            "scheme": batch.scheme,
        },
    )
    print(f"J({t:.4g}, {x:.4g}) = {est:.10g}  (bootstrap se {se:.3g}, "
          f"95% CI [{est - 1.96 * se:.10g}, {est + 1.96 * se:.10g}])")
    return EXIT_OK


def cmd_diagnostics(args) -> int:
    started = utcnow()
    config = _load_config(args.config)
    spec = make_problem(config)
    seed = _resolve_seed(args, config)
    strategy, origin = _strategy_for_run(args, spec)
    from .measures import EmpiricalMeasure

    if args.x is not None:
        x = args.x
    else:
        x = spec.market.floor_x + 1.0 if spec.family is Family.MEAN_ES else 1.0
    mu0 = EmpiricalMeasure.from_samples([x])
    report = flow_diagnostics(
        spec.dynamics(), strategy, mu0, spec.grid, n_paths=args.paths, seed=seed
    )
    report["strategy"] = origin
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    outputs = [str(out)]
    if not args.no_plot:
        fig = out.with_suffix(".png")
        render_diagnostics_figure(report, fig)
        outputs.append(str(fig))
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        command="diagnostics",
        config=config,
        seed=seed,
        outputs=outputs,
        started_at=started,
    )
    print(json.dumps({k: report[k] for k in ("holder_half_ratio",
                                             "lipschitz_in_law_ratio",
                                             "flow_property_w2_defect")}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emeq",
        description="Equilibrium strategies for distribution-dependent rewards",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out):
        p.add_argument("--config", required=True, help="JSON problem configuration")
        p.add_argument("--out", default=default_out, help="output path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="worker threads for independent sub-tasks "
                            "(results are worker-count invariant)")
        p.add_argument("--no-plot", action="store_true",
                       help="skip the figure next to the delimited output")

    p = sub.add_parser("solve", help="solve the equilibrium ODE / fixed point")
    common(p, "profile.csv")
    p.add_argument("--mode", default="auto", choices=["auto", "backward", "shooting"],
                   help="RDUT Lambda-equation branch selection")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="spike-variation verification of a profile")
    common(p, "verification.csv")
    p.add_argument("--profile", required=True, help="profile CSV to verify")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--mc", action="store_true",
                   help="add Monte Carlo spike cross-check columns")
    p.add_argument("--mc-cells", type=int, default=4)
    p.add_argument("--paths", type=int, default=20_000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("iterate", help="policy iteration to the equilibrium")
    common(p, "iterate_profile.csv")
    p.add_argument("--theta0", type=float, default=0.0)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("simulate", help="terminal law and reward estimate")
    common(p, "samples.csv")
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--x", type=float, default=None)
    p.add_argument("--theta", type=float, default=None,
                   help="constant strategy instead of the solved equilibrium")
    p.add_argument("--profile", default=None, help="strategy from a profile CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnostics", help="flow-map diagnostics report")
    common(p, "diagnostics.json")
    p.add_argument("--paths", type=int, default=20_000)
    p.add_argument("--x", type=float, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--profile", default=None)
    p.set_defaults(func=cmd_diagnostics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NoEquilibriumOfThisForm as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NO_EQUILIBRIUM
    except (SchemaError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EmeqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
