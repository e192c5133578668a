"""Command-line entry point: ``g2t <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bounds as bd
from .errors import AssumptionError, ConfigError, DomainError
from .experiment import ExperimentConfig, run_experiment, run_export, run_profile, run_select

log = logging.getLogger("g2t")


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    config = ExperimentConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed] + list(config.seeds[1:])
    if args.time_budget is not None:
        overrides["time_budget"] = args.time_budget
    if args.out is not None:
        overrides["out"] = args.out
    if overrides:
        config = ExperimentConfig(**{**config.__dict__, **overrides})
    return config


def _emit(args, name: str, text: str) -> None:
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    print(text, end="" if text.endswith("\n") else "\n")


def cmd_optimize(args) -> int:
    config = _load_config(args)
    if not config.out:
        raise ConfigError("an output directory is required (--out or 'out' in the config)")
    report = run_experiment(config)
    for run in report["runs"]:
        print(f"rate {run['learning_rate']:.3g}: mean final ELBO {run['mean_final_elbo']:.6g} "
              f"over {len(run['seeds'])} seeds, {run['total_steps']} steps")
    print(f"traces and summary.json written to {config.out}")
    return 0


def cmd_profile(args) -> int:
    report = run_profile(_load_config(args))
    _emit(args, "profile.json", json.dumps(report, indent=2))
    return 0


def cmd_select(args) -> int:
    report = run_select(_load_config(args))
    _emit(args, "selection.json", json.dumps(report, indent=2))
    return 0


def cmd_export(args) -> int:
    _emit(args, "selection.miqcp", run_export(_load_config(args)))
    return 0


def bounds_table(query: bd.BoundQuery, rows) -> list:
    lines = []
    for row in rows:
        try:
            value = bd.theta(query, row)
        except AssumptionError as exc:
            lines.append(f"{row.value:<10} not applicable ({exc})")
            continue
        try:
            step = bd.optimal_step_size(query, row).describe()
        except DomainError as exc:
            step = f"undefined ({exc})"
        lines.append(f"{row.value:<10} bound {value:.10g}  step {step}")
    return lines


def cmd_bounds(args) -> int:
    try:
        objective = bd.ObjectiveClass(args.lam, args.L, args.convex or args.lam > 0)
        query = bd.BoundQuery(objective, args.K, args.g2, args.beta, args.df, args.dw)
        rows = [bd.Row.parse(r) for r in args.rows.split(",")] if args.rows else list(bd.Row)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    print("\n".join(bounds_table(query, rows)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2t", description="G^2 T estimator selection for SGVI")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, help="override the first seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--time-budget", type=float, help="seconds per (rate, seed)")

    for name, fn, text in (("optimize", cmd_optimize, "run the experiment and write traces"),
                           ("profile", cmd_profile, "measure estimator costs"),
                           ("select", cmd_select, "run one selection after the warm start"),
                           ("export-miqcp", cmd_export, "write the selection problem as a MIQCP")):
        p = sub.add_parser(name, help=text)
        run_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("bounds", help="evaluate the convergence guarantees")
    p.add_argument("--lam", type=float, default=0.0, help="strong-convexity modulus")
    p.add_argument("--L", type=float, default=None, help="smoothness constant")
    p.add_argument("--convex", action="store_true")
    p.add_argument("--K", type=int, required=True, help="iterations")
    p.add_argument("--g2", type=float, required=True, help="squared-norm bound G^2")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--df", type=float, default=0.0, help="F(w_0) - F*")
    p.add_argument("--dw", type=float, default=0.0, help="distance bound on the iterates")
    p.add_argument("--rows", help="comma-separated subset of " + ",".join(r.value for r in bd.Row))
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
