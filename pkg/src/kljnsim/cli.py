"""Command-line entry point: ``kljnsim run|validate|plots|list-presets``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ._validation import ConfigError, IntegrationError
from .runner import RunError, emit_plots, list_presets, load_scenario, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser():
    p = argparse.ArgumentParser(prog="kljnsim",
                                description="KLJN loop simulator and attack harness")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write reports")
    run.add_argument("--scenario", required=True, help="preset name or path to a .toml file")
    run.add_argument("--trials", type=int, help="override the number of secure bits")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--out", type=Path, help="output directory (default runs/<name>)")
    run.add_argument("--threads", type=int, default=1, help="worker threads (results unchanged)")
    run.add_argument("--plots", action="store_true", help="also emit plot data")

    val = sub.add_parser("validate", help="check a scenario without running it")
    val.add_argument("--scenario", required=True)

    plots = sub.add_parser("plots", help="emit plot data from an existing report directory")
    plots.add_argument("--out", type=Path, required=True)

    sub.add_parser("list-presets", help="list bundled scenarios")
    return p


def _print_config_error(exc):
    print("configuration error:", file=sys.stderr)
    for key, msg, hint in exc.diagnostics:
        line = f"  {key}: {msg}"
        if hint:
            line += f"  [hint: {hint}]"
        print(line, file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list-presets":
            for name in list_presets():
                print(name)
            return EXIT_OK
        if args.command == "plots":
            for path in emit_plots(args.out):
                print(path)
            return EXIT_OK
        sc = load_scenario(args.scenario)
        if args.command == "validate":
            print(f"{sc.name}: ok")
            for w in sc.warnings:
                print(f"  warning: {w}")
            return EXIT_OK
        if args.trials is not None or args.seed is not None:
            sc = sc.with_overrides(trials=args.trials, master_seed=args.seed)
        if args.threads < 1:
            raise ConfigError([("--threads", "must be >= 1", "")])
        out = args.out or Path("runs") / sc.name
        summary = run_scenario(sc, out, threads=args.threads)
        for point in summary["points"]:
            for name, r in sorted(point["reports"].items()):
                print(f"{point['label']:<32} {name:<16} p={r['p_hat']:.4f} "
                      f"[{r['ci_low']:.4f}, {r['ci_high']:.4f}] leak={r['leak']:.3g}")
            for name, c in sorted(point["checks"].items()):
                print(f"{point['label']:<32} check {name:<10} passed={c.get('passed')}")
        if args.plots:
            emit_plots(out)
        print(f"reports written to {out}")
        return EXIT_OK
    except ConfigError as exc:
        _print_config_error(exc)
        return EXIT_CONFIG
    except (RunError, IntegrationError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
