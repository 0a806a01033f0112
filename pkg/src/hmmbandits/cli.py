"""Command-line surface.

Subcommands: ``simulate`` (full policy x horizon x seed grid), ``estimate``
(spectral estimation error curves), ``check-lemmas`` (randomized invariant
suite), ``fit-rate`` (log-log slope over existing summaries), and
``print-config-schema``.

Exit codes: 0 success, 1 usage error, 2 configuration/validation failure,
3 numerical failure.  The ``LBL_SEED`` environment variable overrides the
configured master seed; ``--seed`` overrides both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import CONFIG_SCHEMA, ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, HmmBanditsError, InsufficientData
from .evaluation import fit_rate, run_lemma_trials
from .runner import estimation_curves, run_experiment, write_estimation_csv

COMMANDS = ("simulate", "estimate", "check-lemmas", "fit-rate", "print-config-schema")


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--emit-oracle-columns", action="store_true")
    parser.add_argument("--exact-refilter", action="store_true")
    parser.add_argument("--plugin-gamma", action="store_true")
    parser.add_argument("--bonus-scope", choices=("full", "partial"), default=None)


def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    master_seed = args.seed
    if master_seed is None and "LBL_SEED" in os.environ:
        master_seed = int(os.environ["LBL_SEED"])
    return apply_overrides(
        config,
        out=args.out,
        workers=args.workers,
        master_seed=master_seed,
        emit_oracle_columns=args.emit_oracle_columns,
        exact_refilter=args.exact_refilter,
        plugin_gamma=args.plugin_gamma,
        bonus_scope=args.bonus_scope,
    )


def _cmd_simulate(args) -> int:
    config = _load(args)
    return run_experiment(config)


def _cmd_estimate(args) -> int:
    config = _load(args)
    os.makedirs(config.run.out, exist_ok=True)
    rows = estimation_curves(config)
    write_estimation_csv(rows, os.path.join(config.run.out, "estimation_curves.csv"))
    return 0


def _cmd_check_lemmas(args) -> int:
    results = run_lemma_trials(args.trials, seed=args.seed or 0)
    trials = results.pop("trials")
    all_pass = True
    for name, passed in results.items():
        status = "ok" if passed == trials else "FAIL"
        print(f"{name}: {passed}/{trials} {status}")
        all_pass &= passed == trials
    return 0 if all_pass else 3


def _cmd_fit_rate(args) -> int:
    groups: dict = {}
    for root, _, files in os.walk(args.results_dir):
        for fname in files:
            if fname != "summary.csv":
                continue
            with open(os.path.join(root, fname), "r", encoding="utf-8") as fh:
                header = fh.readline().strip().split(",")
                idx = {name: i for i, name in enumerate(header)}
                for line in fh:
                    parts = line.strip().split(",")
                    if len(parts) < 4:
                        continue
                    policy = parts[idx["policy"]]
                    T = int(parts[idx["T"]])
                    r_total = float(parts[idx["R_T"]])
                    groups.setdefault(policy, {}).setdefault(T, []).append(r_total)
    if not groups:
        print("no summary.csv found", file=sys.stderr)
        return 2
    report = {}
    for policy, by_horizon in sorted(groups.items()):
        try:
            fit = fit_rate(by_horizon)
        except InsufficientData as exc:
            report[policy] = {"error": str(exc)}
            continue
        report[policy] = {
            "slope": fit.slope,
            "slope_ci_90": list(fit.slope_ci),
            "horizons": list(fit.horizons),
            "mean_regrets": list(fit.final_regrets),
        }
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "rate_fit.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_usage())
        return 0 if argv else 1
    command = argv[0]
    if command not in COMMANDS:
        print(f"unknown subcommand '{command}'\n{_usage()}", file=sys.stderr)
        return 1

    parser = argparse.ArgumentParser(prog=f"hmmbandits {command}")
    if command in ("simulate", "estimate"):
        parser.add_argument("config", nargs="?", default=None,
                            help="INI experiment configuration")
        parser.add_argument("--config", dest="config_flag", default=None,
                            help="alternative way to pass the configuration")
        _add_common_flags(parser)
    elif command == "check-lemmas":
        parser.add_argument("--trials", type=int, default=1000)
        parser.add_argument("--seed", type=int, default=None)
    elif command == "fit-rate":
        parser.add_argument("results_dir")
        parser.add_argument("--out", default=None)
    try:
        args = parser.parse_args(argv[1:])
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0

    if command in ("simulate", "estimate"):
        if args.config_flag is not None:
            args.config = args.config_flag
        if args.config is None:
            print(f"{command}: a configuration file is required", file=sys.stderr)
            return 1

    try:
        if command == "simulate":
            return _cmd_simulate(args)
        if command == "estimate":
            return _cmd_estimate(args)
        if command == "check-lemmas":
            return _cmd_check_lemmas(args)
        if command == "fit-rate":
            return _cmd_fit_rate(args)
        if command == "print-config-schema":
            print(CONFIG_SCHEMA)
            return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except HmmBanditsError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


def _usage() -> str:
    return (
        "usage: hmmbandits <command> [options]\n"
        "commands:\n"
        "  simulate <config>        run the policy x horizon x seed grid\n"
        "  estimate <config>        spectral estimation error curves\n"
        "  check-lemmas [--trials N]  randomized lemma-check suite\n"
        "  fit-rate <results-dir>   log-log regret slope from summaries\n"
        "  print-config-schema      documented configuration keys\n"
    )


if __name__ == "__main__":
    raise SystemExit(main())
