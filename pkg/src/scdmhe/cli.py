"""Command-line front end.

Subcommands:

* ``run``    Monte Carlo benchmark; writes summary.csv plus per-trial
             trajectory and diagnostic CSVs.
* ``trial``  single trial with full trajectory export.
* ``check``  invariant suite on the constant-coefficient model.

Exit codes: 0 success, 1 run-level error (including failed checks),
2 configuration error.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config, with_updates
from .exceptions import ConfigError, ScdMheError
from .harness import (
    SummaryTable,
    export_run,
    run_linear_check,
    run_monte_carlo,
    run_trial,
    write_diagnostics,
    write_summary,
    write_trajectories,
)


def _add_common(parser):
    parser.add_argument("--config", help="path to a key-value config file")
    parser.add_argument("--out", default="out", help="output directory for CSV files")
    parser.add_argument("--seed", type=int, help="base seed (64-bit)")
    parser.add_argument("--trials", type=int, help="number of Monte Carlo trials")
    parser.add_argument("--estimators",
                        help="comma-separated subset of ekf,ukf,nmhe,scdmhe")
    parser.add_argument("--horizon", type=int, help="window length")
    parser.add_argument("--workers", type=int, help="parallel trial workers")


def build_parser():
    parser = argparse.ArgumentParser(prog="scdmhe",
                                     description="window-estimator benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="Monte Carlo benchmark")
    _add_common(p_run)
    p_trial = sub.add_parser("trial", help="single trial with trajectory export")
    _add_common(p_trial)
    p_trial.add_argument("--trial-index", type=int, default=0,
                         help="trial index (sets the per-trial seed)")
    p_check = sub.add_parser("check", help="linear-model invariant suite")
    p_check.add_argument("--config", help="path to a key-value config file")
    p_check.add_argument("--seed", type=int, help="base seed (64-bit)")
    return parser


def _config_from_args(args):
    estimators = None
    if getattr(args, "estimators", None):
        estimators = tuple(tok.strip().lower()
                           for tok in args.estimators.split(",") if tok.strip())
    cfg = load_config(
        args.config,
        seed=getattr(args, "seed", None),
        trials=getattr(args, "trials", None),
        estimators=estimators,
        horizon=getattr(args, "horizon", None),
        workers=getattr(args, "workers", None),
    )
    return cfg


def _print_summary(summary: SummaryTable):
    print(f"{'estimator':>10} {'rmse_z_m':>12} {'rmse_zdot_mps':>14} {'mean_step_ms':>13}")
    for name in summary.estimators:
        r = summary.rmse[name]
        print(f"{name:>10} {r[0]:12.4f} {r[1]:14.4f} {summary.mean_step_ms[name]:13.4f}")
    if summary.failed_trials:
        print(f"failed trials: {summary.failed_trials}/{summary.n_trials}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check":
            cfg = load_config(args.config, seed=args.seed)
            checks = run_linear_check(cfg)
            ok = True
            for name, passed, detail in checks:
                print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
                ok = ok and passed
            return 0 if ok else 1
        cfg = _config_from_args(args)
        if args.command == "run":
            summary, results = run_monte_carlo(cfg)
            export_run(args.out, cfg, summary, results)
            _print_summary(summary)
            print(f"wrote {args.out}/summary.csv and {len(results)} trial exports")
            return 0
        # single trial
        cfg = with_updates(cfg, trials=1)
        result = run_trial(cfg, args.trial_index)
        if result.failures:
            print(f"trial failed: {result.failures}", file=sys.stderr)
            return 1
        import os

        os.makedirs(args.out, exist_ok=True)
        write_trajectories(
            os.path.join(args.out, f"trajectories_{args.trial_index}.csv"), result, cfg)
        write_diagnostics(
            os.path.join(args.out, f"diagnostics_{args.trial_index}.csv"), result, cfg)
        for name in cfg.enabled:
            r = result.rmse[name]
            print(f"{name:>10} rmse_z={r[0]:.4f} rmse_zdot={r[1]:.4f}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ScdMheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
