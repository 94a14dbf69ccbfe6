"""Command-line entry point: run experiments, write CSV, report acceptance.

Every subcommand writes ``<experiment>.csv`` (config in ``#`` header
comments, flat metric rows) plus ``acceptance.csv`` into the output
directory and exits 0 exactly when all acceptance checks of the invoked
experiment(s) pass.  Identical (arguments, seed) invocations produce
byte-identical files.
"""

import argparse
import os
import sys

from . import experiments as ex

CSV_COLUMNS = ("experiment", "setting", "method", "T", "replicates",
               "metric", "value", "stderr")


def _fmt(value):
    if isinstance(value, float):
        if value != value:
            return ""
        return f"{value:.12g}"
    return str(value)


def write_rows_csv(path, config, rows):
    lines = [f"# {key} = {config[key]}" for key in config]
    lines.append(",".join(CSV_COLUMNS))
    for row in rows:
        lines.append(",".join(_fmt(row[col]) for col in CSV_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_acceptance_csv(path, checks):
    lines = ["check,expected,measured,tolerance,pass"]
    for c in checks:
        lines.append(",".join([
            c.name, c.expected.replace(",", ";"), f"{c.measured:.12g}",
            f"{c.tolerance:.12g}", "true" if c.passed else "false"]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run_one(name, args, out_dir):
    config, rows, checks = ex.EXPERIMENTS[name](
        args.seed, quick=args.quick, replicates=args.replicates,
        workers=args.workers)
    write_rows_csv(os.path.join(out_dir, name.replace("-", "_") + ".csv"),
                   config, rows)
    return checks


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eqtrack",
        description="Equilibrium-tracking experiment harness")
    parser.add_argument("--seed", type=int, default=123,
                        help="base seed for all replicate streams")
    parser.add_argument("--out-dir", default=".",
                        help="directory for CSV outputs")
    parser.add_argument("--replicates", type=int, default=None,
                        help="override the per-experiment replicate count")
    parser.add_argument("--quick", action="store_true",
                        help="reduced grids and replicates, tolerances x2")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel workers for independent settings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ex.EXPERIMENTS:
        sub.add_parser(name, help=f"run the {name} experiment")
    sub.add_parser("run-all", help="run every experiment and summarize")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    names = list(ex.EXPERIMENTS) if args.command == "run-all" else [args.command]
    checks = []
    for name in names:
        checks.extend(run_one(name, args, out_dir))
    write_acceptance_csv(os.path.join(out_dir, "acceptance.csv"), checks)
    n_fail = sum(not c.passed for c in checks)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: measured {c.measured:.6g} "
              f"(expected {c.expected}, tolerance {c.tolerance:g})")
    print(f"{len(checks) - n_fail}/{len(checks)} acceptance checks passed")
    return 0 if n_fail == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
