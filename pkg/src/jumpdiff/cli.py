"""Command line: ``jumpdiff run | verify | plotdata``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpdiff", description="MLMC for elliptic problems with jump-diffusion coefficients.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="RMSE study for one preset, estimator and discretization",
                         epilog="Any problem parameter can be overridden with --key=value, e.g. --intensity=8.")
    run.add_argument("--config", help="flat key = value file (a previous run manifest works)")
    run.add_argument("--preset", choices=harness.PRESETS)
    run.add_argument("--estimator", choices=harness.estimators.ESTIMATORS)
    run.add_argument("--discretization", choices=harness.DISCRETIZATIONS)
    run.add_argument("--lmax", type=int)
    run.add_argument("--ref", type=int, help="reference level")
    run.add_argument("--reps", type=int, help="replications per level")
    run.add_argument("--seed", type=int, help="64-bit master seed")
    run.add_argument("--out", help="output directory (JUMPDIFF_OUT takes precedence)")
    run.add_argument("--threads", type=int, help="worker threads; 1 gives bit-stable results")
    run.add_argument("--verification", action="store_const", const="true",
                     help="single thread and zero wall times, so reruns give identical bytes")
    run.add_argument("--dump-coefficient", action="store_const", const="true")
    run.add_argument("--dump-mesh", action="store_const", const="true")
    run.add_argument("-v", "--verbose", action="store_true")

    ver = sub.add_parser("verify", help="run a verification suite")
    ver.add_argument("--suite", choices=tuple(harness.SUITES), default="unit")

    plot = sub.add_parser("plotdata", help="write log-log plot data from a results CSV")
    plot.add_argument("csv")
    return p


def _extra_overrides(extra: list[str]) -> dict:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise harness.ConfigError(item, "expected --key=value")
        key, value = item[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    return out


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    if args.command != "run" and extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "verify":
            return harness.run_verification(args.suite)
        if args.command == "plotdata":
            a, b = harness.emit_plotdata(args.csv)
            print(a)
            print(b)
            return 0
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        values = {}
        if args.config:
            values.update(harness.parse_config_text(open(args.config, encoding="utf-8").read()))
        for key in ("preset", "estimator", "discretization", "lmax", "ref", "reps", "seed", "out", "threads",
                    "verification", "dump_coefficient", "dump_mesh"):
            v = getattr(args, key)
            if v is not None:
                values[key] = v
        values.update(_extra_overrides(extra))
        cfg = harness.build_config(values)
    except harness.ConfigError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"jumpdiff: {exc}", file=sys.stderr)
        return 2
    res = harness.run_experiment(cfg, progress=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    print(res.csv_path)
    print(res.manifest_path)
    if res.slope is not None:
        print(f"fitted slope: {res.slope:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
