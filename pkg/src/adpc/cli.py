"""Command-line entry point for the three experiments.

Subcommands: openloop (scalar volume curves), feasibility (terminal
synthesis feasible fractions), track (closed-loop tracking comparison).
Exit codes: 0 success, 2 when an experiment's internal assertions fail
(constraint violations, tube breaches, membership violations), 3 on
configuration errors.
"""

import argparse
import json
import sys

from .exceptions import AdpcError, ConfigError
from .harness import (
    exp_feasibility,
    exp_scalar_volume,
    exp_tracking,
    feasibility_config,
    load_config,
    pool_size,
    scalar_config,
    tracking_config,
)

_DEFAULTS = {
    "openloop": scalar_config,
    "feasibility": feasibility_config,
    "track": tracking_config,
}


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file (defaults built in)")
    sub.add_argument("--seed", type=int, default=None, help="base seed")
    sub.add_argument("--trials", type=int, default=None, help="number of trials")
    sub.add_argument("--out", default=None, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adpc",
        description="Set-membership learning and tube predictive control experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("openloop", "scalar-plant volume-bound curves for the input designers"),
        ("feasibility", "terminal-synthesis feasible fractions vs data budget"),
        ("track", "closed-loop tracking comparison with event-triggered learning"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def _tracking_failures(summary):
    bad = 0
    for method in summary.get("methods", []):
        stats = summary[method]
        bad += stats["violations"] + stats["tube_breaches"]
        if stats["usable"] and stats["membership_min"] < -1e-8:
            bad += 1
    return bad


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else _DEFAULTS[args.command]()
        threads = pool_size()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    out = args.out or f"results_{args.command}"
    kwargs = {"trials": args.trials, "base_seed": args.seed, "threads": threads}
    try:
        if args.command == "openloop":
            summary = exp_scalar_volume(cfg, out, **kwargs)
            failures = 0
        elif args.command == "feasibility":
            summary = exp_feasibility(cfg, out, **kwargs)
            failures = 0
        else:
            summary = exp_tracking(cfg, out, **kwargs)
            failures = _tracking_failures(summary)
    except AdpcError as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 2
    del summary  # full copy lives in <out>/summary.json
    print(json.dumps({"out": out, "failures": failures}))
    return 2 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
