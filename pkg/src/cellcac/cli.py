"""Command line entry point: ``cellcac {solve,simulate,compare,verify}``.

Exit codes: 0 success, 1 I/O or other failure, 2 config error, 3 solver
non-convergence, 4 simulation invariant violation.  Failures also print a
one-line JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import (CacError, ConfigError, ConvergenceError, InvariantViolation,
                     RecurrenceError)
from .experiments import compare_command, simulate_command, solve_command

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_SOLVER, EXIT_SIMULATION = 0, 1, 2, 3, 4


def _loads(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad load list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (INI)")
    common.add_argument("--seed", type=int, help="base seed (overrides simulation.seed)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--loads", type=_loads, help="comma-separated offered loads (BU-Erlangs)")
    common.add_argument("--replications", type=int)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cellcac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve policies and write policy files")
    sp = sub.add_parser("simulate", parents=[common], help="simulate a policy, write metrics.csv")
    sp.add_argument("--policy", default="mdp",
                    help="mdp, mdp:PATH, nag or accept-all (comma-separate several)")
    sub.add_parser("compare", parents=[common], help="MDP vs NAG utility comparison")
    sub.add_parser("verify", parents=[common], help="run invariant checks on the instance")
    return p


def _error(kind: str, exc: Exception, code: int) -> int:
    record = {"error": kind, "message": str(exc), "exit_code": code}
    field = getattr(exc, "field", None)
    if field:
        record["field"] = field
    if getattr(exc, "line", None):
        record["line"] = exc.line
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = args.out or cfg["output.dir"]
        if args.command == "solve":
            results = solve_command(cfg, out, args.loads, args.jobs)
            for load in sorted(results):
                r = results[load]
                print(f"load {load:g}: {r.iterations} iterations, c* = "
                      f"{', '.join(f'{c:.4f}' for c in r.calls)}, gain {r.policy.gain:.6g}")
        elif args.command == "simulate":
            sources = tuple(s.strip() for s in args.policy.split(",") if s.strip())
            path = simulate_command(cfg, out, sources, args.loads, args.replications,
                                    args.seed, args.jobs)
            print(path)
        elif args.command == "compare":
            path = compare_command(cfg, out, args.loads, args.replications, args.seed, args.jobs)
            print(path)
        else:
            from .verify import run_checks
            load = args.loads[0] if args.loads else None
            if args.seed is not None:
                cfg = cfg.replace(simulation__seed=args.seed)
            failed = 0
            for name, ok, detail in run_checks(cfg, load):
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
                failed += not ok
            if failed:
                return _error("verification", InvariantViolation(f"{failed} check(s) failed"),
                              EXIT_SIMULATION)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except (ConvergenceError, RecurrenceError) as exc:
        return _error("solver", exc, EXIT_SOLVER)
    except InvariantViolation as exc:
        return _error("simulation", exc, EXIT_SIMULATION)
    except (OSError, CacError, ValueError) as exc:
        return _error(type(exc).__name__, exc, EXIT_FAILURE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
