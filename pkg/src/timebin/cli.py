"""``timebin`` command line.

Exit codes: 0 success, 2 invalid configuration, 1 failure during the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from pydantic import ValidationError

from timebin.analysis import AnalysisError
from timebin.eventsim import ConfigError, SimConfig
from timebin.experiments import (
    ExperimentRecipe,
    lock_config_from,
    run_bell,
    run_histogram,
    run_lhv,
    run_lock,
    run_scan,
)
from timebin.lhv import StrategyError
from timebin.lock import LockError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def _recipe_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON recipe file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--scheme", choices=["I", "II", "III"])
    p.add_argument("--visibility", type=float)
    p.add_argument("--window-ns", type=float)
    p.add_argument("--mode", choices=["central_only", "all_slots", "same_slot"])
    p.add_argument("--override-policy", action="store_true",
                   help="allow a window or mode that differs from the scheme default")
    p.add_argument("--duration-s", type=float, help="acquisition time per setting")
    p.add_argument("--pair-prob", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--dump-tags", action="store_true")
    p.add_argument("--tag-encoding", choices=["binary", "csv"])
    p.add_argument("--out", type=str)


def build_recipe(args) -> ExperimentRecipe:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    sim = dict(data.get("sim") or {})
    for key, value in (("seed", args.seed), ("duration", args.duration_s),
                       ("pair_prob", args.pair_prob)):
        if value is not None:
            sim[key] = value
    if sim:
        data["sim"] = sim
    overrides = {
        "scheme": args.scheme,
        "visibility": args.visibility,
        "window": None if args.window_ns is None else args.window_ns * 1e-9,
        "mode": args.mode,
        "workers": args.workers,
        "tag_encoding": args.tag_encoding,
        "output_dir": args.out,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.override_policy:
        data["allow_policy_override"] = True
    if args.dump_tags:
        data["dump_tags"] = True
    return ExperimentRecipe.model_validate(data)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timebin", description="Time-bin Bell test simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    bell = sub.add_parser("bell", help="four-setting CHSH run")
    _recipe_args(bell)

    scan = sub.add_parser("scan", help="coincidence fringe scan and visibility fit")
    _recipe_args(scan)
    scan.add_argument("--party", choices=["A", "B"], default="B")
    scan.add_argument("--start", type=float, default=0.0)
    scan.add_argument("--stop", type=float, default=2 * math.pi)
    scan.add_argument("--steps", type=int)

    hist = sub.add_parser("histogram", help="per-detector arrival-time histograms")
    _recipe_args(hist)
    hist.add_argument("--bin-ps", type=float, default=81.0)

    lock = sub.add_parser("lock", help="closed-loop switch-phase lock")
    lock.add_argument("--drift", choices=["none", "random_walk", "sinusoidal", "step"],
                      default="random_walk")
    lock.add_argument("--magnitude", type=float, default=0.1)
    lock.add_argument("--time-constant", type=float, default=30.0)
    lock.add_argument("--duration-s", type=float, default=600.0)
    lock.add_argument("--seed", type=int, default=0)
    lock.add_argument("--kp", type=float, default=0.5)
    lock.add_argument("--ki", type=float, default=0.1)
    lock.add_argument("--kd", type=float, default=0.0)
    lock.add_argument("--threshold", type=float, default=0.05, help="lock-loss threshold, rad")
    lock.add_argument("--poisson", action="store_true",
                      help="draw counts from a Poisson model instead of the event simulator")
    lock.add_argument("--out", type=str, default="runs/lock")

    lhv = sub.add_parser("lhv", help="local hidden-variable attack")
    lhv.add_argument("--optimize", action="store_true")
    lhv.add_argument("--n-lambda", type=int, default=2)
    lhv.add_argument("--restarts", type=int, default=10)
    lhv.add_argument("--seed", type=int, default=0)
    lhv.add_argument("--fit-visibility", type=float,
                     help="fit the quantum statistics at this visibility instead of maximizing S")
    lhv.add_argument("--simulate", action="store_true",
                     help="stream the strategy through the event pipeline")
    lhv.add_argument("--duration-s", type=float, default=0.1)
    lhv.add_argument("--pair-prob", type=float, default=0.01)
    lhv.add_argument("--out", type=str, default="runs/lhv")
    return parser


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<recipe>"
        lines.append(f"  {path}: {err['msg']}")
    return "invalid recipe:\n" + "\n".join(lines)


def _print_summary(out: Path) -> None:
    if (out / "summary.txt").exists():
        print((out / "summary.txt").read_text(), end="")


def _dispatch(args) -> dict:
    if args.command == "lock":
        drift, cfg = lock_config_from(args.drift, args.magnitude, args.time_constant,
                                      args.duration_s, args.seed, args.kp, args.ki, args.kd,
                                      use_events=not args.poisson)
        result = run_lock(args.out, drift, cfg, args.threshold)
        if not result["locked"]:
            print(f"LOCK LOST: steady-state residual {result['steady_state_rms_rad']:.3f} rad "
                  f"exceeds {args.threshold} rad")
        return result
    if args.command == "lhv":
        sim = None
        if args.simulate:
            sim = SimConfig(pair_prob=args.pair_prob, duration=args.duration_s, seed=args.seed)
        result = run_lhv(args.out, args.optimize, args.n_lambda, args.restarts, args.seed,
                         args.fit_visibility, sim)
        _print_summary(Path(args.out))
        return result
    recipe = build_recipe(args)
    if args.command == "bell":
        result = run_bell(recipe)
        _print_summary(Path(recipe.output_dir))
        return result
    if args.command == "scan":
        return run_scan(recipe, args.party, args.start, args.stop, args.steps)
    return run_histogram(recipe, args.bin_ps * 1e-12)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ValidationError as exc:
        print(_format_validation(exc), file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ConfigError, LockError, StrategyError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AnalysisError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
