"""Command-line front end: run, ablate, and validate scenarios.

``slungmpc run`` executes one closed-loop run and writes the trajectory log,
the metrics summary, and the report figures into the output directory.
``slungmpc ablate`` runs the arm matrix over the shared seeded trials.
``slungmpc validate`` checks a scenario file without running it.

Exit codes: 0 success, 1 configuration error, 2 safety violation, 3 solver
failure streak, 4 run finished without meeting the success criteria.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import runtime
from .bench import (
    ScenarioConfig,
    ablation_dict,
    default_arms,
    format_table,
    parse_arm,
    run_ablation,
    run_trial,
)
from .config import ConfigError, load_scenario
from .report import render_report
from .sim import FALLBACK_HOLD_TICKS, STATUS_NONE, STATUS_OPTIMAL

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VIOLATION = 2
EXIT_SOLVER = 3
EXIT_NO_SUCCESS = 4


def _sig6(value):
    """Round floats to 6 significant digits, recursively through containers."""
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.6g}")
    if isinstance(value, dict):
        return {k: _sig6(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_sig6(v) for v in value]
    return value


def _format_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_trajectory_csv(log, path: Path) -> None:
    """Full round-trip precision so readers recover the log exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(log.column_names())
        for row in log.rows():
            writer.writerow([_format_cell(v) for v in row])


def _write_json(payload: dict, path: Path) -> None:
    # A fixed key order and separator set keeps equal runs byte-identical.
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _max_bad_streak(status: list[str]) -> int:
    worst = streak = 0
    for s in status:
        streak = streak + 1 if s not in (STATUS_OPTIMAL, STATUS_NONE) else 0
        worst = max(worst, streak)
    return worst


def _load(args) -> ScenarioConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"sim.seed={args.seed}")
    if args.trials is not None:
        overrides.append(f"sim.trials={args.trials}")
    return load_scenario(args.scenario, overrides=overrides)


def cmd_run(args) -> int:
    scenario = _load(args)
    arms = [parse_arm(name) for name in (args.arm or ["SepNmpc"])]
    if len(arms) != 1:
        raise ConfigError("arm", "run takes exactly one arm")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    metrics, log = run_trial(arms[0], scenario)
    write_trajectory_csv(log, out_dir / "trajectory.csv")
    _write_json(_sig6(metrics.as_dict()), out_dir / "metrics.json")
    render_report(log, scenario, out_dir)

    print(f"{scenario.name} [{arms[0].name}]: "
          f"success={metrics.success} violations={metrics.violations} "
          f"final_error={metrics.final_goal_error:.4f} m "
          f"solve median={metrics.solve_median_ms:.2f} ms")
    print(f"wrote {out_dir / 'trajectory.csv'}")

    if metrics.violations > 0:
        return EXIT_VIOLATION
    if not log.valid or _max_bad_streak(log.status) > FALLBACK_HOLD_TICKS:
        return EXIT_SOLVER
    return EXIT_OK if metrics.success else EXIT_NO_SUCCESS


def cmd_ablate(args) -> int:
    scenario = _load(args)
    arms = ([parse_arm(name) for name in args.arm] if args.arm
            else default_arms())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = run_ablation(scenario, arms=arms)
    _write_json(ablation_dict(results), out_dir / "ablation.json")
    # Timing lives in its own file: wall-clock numbers vary run to run and
    # would break the byte-identical determinism of the counter summary.
    timing = {r.arm.name: {"solve_median_ms": _sig6(r.solve_median_ms),
                           "solve_max_ms": _sig6(r.solve_max_ms)}
              for r in results}
    _write_json(timing, out_dir / "timing.json")
    table = format_table(results)
    (out_dir / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario = _load(args)
    print(f"{scenario.name}: OK "
          f"({len(scenario.waypoints)} waypoints, "
          f"{len(scenario.obstacles)} obstacles, "
          f"{scenario.sim.duration:.1f} s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slungmpc",
        description="Passivity- and barrier-constrained NMPC runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in (("run", cmd_run), ("ablate", cmd_ablate),
                          ("validate", cmd_validate)):
        p = sub.add_parser(name)
        p.add_argument("scenario",
                       help="shipped scenario name or path to a scenario file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--arm", action="append", default=None,
                       help="controller arm; repeatable for ablate")
        p.add_argument("--set", action="append", default=None, metavar="KEY=VALUE",
                       help="dotted scenario override, e.g. sim.duration=5.0")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    runtime.limit_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
