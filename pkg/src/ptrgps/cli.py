"""Command-line entry point.

Exit codes: 0 success, 1 run error, 2 usage error (bad flags, unreadable
config or input files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, data
from .config import ConfigError, RunConfig, dump_config, load_config
from .errors import FormatError, PtrGpsError
from .gps import gps_run
from .lqr import stream
from .policy import policy_rollout
from .vehicle import VehicleParams, landing_target

log = logging.getLogger("ptrgps")

STATE_COLUMNS = ["m", "rx", "ry", "rz", "vx", "vy", "vz",
                 "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
TEST_SET_KEY = 0x7E57


class UsageError(Exception):
    pass


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d("default"),
                        help="YAML config file, or 'default' for the built-in desk setup")
    parser.add_argument("--seed", type=int, default=d(0), help="master random seed")
    parser.add_argument("--out", default=d("."), help="output directory")
    parser.add_argument("--threads", type=int, default=d(1), help="worker processes")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptrgps",
        description="Guided policy search warm starts for 6-DoF powered-descent PTR.",
    )
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    sub.add_parser("make-grids", parents=[common], help="write the initial-state sets")
    sub.add_parser("train-gps", parents=[common], help="train a policy with guided policy search")
    sub.add_parser("train-imitation", parents=[common], help="train the imitation baseline")
    ev = sub.add_parser("evaluate", parents=[common], help="feasibility metrics of a policy")
    ev.add_argument("--weights", required=True)
    ev.add_argument("--set", dest="state_set", default="validation",
                    choices=("validation", "test"))
    bm = sub.add_parser("benchmark", parents=[common],
                        help="PTR iteration counts from straight-line and policy guesses")
    bm.add_argument("--weights", help="policy weights; without it only straight-line runs")
    ro = sub.add_parser("rollout", parents=[common], help="closed-loop policy rollout to CSV")
    ro.add_argument("--weights", required=True)
    ro.add_argument("--init-state", required=True, help="JSON file with a 14-entry state")
    ro.add_argument("--output", help="CSV path (default: OUT/rollout.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        print("ptrgps: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, UsageError) as exc:
        print(f"ptrgps: error: {exc}", file=sys.stderr)
        return 2
    except (PtrGpsError, OSError, ValueError) as exc:
        print(f"ptrgps: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# State sets
# ---------------------------------------------------------------------------


def training_states(cfg: RunConfig) -> list[np.ndarray]:
    return data.build_desk_grid() if cfg.scale == "desk" else data.build_training_grid()


def validation_states(cfg: RunConfig) -> list[np.ndarray]:
    return (data.build_desk_validation_grid() if cfg.scale == "desk"
            else data.build_validation_grid())


def test_states(cfg: RunConfig, seed: int) -> list[np.ndarray]:
    return data.sample_test_set(cfg.n_test, stream(seed, TEST_SET_KEY))


def _read_weights(path):
    if not Path(path).is_file():
        raise UsageError(f"weights file not found: {path}")
    try:
        return data.load_weights(path)
    except FormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_show_config(args, cfg: RunConfig, out: Path) -> None:
    sys.stdout.write(dump_config(cfg))


def cmd_make_grids(args, cfg: RunConfig, out: Path) -> None:
    data.save_states(out / "training_states.json", data.build_training_grid(), "training")
    data.save_states(out / "desk_training_states.json", data.build_desk_grid(), "desk-training")
    data.save_states(out / "validation_states.json", data.build_validation_grid(), "validation")
    data.save_states(out / "desk_validation_states.json", data.build_desk_validation_grid(),
                     "desk-validation")
    data.save_states(out / "test_states.json", test_states(cfg, args.seed), "test", args.seed)


def cmd_train_gps(args, cfg: RunConfig, out: Path) -> None:
    p = VehicleParams()
    target = landing_target(p)
    kept, _ = data.filter_convergent(training_states(cfg), cfg.ptr, target, cfg.gps.grid, p,
                                     args.threads)
    log.info("training on %d convergent states", len(kept))
    res = gps_run(kept, validation_states(cfg), target, cfg.gps, p, seed=args.seed,
                  threads=args.threads, checkpoint_dir=out / "checkpoints")
    data.save_weights(out / "policy.json", res.mlp, res.normalizer)
    res.log.write_csv(out / "gps_log.csv")
    print(f"GPS stopped by {res.log.stopped_by} after {len(res.log.entries)} iterations; "
          f"{len(kept)} training states, {len(res.log.dropped)} dropped")


def cmd_train_imitation(args, cfg: RunConfig, out: Path) -> None:
    p = VehicleParams()
    res = bench.imitation_baseline(
        training_states(cfg), validation_states(cfg), landing_target(p), cfg.gps, cfg.ptr,
        cfg.imitation, p, seed=args.seed, threads=args.threads,
    )
    data.save_weights(out / "imitation.json", res.mlp, res.normalizer)
    data.write_metrics_csv(out / "imitation_epochs.csv", [
        {"epoch": e, "validation_objective": v} for e, v in enumerate(res.epoch_objectives)
    ])
    print(f"imitation: best epoch {res.best_epoch}, {res.n_converged} converged trajectories")


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> None:
    mlp, norm = _read_weights(args.weights)
    p = VehicleParams()
    states = validation_states(cfg) if args.state_set == "validation" else test_states(cfg, args.seed)
    report, rows = bench.feasibility_report(mlp, norm, states, cfg.gps.grid, p, landing_target(p))
    (out / "feasibility.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    data.write_metrics_csv(out / "feasibility_runs.csv", [
        {"state": i, "failed": r is None, **(r or {})} for i, r in enumerate(rows)
    ])
    print(_feasibility_table(report))


def cmd_benchmark(args, cfg: RunConfig, out: Path) -> None:
    p = VehicleParams()
    states = test_states(cfg, args.seed)
    grid, target = cfg.gps.grid, landing_target(p)
    inits = [("straight-line", None, None)]
    if args.weights:
        inits.insert(0, ("policy", *_read_weights(args.weights)))
    reports, all_rows = [], []
    for name, mlp, norm in inits:
        rep, rows = bench.init_benchmark(name, states, cfg.sweep, target, grid, p, mlp, norm,
                                         args.threads)
        reports.append(rep)
        all_rows.extend(rows)
    doc = {"seed": args.seed, "n_test": len(states), "n_cells": len(cfg.sweep.cells()),
           "reports": [r.as_dict() for r in reports]}
    (out / "benchmark.json").write_text(json.dumps(doc, indent=2) + "\n")
    data.write_metrics_csv(out / "benchmark_runs.csv", all_rows)
    summary = _benchmark_table(reports)
    (out / "benchmark_summary.txt").write_text(summary + "\n")
    print(summary)


def cmd_rollout(args, cfg: RunConfig, out: Path) -> None:
    mlp, norm = _read_weights(args.weights)
    try:
        states = data.load_states(args.init_state)
    except (OSError, FormatError) as exc:
        raise UsageError(f"{args.init_state}: {exc}") from exc
    if len(states) != 1:
        raise UsageError(f"{args.init_state}: expected exactly one state")
    grid = cfg.gps.grid
    traj = policy_rollout(mlp, norm, states[0], grid, VehicleParams())
    path = Path(args.output) if args.output else out / "rollout.csv"
    write_trajectory_csv(path, grid.nodes, traj.x, traj.u)
    print(f"wrote {grid.K} nodes to {path}")


def write_trajectory_csv(path, t, x, u) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", *STATE_COLUMNS, "Tx", "Ty", "Tz"])
        for k in range(len(x)):
            ctrl = [repr(float(v)) for v in u[k]] if k < len(u) else ["", "", ""]
            w.writerow([k, repr(float(t[k])), *(repr(float(v)) for v in x[k]), *ctrl])


def _feasibility_table(r: bench.FeasibilityReport) -> str:
    lines = [
        f"{'cost':<28}{r.cost:12.4f}",
        f"{'mean max violation':<28}{r.max_violation:12.4f}",
        f"{'position error':<28}{r.position_error:12.4f}",
        f"{'velocity error':<28}{r.velocity_error:12.4f}",
        f"{'attitude error [deg]':<28}{r.attitude_error_deg:12.4f}",
        f"{'rate error [deg/U_T]':<28}{r.rate_error_deg:12.4f}",
        f"{'failed rollouts':<28}{r.n_failures:>8d} / {r.n_states}",
    ]
    return "\n".join(lines)


def _benchmark_table(reports: list[bench.InitBenchmarkReport]) -> str:
    head = f"{'initializer':<16}{'success':>10}{'mean':>8}{'median':>8}{'std':>8}"
    rows = [
        f"{r.initializer:<16}{f'{r.successes}/{r.n_states}':>10}"
        f"{r.mean:8.2f}{r.median:8.1f}{r.std:8.2f}"
        for r in reports
    ]
    return "\n".join([head, *rows])


COMMANDS = {
    "show-config": cmd_show_config,
    "make-grids": cmd_make_grids,
    "train-gps": cmd_train_gps,
    "train-imitation": cmd_train_imitation,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "rollout": cmd_rollout,
}


if __name__ == "__main__":
    sys.exit(main())
