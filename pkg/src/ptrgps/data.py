"""Initial-state grids, convergence filtering and on-disk formats.

Formats
-------
Pair dataset (``.jsonl``): first line is a header
``{"format": "ptrgps-pairs", "version": 1}``, then one record per node pair::

    {"run": "gps", "i": 3, "s": 7, "k": 12, "x": [14 floats], "u": [3 floats]}

Policy weights (``.json``)::

    {"format": "ptrgps-mlp", "version": 1, "dims": [14, 50, 50, 50, 3],
     "normalizer": {"shift": [...], "scale": [...]},
     "weights": [[[row], ...], ...], "biases": [[...], ...]}

Weight matrices are row-major with shape (fan_out, fan_in). Floats are
written with ``repr`` so every value reads back bit-identically.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from pathlib import Path

import numpy as np

from .errors import FormatError
from .policy import Mlp, Normalizer, PairDataset
from .ptr import PtrConfig, PtrResult, ptr_solve
from .transcription import TemporalGrid, straight_line_init
from .vehicle import BoundaryConditions, VehicleParams, make_state, quat_from_euler

log = logging.getLogger(__name__)

PAIRS_FORMAT = "ptrgps-pairs"
MLP_FORMAT = "ptrgps-mlp"
FORMAT_VERSION = 1

M_WET = 2.0
V_Z0 = -1.0
POSITION_LEVELS = (2.0, 2.5, 3.0)
VELOCITY_LEVELS = (-0.1, 0.0, 0.1)
ANGLE_LEVELS_DEG = (-15.0, 0.0, 15.0)


def initial_state(rx, rz, vx=0.0, vy=0.0, roll_deg=0.0, pitch_deg=0.0) -> np.ndarray:
    q = quat_from_euler(np.deg2rad(roll_deg), np.deg2rad(pitch_deg), 0.0)
    return make_state(M_WET, [rx, 0.0, rz], [vx, vy, V_Z0], q, [0.0, 0.0, 0.0])


def build_training_grid() -> list[np.ndarray]:
    """Full 3^6 factorial over r_x, r_z, v_x, v_y, roll, pitch (729 states)."""
    return [
        initial_state(rx, rz, vx, vy, roll, pitch)
        for rx, rz, vx, vy, roll, pitch in itertools.product(
            POSITION_LEVELS, POSITION_LEVELS, VELOCITY_LEVELS, VELOCITY_LEVELS,
            ANGLE_LEVELS_DEG, ANGLE_LEVELS_DEG,
        )
    ]


def build_desk_grid() -> list[np.ndarray]:
    """27-state orthogonal fraction of the training grid.

    r_x, r_z and roll run over their full 3x3x3 factorial; pitch, v_x and v_y
    follow independent mod-3 combinations so every pair of factors is
    balanced.
    """
    states = []
    for a, b, c in itertools.product(range(3), repeat=3):
        states.append(initial_state(
            POSITION_LEVELS[a],
            POSITION_LEVELS[b],
            VELOCITY_LEVELS[(a + 2 * b + c) % 3],
            VELOCITY_LEVELS[(a + b + 2 * c) % 3],
            ANGLE_LEVELS_DEG[c],
            ANGLE_LEVELS_DEG[(a + b + c) % 3],
        ))
    return states


def build_validation_grid() -> list[np.ndarray]:
    """36 states: r_x, r_z in {2.25, 2.75}, roll and pitch on the training levels."""
    return [
        initial_state(rx, rz, 0.0, 0.0, roll, pitch)
        for rx, rz, roll, pitch in itertools.product(
            (2.25, 2.75), (2.25, 2.75), ANGLE_LEVELS_DEG, ANGLE_LEVELS_DEG
        )
    ]


def build_desk_validation_grid() -> list[np.ndarray]:
    """Eight validation states: the four positions, upright and tilted (15, -15)."""
    return [
        initial_state(rx, rz, 0.0, 0.0, roll, pitch)
        for rx, rz, (roll, pitch) in itertools.product(
            (2.25, 2.75), (2.25, 2.75), ((0.0, 0.0), (15.0, -15.0))
        )
    ]


def sample_test_set(n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform draws inside the training grid's bounding box."""
    if n < 1:
        raise ValueError("need at least one test state")
    draws = rng.uniform(
        [2.0, 2.0, -0.1, -0.1, -15.0, -15.0],
        [3.0, 3.0, 0.1, 0.1, 15.0, 15.0],
        size=(n, 6),
    )
    return [initial_state(*row) for row in draws]


def filter_convergent(
    states: list[np.ndarray],
    config: PtrConfig,
    bc_final: np.ndarray,
    grid: TemporalGrid,
    p: VehicleParams,
    threads: int = 1,
) -> tuple[list[np.ndarray], list[PtrResult]]:
    """Keep the states from which straight-line-initialized PTR converges."""
    jobs = [(x, config, bc_final, grid, p) for x in states]
    results = parallel_map(_ptr_from_straight_line, jobs, threads)
    kept = []
    for idx, (x, res) in enumerate(zip(states, results)):
        if res.converged:
            kept.append(x)
        else:
            log.info("excluding state %d: PTR %s after %d iterations", idx, res.status, res.iterations)
    return kept, results


def _ptr_from_straight_line(job) -> PtrResult:
    x, config, bc_final, grid, p = job
    bc = BoundaryConditions(x, bc_final)
    return ptr_solve(bc, grid, p, config, straight_line_init(bc, grid, p))


def parallel_map(fn, jobs, threads: int = 1) -> list:
    """Order-preserving map over a process pool (inline when threads <= 1)."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def save_dataset(path, dataset: PairDataset, run_id: str = "run") -> None:
    with Path(path).open("w") as fh:
        fh.write(json.dumps({"format": PAIRS_FORMAT, "version": FORMAT_VERSION}) + "\n")
        for row in range(len(dataset)):
            rec = {
                "run": run_id,
                "i": int(dataset.traj_id[row]),
                "s": int(dataset.sample_id[row]),
                "k": int(dataset.node[row]),
                "x": _floats(dataset.states[row]),
                "u": _floats(dataset.controls[row]),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> PairDataset:
    states, controls, ids = [], [], []
    with Path(path).open() as fh:
        header = _parse_line(fh.readline(), 1)
        _check_header(header, PAIRS_FORMAT, 1)
        for lineno, line in enumerate(fh, start=2):
            rec = _parse_line(line, lineno)
            try:
                x = [float(v) for v in rec["x"]]
                u = [float(v) for v in rec["u"]]
                key = (int(rec["i"]), int(rec["s"]), int(rec["k"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad record ({exc})", lineno) from exc
            if len(x) != 14 or len(u) != 3:
                raise FormatError("record needs 14 state and 3 control floats", lineno)
            states.append(x)
            controls.append(u)
            ids.append(key)
    ids = np.array(ids, dtype=np.int64).reshape(-1, 3)
    return PairDataset(
        np.array(states).reshape(-1, 14), np.array(controls).reshape(-1, 3),
        ids[:, 0], ids[:, 1], ids[:, 2],
    )


def _parse_line(line: str, lineno: int):
    if not line.endswith("\n") and line:
        raise FormatError("truncated record", lineno)
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON ({exc.msg})", lineno) from exc


def _check_header(header, fmt: str, lineno: int | None = None) -> None:
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise FormatError(f"not a {fmt} file", lineno)
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported {fmt} version {header.get('version')!r}", lineno)


def save_weights(path, mlp: Mlp, normalizer: Normalizer) -> None:
    doc = {
        "format": MLP_FORMAT,
        "version": FORMAT_VERSION,
        "dims": mlp.dims,
        "normalizer": {"shift": _floats(normalizer.shift), "scale": _floats(normalizer.scale)},
        "weights": [[_floats(row) for row in W] for W in mlp.weights],
        "biases": [_floats(b) for b in mlp.biases],
    }
    Path(path).write_text(json.dumps(doc))


def load_weights(path) -> tuple[Mlp, Normalizer]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed weight file ({exc.msg})", exc.lineno) from exc
    _check_header(doc, MLP_FORMAT)
    try:
        weights = [np.array(W, dtype=float) for W in doc["weights"]]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        norm = Normalizer(doc["normalizer"]["shift"], doc["normalizer"]["scale"])
        dims = list(doc["dims"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad weight file ({exc})") from exc
    mlp = Mlp(weights, biases)
    if mlp.dims != dims or any(b.shape != (W.shape[0],) for W, b in zip(weights, biases)):
        raise FormatError("weight shapes disagree with declared dims")
    return mlp, norm


def write_metrics_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def save_states(path, states: list[np.ndarray], tag: str, seed: int | None = None) -> None:
    doc = {"format": "ptrgps-states", "version": FORMAT_VERSION, "tag": tag, "seed": seed,
           "states": [_floats(x) for x in states]}
    Path(path).write_text(json.dumps(doc))


def load_states(path) -> list[np.ndarray]:
    """Read a state-list file, or a single bare 14-vector / {"state": [...]} file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed state file ({exc.msg})", exc.lineno) from exc
    if isinstance(doc, list):
        rows = [doc] if doc and not isinstance(doc[0], list) else doc
    elif "state" in doc:
        rows = [doc["state"]]
    else:
        _check_header(doc, "ptrgps-states")
        rows = doc["states"]
    out = [np.array(r, dtype=float) for r in rows]
    if any(x.shape != (14,) for x in out):
        raise FormatError("every state must have 14 entries")
    return out
