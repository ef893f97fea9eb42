"""Policy feasibility metrics, the PTR initialization benchmark and an imitation baseline."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import parallel_map
from .errors import DegenerateAttitudeError, PropagationAbortedError, PtrGpsError
from .gps import GpsConfig, consistent_virtual_control
from .lqr import generate_samples, riccati_backward, stream
from .policy import (
    Mlp,
    Normalizer,
    PairDataset,
    TrainConfig,
    forward,
    init_xavier,
    policy_rollout,
    train_supervised,
)
from .ptr import PtrConfig, PtrResult, ptr_solve
from .transcription import ReferenceTrajectory, TemporalGrid, linearize_discretize, straight_line_init
from .vehicle import (
    IDX_M,
    IDX_Q,
    IDX_R,
    IDX_V,
    IDX_W,
    BoundaryConditions,
    VehicleParams,
    euler_from_quat,
    trajectory_violation,
)

log = logging.getLogger(__name__)

INITIALIZERS = ("policy", "straight-line")


# ---------------------------------------------------------------------------
# Feasibility of policy rollouts
# ---------------------------------------------------------------------------


@dataclass
class FeasibilityReport:
    cost: float
    max_violation: float
    position_error: float
    velocity_error: float
    attitude_error_deg: float
    rate_error_deg: float
    n_states: int
    n_failures: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def terminal_errors(x_final, target) -> tuple[float, float, float, float]:
    """Position, velocity, Euler-angle (deg) and body-rate (deg/U_T) misses."""
    x_final = np.asarray(x_final, dtype=float)
    target = np.asarray(target, dtype=float)
    d_euler = np.subtract(euler_from_quat(x_final[IDX_Q]), euler_from_quat(target[IDX_Q]))
    d_euler = (d_euler + np.pi) % (2 * np.pi) - np.pi
    return (
        float(np.linalg.norm(x_final[IDX_R] - target[IDX_R])),
        float(np.linalg.norm(x_final[IDX_V] - target[IDX_V])),
        float(np.rad2deg(np.linalg.norm(d_euler))),
        float(np.rad2deg(np.linalg.norm(x_final[IDX_W] - target[IDX_W]))),
    )


def trajectory_metrics(x, u, target, p: VehicleParams) -> dict:
    """Cost, max-node violation and terminal errors of one trajectory."""
    pos, vel, att, rate = terminal_errors(x[-1], target)
    return {
        "cost": -float(x[-1, IDX_M]),
        "max_violation": float(trajectory_violation(x, u, p).max()),
        "position_error": pos,
        "velocity_error": vel,
        "attitude_error_deg": att,
        "rate_error_deg": rate,
    }


def summarize_metrics(rows: list[dict | None]) -> FeasibilityReport:
    """Average per-trajectory metrics; ``None`` entries count as failures."""
    ok = [r for r in rows if r is not None]
    keys = ("cost", "max_violation", "position_error", "velocity_error",
            "attitude_error_deg", "rate_error_deg")
    means = {k: float(np.mean([r[k] for r in ok])) if ok else float("nan") for k in keys}
    return FeasibilityReport(**means, n_states=len(rows), n_failures=len(rows) - len(ok))


def feasibility_report(
    mlp: Mlp,
    normalizer: Normalizer,
    inits,
    grid: TemporalGrid,
    p: VehicleParams,
    target: np.ndarray,
) -> tuple[FeasibilityReport, list[dict | None]]:
    """Nonlinear policy rollouts from ``inits`` scored against ``target``."""
    rows = []
    for idx, x0 in enumerate(inits):
        try:
            traj = policy_rollout(mlp, normalizer, x0, grid, p)
            rows.append(trajectory_metrics(traj.x, traj.u, target, p))
        except (PropagationAbortedError, DegenerateAttitudeError) as exc:
            log.warning("rollout %d failed: %s", idx, exc)
            rows.append(None)
    return summarize_metrics(rows), rows


# ---------------------------------------------------------------------------
# Initialization benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    w_nu_values: tuple[float, ...] = (1e3, 1e4, 1e5)
    w_tr_values: tuple[float, ...] = (1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3)
    eps_nu: float = 1e-6
    eps_tr: float = 1e-3
    max_iterations: int = 50

    def cells(self) -> list[PtrConfig]:
        return [
            PtrConfig(w_nu=w_nu, w_tr=w_tr, eps_nu=self.eps_nu, eps_tr=self.eps_tr,
                      max_iterations=self.max_iterations)
            for w_nu, w_tr in itertools.product(self.w_nu_values, self.w_tr_values)
        ]


@dataclass
class InitBenchmarkReport:
    initializer: str
    n_states: int
    successes: int
    mean: float
    median: float
    std: float
    min_iterations: list[int | None] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n_states if self.n_states else float("nan")

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["success_rate"] = self.success_rate
        return d


def aggregate_runs(rows: list[dict], initializer: str, n_states: int) -> InitBenchmarkReport:
    """Reduce per-cell rows to per-state minimum iteration counts.

    A state succeeds if any sweep cell converged; statistics cover
    successful states only.
    """
    best: list[int | None] = [None] * n_states
    for row in rows:
        if _truthy(row["converged"]):
            s, it = int(row["state"]), int(row["iterations"])
            best[s] = it if best[s] is None else min(best[s], it)
    wins = np.array([b for b in best if b is not None], dtype=float)
    if len(wins):
        mean, median, std = float(wins.mean()), float(np.median(wins)), float(wins.std())
    else:
        mean = median = std = float("nan")
    return InitBenchmarkReport(initializer, n_states, len(wins), mean, median, std, best)


def _truthy(v) -> bool:
    return v is True or v in ("True", "true", "1", 1)


def _benchmark_cell(job) -> PtrResult:
    bc, grid, p, cfg, ref = job
    return ptr_solve(bc, grid, p, cfg, ref)


def initial_reference(
    initializer: str,
    bc: BoundaryConditions,
    grid: TemporalGrid,
    p: VehicleParams,
    mlp: Mlp | None = None,
    normalizer: Normalizer | None = None,
) -> ReferenceTrajectory:
    """Straight-line guess, or the closed-loop policy rollout's states and controls."""
    if initializer == "straight-line":
        return straight_line_init(bc, grid, p)
    if initializer == "policy":
        if mlp is None or normalizer is None:
            raise ValueError("policy initializer needs a network and normalizer")
        return policy_rollout(mlp, normalizer, bc.initial, grid, p).as_reference()
    raise ValueError(f"unknown initializer {initializer!r}")


def init_benchmark(
    initializer: str,
    test_inits,
    sweep: SweepConfig,
    bc_final: np.ndarray,
    grid: TemporalGrid,
    p: VehicleParams,
    mlp: Mlp | None = None,
    normalizer: Normalizer | None = None,
    threads: int = 1,
) -> tuple[InitBenchmarkReport, list[dict]]:
    """Run every sweep cell from every test state and record minimum iterations.

    Returns the aggregate report and one row per (state, cell) run.
    """
    cells = sweep.cells()
    jobs, keys, rows = [], [], []
    for s, x0 in enumerate(test_inits):
        bc = BoundaryConditions(x0, bc_final)
        try:
            ref = initial_reference(initializer, bc, grid, p, mlp, normalizer)
        except PtrGpsError as exc:
            log.warning("state %d: no %s initial guess (%s)", s, initializer, exc)
            rows.extend(_row(initializer, s, c, False, 0, "init-failed") for c in cells)
            continue
        for c in cells:
            jobs.append((bc, grid, p, c, ref))
            keys.append((s, c))
    for (s, c), res in zip(keys, parallel_map(_benchmark_cell, jobs, threads)):
        rows.append(_row(initializer, s, c, res.converged, res.iterations, res.status))
    rows.sort(key=lambda r: (r["state"], r["w_nu"], r["w_tr"]))
    return aggregate_runs(rows, initializer, len(test_inits)), rows


def _row(initializer, s, cfg: PtrConfig, converged, iterations, status) -> dict:
    return {"initializer": initializer, "state": s, "w_nu": cfg.w_nu, "w_tr": cfg.w_tr,
            "converged": bool(converged), "iterations": int(iterations), "status": status}


# ---------------------------------------------------------------------------
# Imitation-learning baseline
# ---------------------------------------------------------------------------


@dataclass
class ImitationConfig:
    samples_per_trajectory: int = 100
    # samples are drawn in rounds of this size, each round with the noise
    # level GPS would use at the matching iteration
    samples_per_round: int = 20
    epochs: int = 250

    def __post_init__(self):
        if self.samples_per_trajectory < 1 or self.samples_per_round < 1 or self.epochs < 1:
            raise ValueError("imitation sample counts and epochs must be positive")


@dataclass
class ImitationResult:
    mlp: Mlp
    normalizer: Normalizer
    epoch_objectives: list[float]
    best_epoch: int
    n_converged: int


def policy_objective(mlp: Mlp, normalizer: Normalizer, states, controls) -> float:
    """Sum over pairs of the (unsquared) control error norm."""
    err = forward(mlp, normalizer, states) - np.asarray(controls, dtype=float)
    return float(np.linalg.norm(err, axis=1).sum())


def select_best_epoch(objectives) -> int:
    """Index of the epoch with the smallest validation objective (first on ties)."""
    objectives = np.asarray(objectives, dtype=float)
    if objectives.size == 0:
        raise ValueError("no epochs to choose from")
    return int(np.argmin(objectives))


def _solve_from_straight_line(job) -> PtrResult:
    x0, bc_final, grid, p, cfg = job
    bc = BoundaryConditions(x0, bc_final)
    return ptr_solve(bc, grid, p, cfg, straight_line_init(bc, grid, p))


def imitation_baseline(
    train_inits,
    val_inits,
    bc_final: np.ndarray,
    gps_cfg: GpsConfig,
    ptr_cfg: PtrConfig,
    im_cfg: ImitationConfig,
    p: VehicleParams | None = None,
    seed: int = 0,
    threads: int = 1,
) -> ImitationResult:
    """Train a policy on LQR samples around fully converged PTR solutions.

    Trajectory generation and learning are decoupled: every training state
    is solved to convergence first, then one supervised run fits the
    network, keeping the weights from the epoch with the lowest objective on
    the validation states' PTR solutions.
    """
    p = p or VehicleParams()
    grid = gps_cfg.grid
    jobs = [(x0, bc_final, grid, p, ptr_cfg) for x0 in train_inits]
    train_sols = parallel_map(_solve_from_straight_line, jobs, threads)
    jobs = [(x0, bc_final, grid, p, ptr_cfg) for x0 in val_inits]
    val_sols = [r for r in parallel_map(_solve_from_straight_line, jobs, threads) if r.converged]
    if not val_sols:
        raise PtrGpsError("no validation state produced a converged PTR solution")

    parts = []
    n_rounds = -(-im_cfg.samples_per_trajectory // im_cfg.samples_per_round)
    for i, res in enumerate(train_sols):
        if not res.converged:
            log.info("imitation: skipping training state %d (%s)", i, res.status)
            continue
        segments = linearize_discretize(res.trajectory.as_reference(), grid, p)
        iterate = consistent_virtual_control(res.trajectory, segments)
        gains = riccati_backward(segments, gps_cfg.lqr)
        remaining = im_cfg.samples_per_trajectory
        for r in range(n_rounds):
            S = min(im_cfg.samples_per_round, remaining)
            remaining -= S
            samples = generate_samples(iterate, segments, gains, S,
                                       gps_cfg.noise.at_iteration(r), stream(seed, r, i))
            xs, us = samples.pairs()
            Km1 = samples.u.shape[1]
            parts.append(PairDataset(xs, us, np.full(len(xs), i),
                                     r * im_cfg.samples_per_round + np.repeat(np.arange(S), Km1),
                                     np.tile(np.arange(Km1), S)))
    if not parts:
        raise PtrGpsError("no training state produced a converged PTR solution")
    dataset = PairDataset.concat(parts)
    val_x = np.concatenate([r.trajectory.x[:-1] for r in val_sols])
    val_u = np.concatenate([r.trajectory.u for r in val_sols])

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC0FFEE,)))
    mlp = init_xavier(gps_cfg.dims, rng)
    normalizer = Normalizer.fit(dataset.states)
    objectives: list[float] = []
    best = {"mlp": mlp.copy()}

    def on_epoch(epoch: int, net: Mlp) -> None:
        objectives.append(policy_objective(net, normalizer, val_x, val_u))
        if select_best_epoch(objectives) == epoch:
            best["mlp"] = net.copy()

    train_cfg = TrainConfig(**{**gps_cfg.train.__dict__, "epochs": im_cfg.epochs})
    train_supervised(mlp, normalizer, dataset, train_cfg, on_epoch=on_epoch)
    n_ok = sum(r.converged for r in train_sols)
    return ImitationResult(best["mlp"], normalizer, objectives, select_best_epoch(objectives), n_ok)
