"""Guided policy search: alternate trust-region trajectory updates and policy regression."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import parallel_map, save_dataset, save_weights
from .errors import GpsRunError, PropagationAbortedError, PtrGpsError
from .lqr import LqrWeights, NoiseSchedule, generate_samples, riccati_backward, stream
from .policy import (
    DEFAULT_DIMS,
    Adam,
    Mlp,
    Normalizer,
    PairDataset,
    TrainConfig,
    forward,
    init_xavier,
    policy_rollout,
    train_supervised,
)
from .socp import (
    SolveStatus,
    SubproblemWeights,
    TrajectoryIterate,
    TrustMode,
    assemble_subproblem,
    extract_trajectory,
    solve,
)
from .transcription import (
    LinearizedSegments,
    TemporalGrid,
    linearize_discretize,
    make_grid,
    straight_line_init,
)
from .vehicle import IDX_M, BoundaryConditions, VehicleParams

log = logging.getLogger(__name__)


@dataclass
class GpsConfig:
    S: int = 20
    K: int = 31
    t_f: float = 5.0
    w_trp: float = 10.0
    w_nu: float = 1e4
    eps_J: float = 1e-4
    max_iterations: int = 20
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    lqr: LqrWeights = field(default_factory=LqrWeights)
    dims: tuple[int, ...] = DEFAULT_DIMS
    # train on all samples gathered so far instead of the current iteration's
    cumulative: bool = False
    max_drop_fraction: float = 0.2

    def __post_init__(self):
        if min(self.w_trp, self.w_nu, self.eps_J) <= 0:
            raise ValueError("GPS weights and tolerance must be positive")

    @property
    def grid(self) -> TemporalGrid:
        return make_grid(self.K, self.t_f)


@dataclass
class GpsIterationLog:
    iteration: int
    validation_cost: float
    validation_failures: int
    train_loss: float
    n_pairs: int
    n_active: int
    mode: str
    nu_sums: list[float]
    wall_time: float


@dataclass
class GpsRunLog:
    entries: list[GpsIterationLog] = field(default_factory=list)
    dropped: dict[int, str] = field(default_factory=dict)
    stopped_by: str = ""

    @property
    def validation_costs(self) -> list[float]:
        return [e.validation_cost for e in self.entries]

    def write_csv(self, path, include_timing: bool = False) -> None:
        cols = ["iteration", "validation_cost", "validation_failures", "train_loss",
                "n_pairs", "n_active", "mode", "nu_sum_total"]
        if include_timing:
            cols.append("wall_time")
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for e in self.entries:
                row = [e.iteration, repr(e.validation_cost), e.validation_failures,
                       repr(e.train_loss), e.n_pairs, e.n_active, e.mode,
                       repr(float(np.sum(e.nu_sums)))]
                if include_timing:
                    row.append(f"{e.wall_time:.3f}")
                w.writerow(row)


@dataclass
class GpsResult:
    mlp: Mlp
    normalizer: Normalizer
    log: GpsRunLog
    iterates: dict[int, TrajectoryIterate]


def rollout_costs(mlp, normalizer, inits, grid, p) -> list[float | None]:
    """-m(t_f) of each nonlinear policy rollout; None where propagation aborted."""
    costs = []
    for x0 in inits:
        try:
            traj = policy_rollout(mlp, normalizer, x0, grid, p)
        except PropagationAbortedError:
            costs.append(None)
            continue
        costs.append(-float(traj.x[-1, IDX_M]))
    return costs


def validation_cost(mlp: Mlp, normalizer: Normalizer, val_inits, grid: TemporalGrid,
                    p: VehicleParams) -> float:
    """Mean -m(t_f) over successful policy rollouts from the validation states."""
    if len(val_inits) == 0:
        raise ValueError("validation set is empty")
    costs = rollout_costs(mlp, normalizer, val_inits, grid, p)
    ok = [c for c in costs if c is not None]
    if len(ok) < len(costs):
        log.warning("%d of %d validation rollouts aborted", len(costs) - len(ok), len(costs))
    return float(np.mean(ok)) if ok else float("nan")


def consistent_virtual_control(iterate: TrajectoryIterate, segments: LinearizedSegments):
    """Re-derive nu so the iterate satisfies the linear model to round-off."""
    pred = (
        np.einsum("kij,kj->ki", segments.A, iterate.x[:-1])
        + np.einsum("kij,kj->ki", segments.B, iterate.u)
        + segments.z
    )
    return TrajectoryIterate(iterate.x, iterate.u, iterate.x[1:] - pred)


def trajectory_update(job):
    """One trajectory's subproblem solve, LQR synthesis and sampling.

    Returns ``(iterate, samples, nu_sum)`` or ``(None, reason, None)``.
    """
    (i, n, ref, bc, p, grid, weights, mode, policy_controls, cfg, seed) = job
    try:
        segments = linearize_discretize(ref, grid, p)
        program = assemble_subproblem(segments, ref, bc, weights, p, mode, policy_controls)
    except PtrGpsError as exc:
        return None, str(exc), None
    sol = solve(program)
    if sol.status is not SolveStatus.OPTIMAL:
        return None, sol.status.value, None
    iterate = consistent_virtual_control(extract_trajectory(program, sol), segments)
    gains = riccati_backward(segments, cfg.lqr)
    samples = generate_samples(
        iterate, segments, gains, cfg.S, cfg.noise.at_iteration(n), stream(seed, n, i)
    )
    return iterate, samples, float(np.abs(iterate.nu).sum())


def gps_run(
    train_inits: list[np.ndarray],
    val_inits: list[np.ndarray],
    bc_final: np.ndarray,
    cfg: GpsConfig,
    p: VehicleParams | None = None,
    seed: int = 0,
    threads: int = 1,
    checkpoint_dir=None,
) -> GpsResult:
    """Guided policy search.

    Iteration 0 linearizes around straight-line references and penalizes
    deviation from the reference controls; later iterations re-linearize
    around the previous iterates and penalize deviation from the current
    policy's output. After each policy update the mean rollout cost over
    ``val_inits`` is compared with the previous one to decide stopping.
    """
    p = p or VehicleParams()
    if not train_inits:
        raise GpsRunError("need at least one training state")
    _check_disjoint(train_inits, val_inits)
    grid = cfg.grid
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC0FFEE,)))
    mlp = init_xavier(cfg.dims, rng)
    normalizer = None
    optimizer = Adam(mlp, cfg.train)
    val_keys = {np.asarray(x, dtype=float).tobytes() for x in val_inits}

    bcs = {i: BoundaryConditions(x, bc_final) for i, x in enumerate(train_inits)}
    refs = {i: straight_line_init(bc, grid, p) for i, bc in bcs.items()}
    iterates: dict[int, TrajectoryIterate] = {}
    run_log = GpsRunLog()
    history: list[PairDataset] = []
    weights = SubproblemWeights(w_nu=cfg.w_nu, w_tr=cfg.w_trp, w_trp=cfg.w_trp)

    for n in range(cfg.max_iterations):
        t0 = time.perf_counter()
        active = sorted(refs)
        mode = TrustMode.REFERENCE if n == 0 else TrustMode.POLICY
        jobs = []
        for i in active:
            ref = refs[i]
            pc = None
            if mode is TrustMode.POLICY:
                pc = forward(mlp, normalizer, ref.x[:-1])
            jobs.append((i, n, ref, bcs[i], p, grid, weights, mode, pc, cfg, seed))
        results = parallel_map(trajectory_update, jobs, threads)

        parts, nu_sums = [], []
        for i, (iterate, samples, nu_sum) in zip(active, results):
            if iterate is None:
                log.warning("GPS iteration %d: dropping trajectory %d (%s)", n, i, samples)
                run_log.dropped[i] = f"iteration {n}: {samples}"
                del refs[i]
                iterates.pop(i, None)
                continue
            iterates[i] = iterate
            refs[i] = iterate.as_reference()
            nu_sums.append(nu_sum)
            xs, us = samples.pairs()
            S, Km1 = samples.u.shape[:2]
            parts.append(PairDataset(
                xs, us,
                np.full(S * Km1, i),
                np.repeat(np.arange(S), Km1),
                np.tile(np.arange(Km1), S),
            ))
        if len(run_log.dropped) > cfg.max_drop_fraction * len(train_inits):
            raise GpsRunError(
                f"{len(run_log.dropped)} of {len(train_inits)} trajectories dropped"
            )

        current = PairDataset.concat(parts)
        history.append(current)
        dataset = PairDataset.concat(history) if cfg.cumulative else current
        if any(x.tobytes() in val_keys for x in dataset.states):
            raise GpsRunError("validation state leaked into the training pairs")
        if normalizer is None:
            normalizer = Normalizer.fit(dataset.states)
        train_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": cfg.train.seed + 7919 * n})
        losses = train_supervised(mlp, normalizer, dataset, train_cfg, optimizer=optimizer)

        costs = rollout_costs(mlp, normalizer, val_inits, grid, p)
        ok = [c for c in costs if c is not None]
        j_val = float(np.mean(ok)) if ok else float("nan")
        entry = GpsIterationLog(
            iteration=n, validation_cost=j_val, validation_failures=len(costs) - len(ok),
            train_loss=losses[-1], n_pairs=len(dataset), n_active=len(refs),
            mode=mode.value, nu_sums=nu_sums, wall_time=time.perf_counter() - t0,
        )
        run_log.entries.append(entry)
        log.info("GPS iteration %d: J_val=%.6f loss=%.3e pairs=%d (%.1fs)",
                 n, j_val, entry.train_loss, entry.n_pairs, entry.wall_time)
        if checkpoint_dir is not None:
            _checkpoint(Path(checkpoint_dir), n, mlp, normalizer, current)

        if n >= 1:
            prev = run_log.entries[-2].validation_cost
            if abs(j_val - prev) < cfg.eps_J:
                run_log.stopped_by = "eps_J"
                break
    else:
        run_log.stopped_by = "max_iterations"
    return GpsResult(mlp, normalizer, run_log, iterates)


def _check_disjoint(train_inits, val_inits) -> None:
    train = {np.asarray(x, dtype=float).tobytes() for x in train_inits}
    if any(np.asarray(x, dtype=float).tobytes() in train for x in val_inits):
        raise GpsRunError("validation and training initial states overlap")


def _checkpoint(root: Path, n: int, mlp, normalizer, dataset) -> None:
    root.mkdir(parents=True, exist_ok=True)
    save_weights(root / f"policy_iter{n:02d}.json", mlp, normalizer)
    save_dataset(root / f"pairs_iter{n:02d}.jsonl", dataset, run_id=f"gps-{n}")
