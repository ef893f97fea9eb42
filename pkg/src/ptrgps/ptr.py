"""Penalized trust-region (PTR) sequential convex programming."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, PtrGpsError
from .socp import (
    SolverSettings,
    SolveStatus,
    SubproblemWeights,
    TrajectoryIterate,
    TrustMode,
    assemble_subproblem,
    extract_trajectory,
    solve,
)
from .transcription import ReferenceTrajectory, TemporalGrid, linearize_discretize
from .vehicle import BoundaryConditions, VehicleParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PtrConfig:
    w_nu: float = 1e4
    w_tr: float = 1.0
    eps_nu: float = 1e-6
    eps_tr: float = 1e-3
    max_iterations: int = 50

    def __post_init__(self):
        if min(self.eps_nu, self.eps_tr, self.w_nu, self.w_tr) <= 0:
            raise InvalidInputError("PTR weights and tolerances must be positive")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be at least 1")


@dataclass
class IterationRecord:
    iteration: int
    nu_sum: float
    tr_sum: float
    objective: float


@dataclass
class PtrResult:
    trajectory: TrajectoryIterate | None
    iterations: int
    converged: bool
    history: list[IterationRecord] = field(default_factory=list)
    status: str = "ok"
    failed_iteration: int | None = None
    message: str = ""


def check_termination(nu_sum: float, tr_sum: float, eps_nu: float, eps_tr: float) -> bool:
    """Both stopping sums under their tolerances."""
    return nu_sum <= eps_nu and tr_sum <= eps_tr


def deviation_sums(traj: TrajectoryIterate, ref: ReferenceTrajectory) -> tuple[float, float]:
    """(sum_k |nu_k|_1, sum_k |x_k - xbar_k|^2 + |u_k - ubar_k|^2)."""
    nu_sum = float(np.abs(traj.nu).sum())
    tr_sum = float(((traj.x - ref.x) ** 2).sum() + ((traj.u - ref.u) ** 2).sum())
    return nu_sum, tr_sum


def ptr_solve(
    bc: BoundaryConditions,
    grid: TemporalGrid,
    p: VehicleParams,
    config: PtrConfig,
    initial_ref: ReferenceTrajectory,
    solver_settings: SolverSettings | None = None,
) -> PtrResult:
    """Iterate linearize -> assemble -> solve -> re-reference until converged.

    A subproblem that does not solve to optimality ends the run with
    ``status="failed"`` and the index of the failing iteration.
    """
    weights = SubproblemWeights(w_nu=config.w_nu, w_tr=config.w_tr)
    ref = initial_ref
    history: list[IterationRecord] = []
    traj = None
    for it in range(1, config.max_iterations + 1):
        try:
            segments = linearize_discretize(ref, grid, p)
            program = assemble_subproblem(segments, ref, bc, weights, p, TrustMode.REFERENCE)
        except PtrGpsError as exc:
            return PtrResult(traj, it - 1, False, history, "failed", it, str(exc))
        sol = solve(program, solver_settings)
        if sol.status is not SolveStatus.OPTIMAL:
            log.debug("PTR subproblem %d ended %s", it, sol.status.value)
            return PtrResult(traj, it - 1, False, history, "failed", it, sol.status.value)
        traj = extract_trajectory(program, sol)
        nu_sum, tr_sum = deviation_sums(traj, ref)
        history.append(IterationRecord(it, nu_sum, tr_sum, sol.objective))
        if check_termination(nu_sum, tr_sum, config.eps_nu, config.eps_tr):
            return PtrResult(traj, it, True, history)
        ref = traj.as_reference()
    return PtrResult(traj, config.max_iterations, False, history, "max-iterations")


def write_history_csv(result: PtrResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "nu_sum", "tr_sum", "objective"])
        for rec in result.history:
            w.writerow([rec.iteration, repr(rec.nu_sum), repr(rec.tr_sum), repr(rec.objective)])
