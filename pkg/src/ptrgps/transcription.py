"""Temporal grid, straight-line references, ZOH discretization and propagation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidGridError, PropagationAbortedError, SingularMassError
from .vehicle import (
    IDX_M,
    IDX_Q,
    N_U,
    N_X,
    BoundaryConditions,
    VehicleParams,
    dynamics_jacobians,
    dynamics_rhs,
)

SUBSTEPS = 10


@dataclass(frozen=True)
class TemporalGrid:
    K: int
    t_f: float

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.K) * self.t_f / (self.K - 1)

    @property
    def dt(self) -> float:
        return self.t_f / (self.K - 1)


@dataclass
class ReferenceTrajectory:
    """Node states ``x`` (K, 14) and interval controls ``u`` (K-1, 3)."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.x.ndim != 2 or self.x.shape[1] != N_X:
            raise ValueError("reference states must be (K, 14)")
        if self.u.shape != (self.x.shape[0] - 1, N_U):
            raise ValueError("reference controls must be (K-1, 3)")


@dataclass
class LinearizedSegments:
    """Stacked ZOH matrices: A (K-1,14,14), B (K-1,14,3), z (K-1,14).

    ``x_next`` holds the nonlinear propagation of each reference node, so
    ``A[k] @ x[k] + B[k] @ u[k] + z[k] == x_next[k]`` by construction.
    """

    A: np.ndarray
    B: np.ndarray
    z: np.ndarray
    x_next: np.ndarray

    def __len__(self) -> int:
        return self.A.shape[0]


def make_grid(K: int, t_f: float) -> TemporalGrid:
    if K < 2:
        raise InvalidGridError(f"need at least 2 nodes, got K={K}")
    if not t_f > 0:
        raise InvalidGridError(f"final time must be positive, got {t_f}")
    return TemporalGrid(int(K), float(t_f))


def hover_controls(x: np.ndarray, p: VehicleParams) -> np.ndarray:
    """Upright thrust balancing gravity at each node's mass."""
    u = np.zeros((x.shape[0], N_U))
    u[:, 2] = x[:, IDX_M] * np.linalg.norm(p.g_I)
    return u


def straight_line_init(
    bc: BoundaryConditions, grid: TemporalGrid, p: VehicleParams
) -> ReferenceTrajectory:
    """Node-wise linear interpolation from the initial to the final state.

    Mass runs from its initial value down to the dry mass. Quaternions are
    renormalized per node and controls hold hover thrust.
    """
    final = bc.final.copy()
    final[IDX_M] = p.m_dry
    alpha = np.linspace(0.0, 1.0, grid.K)[:, None]
    x = (1.0 - alpha) * bc.initial + alpha * final
    x[:, IDX_Q] /= np.linalg.norm(x[:, IDX_Q], axis=1, keepdims=True)
    x[0], x[-1] = bc.initial, final
    return ReferenceTrajectory(x, hover_controls(x[:-1], p))


def _rk4_step(f, x, u, h):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow(x0, u, duration: float, p: VehicleParams, substeps: int = SUBSTEPS,
         renormalize: bool = False) -> np.ndarray:
    """RK4 flow of the nonlinear dynamics under constant thrust (batched)."""
    f = lambda x, uu: dynamics_rhs(x, uu, p)  # noqa: E731
    x = np.array(x0, dtype=float)
    h = duration / substeps
    for _ in range(substeps):
        x = _rk4_step(f, x, u, h)
        if renormalize:
            x[..., IDX_Q] /= np.linalg.norm(x[..., IDX_Q], axis=-1, keepdims=True)
    return x


def linearize_discretize(
    ref: ReferenceTrajectory,
    grid: TemporalGrid,
    p: VehicleParams,
    *,
    substeps: int = SUBSTEPS,
    rhs: Callable | None = None,
    jacobians: Callable | None = None,
) -> LinearizedSegments:
    """ZOH discretization of the dynamics around ``ref``, all intervals at once.

    Integrates the state together with the state transition matrix Phi and
    the input sensitivity Psi:

        Phi' = A(x, u) Phi,          Phi(0) = I
        Psi' = A(x, u) Psi + B(x, u), Psi(0) = 0

    ``rhs(x, u)`` and ``jacobians(x, u)`` override the rocket model.
    """
    if rhs is None:
        rhs = lambda x, u: dynamics_rhs(x, u, p)  # noqa: E731
    if jacobians is None:
        jacobians = lambda x, u: dynamics_jacobians(x, u, p)  # noqa: E731
    if np.any(ref.x[:, IDX_M] <= 0):
        raise SingularMassError("reference mass must stay positive")

    n = grid.K - 1
    x = ref.x[:-1].copy()
    u = ref.u
    Phi = np.broadcast_to(np.eye(N_X), (n, N_X, N_X)).copy()
    Psi = np.zeros((n, N_X, N_U))

    def deriv(x, Phi, Psi):
        Ac, Bc = jacobians(x, u)
        return rhs(x, u), Ac @ Phi, Ac @ Psi + Bc

    h = grid.dt / substeps
    for _ in range(substeps):
        k1 = deriv(x, Phi, Psi)
        k2 = deriv(*(s + 0.5 * h * d for s, d in zip((x, Phi, Psi), k1)))
        k3 = deriv(*(s + 0.5 * h * d for s, d in zip((x, Phi, Psi), k2)))
        k4 = deriv(*(s + h * d for s, d in zip((x, Phi, Psi), k3)))
        x, Phi, Psi = (
            s + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
            for s, a, b, c, d in zip((x, Phi, Psi), k1, k2, k3, k4)
        )
        if np.any(x[:, IDX_M] <= 0):
            raise SingularMassError("mass reached zero during discretization")

    z = x - np.einsum("kij,kj->ki", Phi, ref.x[:-1]) - np.einsum("kij,kj->ki", Psi, u)
    return LinearizedSegments(Phi, Psi, z, x)


def propagate_linear(segments: LinearizedSegments, x0, controls, nus=None) -> np.ndarray:
    """Roll the discrete model x+ = A x + B u + z + nu forward from ``x0``."""
    n = len(segments)
    controls = np.asarray(controls, dtype=float)
    nus = np.zeros((n, N_X)) if nus is None else np.asarray(nus, dtype=float)
    xs = np.empty((n + 1, N_X))
    xs[0] = x0
    for k in range(n):
        xs[k + 1] = (
            segments.A[k] @ xs[k] + segments.B[k] @ controls[k] + segments.z[k] + nus[k]
        )
    return xs


def propagate_nonlinear_zoh(
    x0, controls, grid: TemporalGrid, p: VehicleParams, substeps: int = SUBSTEPS
) -> np.ndarray:
    """Integrate the nonlinear dynamics under piecewise-constant thrust.

    Raises :class:`PropagationAbortedError` once mass drops to half the dry mass.
    """
    controls = np.asarray(controls, dtype=float)
    xs = np.empty((grid.K, N_X))
    xs[0] = x0
    for k in range(grid.K - 1):
        xs[k + 1] = _zoh_interval(xs[k], controls[k], grid.dt, p, substeps)
    return xs


def _zoh_interval(x, u, dt, p, substeps):
    h = dt / substeps
    f = lambda xx, uu: dynamics_rhs(xx, uu, p)  # noqa: E731
    for _ in range(substeps):
        if x[IDX_M] <= 0.5 * p.m_dry:
            raise PropagationAbortedError(f"mass fell to {x[IDX_M]:.4g}")
        x = _rk4_step(f, x, u, h)
        x[IDX_Q] /= np.linalg.norm(x[IDX_Q])
    if x[IDX_M] <= 0.5 * p.m_dry or not np.all(np.isfinite(x)):
        raise PropagationAbortedError("propagation left the valid state region")
    return x


def closed_loop_rollout(x0, controller: Callable, grid: TemporalGrid, p: VehicleParams,
                        substeps: int = SUBSTEPS) -> tuple[np.ndarray, np.ndarray]:
    """ZOH rollout where ``controller(x_k)`` is sampled at each node and held."""
    xs = np.empty((grid.K, N_X))
    us = np.empty((grid.K - 1, N_U))
    xs[0] = x0
    for k in range(grid.K - 1):
        us[k] = controller(xs[k])
        xs[k + 1] = _zoh_interval(xs[k], us[k], grid.dt, p, substeps)
    return xs, us
