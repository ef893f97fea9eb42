"""Time-varying LQR gains and feedback-perturbed sample trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateAttitudeError, InvalidInputError, SynthesisError
from .socp import TrajectoryIterate
from .transcription import LinearizedSegments
from .vehicle import IDX_Q, IDX_R, IDX_V, N_U, N_X, euler_from_quat, quat_from_euler

_MAX_RESAMPLES = 20


@dataclass(frozen=True)
class LqrWeights:
    Q: np.ndarray = field(default_factory=lambda: np.eye(N_X))
    R: np.ndarray = field(default_factory=lambda: np.eye(N_U))
    Q_f: np.ndarray = field(default_factory=lambda: 100.0 * np.eye(N_X))

    def __post_init__(self):
        for name in ("Q", "R", "Q_f"):
            M = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(M, M.T):
                raise InvalidInputError(f"{name} must be symmetric")
            object.__setattr__(self, name, M)
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise InvalidInputError("R must be positive definite")


@dataclass
class GainSchedule:
    """Feedback gains K (K-1, 3, 14) and cost-to-go matrices P (K, 14, 14)."""

    K: np.ndarray
    P: np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Initial-state noise levels, decayed geometrically with the GPS iteration."""

    sigma_pos: float = 0.1
    sigma_vel: float = 0.05
    sigma_angle: float = np.deg2rad(5.0)
    decay: float = 0.7
    iteration: int = 0

    def __post_init__(self):
        if min(self.sigma_pos, self.sigma_vel, self.sigma_angle) < 0:
            raise InvalidInputError("noise levels must be non-negative")
        if not 0 < self.decay <= 1:
            raise InvalidInputError("decay must lie in (0, 1]")

    @property
    def factor(self) -> float:
        return self.decay**self.iteration

    def at_iteration(self, n: int) -> "NoiseSchedule":
        return replace(self, iteration=n)

    def sigmas(self) -> tuple[float, float, float]:
        f = self.factor
        return self.sigma_pos * f, self.sigma_vel * f, self.sigma_angle * f


def riccati_backward(segments, weights: LqrWeights) -> GainSchedule:
    """Finite-horizon discrete Riccati recursion on the segment matrices.

    ``segments`` needs ``A`` (n, nx, nx) and ``B`` (n, nx, nu) arrays.
    """
    A, B = np.asarray(segments.A), np.asarray(segments.B)
    n, nx, nu = B.shape
    Q, R = weights.Q, weights.R
    P = np.empty((n + 1, nx, nx))
    gains = np.empty((n, nu, nx))
    P[n] = weights.Q_f
    for k in range(n - 1, -1, -1):
        Pn = P[k + 1]
        H = R + B[k].T @ Pn @ B[k]
        try:
            gains[k] = -np.linalg.solve(H, B[k].T @ Pn @ A[k])
        except np.linalg.LinAlgError as exc:
            raise SynthesisError(f"R + B^T P B singular at step {k}") from exc
        Acl = A[k] + B[k] @ gains[k]
        Pk = Q + gains[k].T @ R @ gains[k] + Acl.T @ Pn @ Acl
        P[k] = 0.5 * (Pk + Pk.T)
    return GainSchedule(gains, P)


def perturb_initial_state(x_init, noise: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Gaussian perturbation of position, velocity and Euler angles.

    Draw order per attempt: 3 position, 3 velocity, then roll, pitch, yaw.
    Mass and body rates are left untouched.
    """
    x_init = np.asarray(x_init, dtype=float)
    s_pos, s_vel, s_ang = noise.sigmas()
    base = np.array(euler_from_quat(x_init[IDX_Q]))
    for _ in range(_MAX_RESAMPLES):
        draw = rng.standard_normal(9)
        x = x_init.copy()
        x[IDX_R] += s_pos * draw[0:3]
        x[IDX_V] += s_vel * draw[3:6]
        if s_ang == 0.0:
            return x
        roll, pitch, yaw = base + s_ang * draw[6:9]
        try:
            q = quat_from_euler(roll, pitch, yaw)
        except DegenerateAttitudeError:
            continue
        # keep the hemisphere of the input quaternion
        x[IDX_Q] = q if q @ x_init[IDX_Q] >= 0 else -q
        return x
    raise DegenerateAttitudeError("attitude noise kept hitting gimbal lock")


@dataclass
class SampleSet:
    """S sampled trajectories: x (S, K, 14) and u (S, K-1, 3)."""

    x: np.ndarray
    u: np.ndarray

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """State/control pairs at nodes 0..K-2, flattened sample-major."""
        return self.x[:, :-1].reshape(-1, N_X), self.u.reshape(-1, N_U)


def generate_samples(
    iterate: TrajectoryIterate,
    segments: LinearizedSegments,
    gains: GainSchedule,
    S: int,
    noise: NoiseSchedule,
    rng: np.random.Generator,
) -> SampleSet:
    """Propagate S perturbed starts through the linear model under LQR feedback.

        u_k = u_hat_k + K_k (x_k - x_hat_k)
        x_{k+1} = A_k x_k + B_k u_k + z_k + nu_hat_k

    Each sample gets its own child stream spawned from ``rng``.
    """
    n = len(segments)
    if gains.K.shape[0] != n:
        raise InvalidInputError("gain schedule does not match the segments")
    xs = np.empty((S, n + 1, N_X))
    us = np.empty((S, n, N_U))
    for s, child in enumerate(rng.spawn(S)):
        xs[s, 0] = perturb_initial_state(iterate.x[0], noise, child)
    for k in range(n):
        err = xs[:, k] - iterate.x[k]
        us[:, k] = iterate.u[k] + err @ gains.K[k].T
        xs[:, k + 1] = (
            xs[:, k] @ segments.A[k].T
            + us[:, k] @ segments.B[k].T
            + segments.z[k]
            + iterate.nu[k]
        )
    return SampleSet(xs, us)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple, e.g. (iteration, i)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))
