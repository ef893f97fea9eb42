"""
6-DoF rocket model in nondimensional units.

State vector (n=14), flattened in the fixed order

    x = [m, r_I(3), v_I(3), q_BI(4), omega_B(3)]

    index 0      mass
    index 1-3    position, inertial East-North-Up
    index 4-6    velocity, inertial
    index 7-10   attitude quaternion, scalar first (w, x, y, z)
    index 11-13  body angular rate

Control vector (m=3) is the body-frame thrust T_B. The vehicle's long axis
is body +z, so thrust along +z is ungimballed and hovering upright is the
identity quaternion.

Dynamics
--------
    m'     = -alpha_mdot * |T_B|
    r'     = v
    v'     = C_IB(q) T_B / m + g_I
    q'     = 1/2 Omega(omega) q
    omega' = J^-1 (r_T x T_B - omega x J omega)

Every function below accepts a single state or a stack of states along
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAttitudeError, InvalidInputError, SingularMassError

N_X = 14
N_U = 3

IDX_M = 0
IDX_R = slice(1, 4)
IDX_V = slice(4, 7)
IDX_Q = slice(7, 11)
IDX_W = slice(11, 14)

CONSTRAINT_NAMES = (
    "mass",
    "rate",
    "glide_slope",
    "tilt",
    "min_thrust",
    "max_thrust",
    "gimbal",
)

_GIMBAL_LOCK_MARGIN = 1e-6


@dataclass(frozen=True)
class VehicleParams:
    """Vehicle and environment constants (defaults: the reusable-rocket case).

    Angles are stored in radians.
    """

    g_I: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    J_B: np.ndarray = field(default_factory=lambda: np.diag([0.186, 0.186, 0.00372]))
    alpha_mdot: float = 0.01
    r_TB: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -0.25]))
    m_wet: float = 2.0
    m_dry: float = 1.0
    T_min: float = 1.5
    T_max: float = 6.0
    delta_max: float = np.deg2rad(20.0)
    theta_max: float = np.deg2rad(90.0)
    gamma_gs: float = np.deg2rad(20.0)
    omega_max: float = np.deg2rad(60.0)

    def __post_init__(self):
        J = np.asarray(self.J_B, dtype=float)
        if not 0 < self.T_min < self.T_max:
            raise InvalidInputError("need 0 < T_min < T_max")
        if not 0 < self.m_dry < self.m_wet:
            raise InvalidInputError("need 0 < m_dry < m_wet")
        for name in ("delta_max", "theta_max", "gamma_gs"):
            angle = getattr(self, name)
            if not 0 < angle <= np.pi / 2:
                raise InvalidInputError(f"{name} must lie in (0, pi/2]")
        if self.omega_max <= 0:
            raise InvalidInputError("omega_max must be positive")
        if not np.allclose(J, J.T) or np.linalg.eigvalsh(J).min() <= 0:
            raise InvalidInputError("J_B must be symmetric positive definite")
        object.__setattr__(self, "J_B", J)
        object.__setattr__(self, "J_inv", np.linalg.inv(J))
        object.__setattr__(self, "g_I", np.asarray(self.g_I, dtype=float))
        object.__setattr__(self, "r_TB", np.asarray(self.r_TB, dtype=float))


@dataclass(frozen=True)
class State:
    m: float
    r_I: np.ndarray
    v_I: np.ndarray
    q_BI: np.ndarray
    omega_B: np.ndarray

    def __post_init__(self):
        if self.m <= 0:
            raise InvalidInputError("mass must be positive")
        q = np.asarray(self.q_BI, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InvalidInputError("quaternion must be unit norm")

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [[self.m], self.r_I, self.v_I, self.q_BI, self.omega_B]
        ).astype(float)

    @classmethod
    def from_vector(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(
            float(x[IDX_M]), x[IDX_R].copy(), x[IDX_V].copy(), x[IDX_Q].copy(), x[IDX_W].copy()
        )


@dataclass(frozen=True)
class BoundaryConditions:
    """Initial and final 14-vectors; ``final_mask`` marks pinned final entries."""

    initial: np.ndarray
    final: np.ndarray
    final_mask: np.ndarray = field(
        default_factory=lambda: np.arange(N_X) != IDX_M
    )

    def __post_init__(self):
        for name in ("initial", "final"):
            x = np.asarray(getattr(self, name), dtype=float)
            if x.shape != (N_X,):
                raise InvalidInputError(f"{name} state must be a 14-vector")
            if abs(np.linalg.norm(x[IDX_Q]) - 1.0) > 1e-9:
                raise InvalidInputError(f"{name} quaternion must be unit norm")
            object.__setattr__(self, name, x)
        object.__setattr__(self, "final_mask", np.asarray(self.final_mask, dtype=bool))


def landing_target(p: VehicleParams | None = None) -> np.ndarray:
    """Touchdown state: origin, 0.1 U_L/U_T descent, upright, no rotation."""
    p = p or VehicleParams()
    return make_state(p.m_dry, [0, 0, 0], [0, 0, -0.1], [1, 0, 0, 0], [0, 0, 0])


def make_state(m, r, v, q, w) -> np.ndarray:
    return np.concatenate([[m], r, v, q, w]).astype(float)


# ---------------------------------------------------------------------------
# Attitude primitives
# ---------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v x], batched over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _dcm(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    C = np.empty(q.shape[:-1] + (3, 3))
    C[..., 0, 0] = 1 - 2 * (y * y + z * z)
    C[..., 0, 1] = 2 * (x * y - w * z)
    C[..., 0, 2] = 2 * (x * z + w * y)
    C[..., 1, 0] = 2 * (x * y + w * z)
    C[..., 1, 1] = 1 - 2 * (x * x + z * z)
    C[..., 1, 2] = 2 * (y * z - w * x)
    C[..., 2, 0] = 2 * (x * z - w * y)
    C[..., 2, 1] = 2 * (y * z + w * x)
    C[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return C


def dcm_from_quat(q) -> np.ndarray:
    """Body-to-inertial direction cosine matrix C_I/B of a unit quaternion."""
    q = np.asarray(q, dtype=float)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-6):
        raise InvalidInputError("dcm_from_quat needs a unit quaternion")
    return _dcm(q)


def omega_matrix(omega) -> np.ndarray:
    """4x4 skew matrix with q' = 1/2 Omega(omega) q for body rates omega."""
    w = np.asarray(omega, dtype=float)
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    O = np.zeros(w.shape[:-1] + (4, 4))
    O[..., 0, 1], O[..., 0, 2], O[..., 0, 3] = -wx, -wy, -wz
    O[..., 1, 0], O[..., 1, 2], O[..., 1, 3] = wx, wz, -wy
    O[..., 2, 0], O[..., 2, 1], O[..., 2, 3] = wy, -wz, wx
    O[..., 3, 0], O[..., 3, 1], O[..., 3, 2] = wz, wy, -wx
    return O


def quat_multiply(p, q) -> np.ndarray:
    """Hamilton product p (x) q, scalar first."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, pv = p[..., :1], p[..., 1:]
    qw, qv = q[..., :1], q[..., 1:]
    w = pw * qw - np.sum(pv * qv, axis=-1, keepdims=True)
    v = pw * qv + qw * pv + np.cross(pv, qv)
    return np.concatenate([w, v], axis=-1)


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X (yaw, then pitch, then roll) Euler angles in radians to a quaternion."""
    if abs(abs(pitch) - np.pi / 2) <= _GIMBAL_LOCK_MARGIN:
        raise DegenerateAttitudeError(f"pitch {pitch!r} is at gimbal lock")
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    q = np.array([
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    ])
    return q / np.linalg.norm(q)


def euler_from_quat(q) -> tuple[float, float, float]:
    """Inverse of :func:`quat_from_euler`; returns (roll, pitch, yaw) in radians."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    s = 2.0 * (w * y - z * x)
    if abs(s) >= np.cos(_GIMBAL_LOCK_MARGIN):
        raise DegenerateAttitudeError("attitude is at gimbal lock")
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = np.arcsin(s)
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return float(roll), float(pitch), float(yaw)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def dynamics_rhs(x, u, p: VehicleParams) -> np.ndarray:
    """Time derivative of the 14-state under body thrust ``u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m = x[..., IDX_M]
    if np.any(m <= 0):
        raise SingularMassError("mass must stay positive")
    q = x[..., IDX_Q]
    w = x[..., IDX_W]
    C = _dcm(q)

    dx = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (N_X,)))
    dx[..., IDX_M] = -p.alpha_mdot * np.linalg.norm(u, axis=-1)
    dx[..., IDX_R] = x[..., IDX_V]
    dx[..., IDX_V] = np.einsum("...ij,...j->...i", C, u) / m[..., None] + p.g_I
    dx[..., IDX_Q] = 0.5 * np.einsum("...ij,...j->...i", omega_matrix(w), q)
    Jw = w @ p.J_B.T
    torque = np.cross(p.r_TB, u) - np.cross(w, Jw)
    dx[..., IDX_W] = torque @ p.J_inv.T
    return dx


def dynamics_jacobians(x, u, p: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (df/dx, df/du) of :func:`dynamics_rhs`.

    The thrust-norm derivative is taken as zero at T_B = 0.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    m = x[..., IDX_M]
    if np.any(m <= 0):
        raise SingularMassError("mass must stay positive")
    q = x[..., IDX_Q]
    qw, qv = q[..., 0], q[..., 1:]
    w = x[..., IDX_W]

    A = np.zeros(batch + (N_X, N_X))
    B = np.zeros(batch + (N_X, N_U))

    norm_u = np.linalg.norm(u, axis=-1)
    safe = np.where(norm_u > 0, norm_u, 1.0)
    B[..., IDX_M, :] = np.where(
        (norm_u > 0)[..., None], -p.alpha_mdot * u / safe[..., None], 0.0
    )

    A[..., 1:4, 4:7] = np.eye(3)

    C = _dcm(q)
    minv = 1.0 / m
    CT = np.einsum("...ij,...j->...i", C, u)
    A[..., 4:7, 0] = -CT * (minv**2)[..., None]
    # d(C(q) T)/dq for C(q)T = T + 2 w (qv x T) + 2 qv x (qv x T)
    dCT_dw = 2.0 * np.cross(qv, u)
    qv_dot_T = np.sum(qv * u, axis=-1)
    eye = np.broadcast_to(np.eye(3), batch + (3, 3))
    dCT_dqv = (
        -2.0 * qw[..., None, None] * skew(u)
        + 2.0 * (
            qv_dot_T[..., None, None] * eye
            + qv[..., :, None] * u[..., None, :]
            - 2.0 * u[..., :, None] * qv[..., None, :]
        )
    )
    A[..., 4:7, 7] = dCT_dw * minv[..., None]
    A[..., 4:7, 8:11] = dCT_dqv * minv[..., None, None]
    B[..., 4:7, :] = C * minv[..., None, None]

    A[..., 7:11, 7:11] = 0.5 * omega_matrix(w)
    # Omega(w) q = Xi(q) w with Xi = [[-qv^T], [qw I + [qv x]]]
    Xi = np.zeros(batch + (4, 3))
    Xi[..., 0, :] = -qv
    Xi[..., 1:, :] = qw[..., None, None] * eye + skew(qv)
    A[..., 7:11, 11:14] = 0.5 * Xi

    Jw = w @ p.J_B.T
    A[..., 11:14, 11:14] = p.J_inv @ (skew(Jw) - skew(w) @ p.J_B)
    B[..., 11:14, :] = np.broadcast_to(p.J_inv @ skew(p.r_TB), batch + (3, 3))
    return A, B


# ---------------------------------------------------------------------------
# Constraints and feasibility metrics
# ---------------------------------------------------------------------------


def eval_constraints(x, u, p: VehicleParams) -> np.ndarray:
    """Path and input constraint residuals; entry <= 0 means satisfied.

    Order: mass, rate, glide slope, tilt, min thrust, max thrust, gimbal.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    r = x[..., IDX_R]
    q = x[..., IDX_Q]
    norm_u = np.linalg.norm(u, axis=-1)
    res = np.stack(
        [
            p.m_dry - x[..., IDX_M],
            np.linalg.norm(x[..., IDX_W], axis=-1) - p.omega_max,
            np.tan(p.gamma_gs) * np.linalg.norm(r[..., :2], axis=-1) - r[..., 2],
            np.cos(p.theta_max) - 1.0 + 2.0 * (q[..., 1] ** 2 + q[..., 2] ** 2),
            p.T_min - norm_u,
            norm_u - p.T_max,
            np.cos(p.delta_max) * norm_u - u[..., 2],
        ],
        axis=-1,
    )
    return res


def normalized_violation(x, u, p: VehicleParams) -> np.ndarray:
    """Ramped constraint violations, each divided by its bound (all >= 0)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    r = x[..., IDX_R]
    q = x[..., IDX_Q]
    rho = np.linalg.norm(r[..., :2], axis=-1)
    # the landing site itself sits on the cone apex and is feasible
    elevation = np.where(
        (rho == 0) & (r[..., 2] == 0), np.pi / 2, np.arctan2(r[..., 2], rho)
    )
    tilt = np.arccos(np.clip(1.0 - 2.0 * (q[..., 1] ** 2 + q[..., 2] ** 2), -1.0, 1.0))
    norm_u = np.linalg.norm(u, axis=-1)
    gimbal = np.arctan2(np.linalg.norm(u[..., :2], axis=-1), u[..., 2])
    ramp = lambda a: np.maximum(a, 0.0)  # noqa: E731
    return np.stack(
        [
            ramp(p.m_dry - x[..., IDX_M]) / p.m_dry,
            ramp(np.linalg.norm(x[..., IDX_W], axis=-1) - p.omega_max) / p.omega_max,
            ramp(p.gamma_gs - elevation) / p.gamma_gs,
            ramp(tilt - p.theta_max) / p.theta_max,
            ramp(p.T_min - norm_u) / p.T_min,
            ramp(norm_u - p.T_max) / p.T_max,
            ramp(gimbal - p.delta_max) / p.delta_max,
        ],
        axis=-1,
    )


def trajectory_violation(states, controls, p: VehicleParams) -> np.ndarray:
    """Per-node normalized violation for K states and K-1 ZOH controls.

    The last node has no control; its input rows are reported as zero. Its
    glide-slope row is zeroed too: the landing node sits on the cone apex,
    where any miss distance, however small, reads as a full-scale angle
    violation. That miss is scored by the terminal position error instead.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    padded = np.vstack([controls, controls[-1:]])
    c = normalized_violation(states, padded, p)
    c[-1, 2] = 0.0
    c[-1, 4:] = 0.0
    return c


def min_fuel_cost(traj) -> float:
    """Minimum-fuel objective -m(t_f) of a trajectory (anything with ``.x``)."""
    x = np.asarray(getattr(traj, "x", traj), dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidInputError("trajectory needs at least one node")
    return -float(x[-1, IDX_M])
