"""
Conic-program form of the convex trajectory subproblem.

Programs use the standard slack form

    minimize    c^T v
    subject to  b - A v = s,  s in K

where K is a product of one zero cone, one nonnegative orthant and a list of
second-order cones {(t, y) : |y|_2 <= t}, stacked in that row order. The
default backend is Clarabel, an interior-point conic solver.

Quadratic penalties w |d|^2 are written as w * eta with the rotated-cone
epigraph |(2 d, eta - 1)|_2 <= eta + 1, so every subproblem is a pure SOCP.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import ExtractionError, InvalidInputError, LinearizationError
from .transcription import LinearizedSegments, ReferenceTrajectory
from .vehicle import IDX_M, IDX_Q, IDX_R, IDX_W, N_U, N_X, BoundaryConditions, VehicleParams


class TrustMode(enum.Enum):
    REFERENCE = "reference"  # w_tr (|x - xbar|^2 + |u - ubar|^2)
    POLICY = "policy"  # w_trp |u - pi(xbar)|^2


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max-iterations"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass(frozen=True)
class SubproblemWeights:
    w_nu: float = 1e4
    w_tr: float = 1.0
    w_trp: float = 10.0

    def __post_init__(self):
        if min(self.w_nu, self.w_tr, self.w_trp) <= 0:
            raise InvalidInputError("subproblem weights must be positive")


@dataclass
class TrajectoryIterate:
    """Subproblem output: x (K,14), u (K-1,3), nu (K-1,14)."""

    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray

    @property
    def K(self) -> int:
        return self.x.shape[0]

    def as_reference(self) -> ReferenceTrajectory:
        return ReferenceTrajectory(self.x.copy(), self.u.copy())


@dataclass
class ConicProgram:
    n: int
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    n_zero: int
    n_nonneg: int
    soc_sizes: list[int]
    index: dict[str, np.ndarray]
    mode: TrustMode | None = None
    # penalty weight applied to each trust-region epigraph variable
    trust_weight: float = 0.0
    nu_weight: float = 0.0

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def pack(self, x, u, nu) -> np.ndarray:
        """Place (x, u, nu) into a primal vector.

        ``nu_abs`` is set to |nu|; the trust-region epigraphs stay at zero,
        which is feasible only where (x, u) coincides with the reference.
        """
        v = np.zeros(self.n)
        v[self.index["x"]] = x
        v[self.index["u"]] = u
        v[self.index["nu"]] = nu
        v[self.index["nu_abs"]] = np.abs(nu)
        return v


@dataclass
class SolverSettings:
    max_iter: int = 200
    tol_gap_abs: float = 1e-8
    tol_gap_rel: float = 1e-8
    tol_feas: float = 1e-8
    # below Clarabel's 1e-8 default; the trajectory programs stall short of
    # tol_feas otherwise
    static_regularization: float = 1e-10
    # acceptance bound on recomputed residuals for "almost solved" exits
    residual_tol: float = 1e-8
    verbose: bool = False


@dataclass
class Solution:
    status: SolveStatus
    primal: np.ndarray | None
    objective: float
    iterations: int
    primal_residual: float = np.inf
    cone_violation: float = np.inf
    solve_time: float = 0.0
    # cone multipliers z, with c + A^T z = 0 at optimality
    dual: np.ndarray | None = None


class _RowBlock:
    """Accumulates rows of G v + h for one cone family."""

    def __init__(self):
        self.n = 0
        self.rows, self.cols, self.vals, self.h = [], [], [], []

    def add(self, n_rows, rows, cols, vals, h):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols, vals = np.broadcast_arrays(
            np.asarray(cols, dtype=np.int64).ravel(), np.asarray(vals, dtype=float).ravel()
        )
        self.rows.append(rows + self.n)
        self.cols.append(cols)
        self.vals.append(vals)
        hv = np.zeros(n_rows)
        hv[:] = h
        self.h.append(hv)
        self.n += n_rows

    def arrays(self, offset):
        if not self.rows:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0), np.zeros(0)
        return (
            np.concatenate(self.rows) + offset,
            np.concatenate(self.cols),
            np.concatenate(self.vals),
            np.concatenate(self.h),
        )


class _ProgramBuilder:
    def __init__(self):
        self.n = 0
        self.index: dict[str, np.ndarray] = {}
        self.zero = _RowBlock()
        self.nonneg = _RowBlock()
        self.soc = _RowBlock()
        self.soc_sizes: list[int] = []

    def variables(self, name, shape):
        size = int(np.prod(shape))
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.index[name] = idx
        self.n += size
        return idx

    def socs(self, count, rows):
        """Add ``count`` second-order cones of size ``len(rows)``.

        Row j of cone i is ``sum(vals[i] * v[cols[i]] for cols, vals in terms) + h[i]``
        with ``rows[j] = (terms, h)``; scalar vals/h broadcast over cones.
        """
        size = len(rows)
        base = np.arange(count) * size + self.soc.n
        h = np.zeros((count, size))
        for j, (terms, hj) in enumerate(rows):
            for cols, vals in terms:
                cols = np.asarray(cols, dtype=np.int64)
                vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape)
                self.soc.rows.append(base + j)
                self.soc.cols.append(cols.ravel())
                self.soc.vals.append(vals.ravel())
            h[:, j] = hj
        self.soc.h.append(h.ravel())
        self.soc.n += count * size
        self.soc_sizes.extend([size] * count)

    def build(self, c) -> tuple[sp.csc_matrix, np.ndarray, int, int]:
        zr, zc, zv, zh = self.zero.arrays(0)
        nr, nc, nv, nh = self.nonneg.arrays(self.zero.n)
        sr, sc, sv, sh = self.soc.arrays(self.zero.n + self.nonneg.n)
        m = self.zero.n + self.nonneg.n + self.soc.n
        rows = np.concatenate([zr, nr, sr])
        cols = np.concatenate([zc, nc, sc])
        vals = np.concatenate([zv, nv, sv])
        # b - A v = G v + h  =>  A = -G, b = h
        A = sp.csc_matrix((-vals, (rows, cols)), shape=(m, self.n))
        A.sum_duplicates()
        b = np.concatenate([zh, nh, sh])
        return A, b, self.zero.n, self.nonneg.n


def assemble_subproblem(
    segments: LinearizedSegments,
    ref: ReferenceTrajectory,
    bc: BoundaryConditions,
    weights: SubproblemWeights,
    p: VehicleParams,
    mode: TrustMode = TrustMode.REFERENCE,
    policy_controls: np.ndarray | None = None,
    running_cost: tuple[np.ndarray, np.ndarray] | None = None,
) -> ConicProgram:
    """Build the penalized trust-region subproblem around ``ref``.

    In ``TrustMode.POLICY`` the control penalty is taken against
    ``policy_controls`` (the policy evaluated at the reference states, held
    constant). ``running_cost`` optionally adds linear stage costs
    (cx (K,14), cu (K-1,3)) to the terminal -m(t_f) objective.
    """
    K = ref.x.shape[0]
    n_int = K - 1
    if len(segments) != n_int:
        raise InvalidInputError("segment count must equal K-1")
    if mode is TrustMode.POLICY:
        if policy_controls is None:
            raise InvalidInputError("policy trust region needs policy_controls")
        policy_controls = np.asarray(policy_controls, dtype=float)
        if policy_controls.shape != (n_int, N_U):
            raise InvalidInputError("policy_controls must be (K-1, 3)")

    ubar = ref.u
    ubar_norm = np.linalg.norm(ubar, axis=1)
    if np.any(ubar_norm < 1e-9):
        bad = int(np.argmax(ubar_norm < 1e-9))
        raise LinearizationError(f"reference thrust vanishes at node {bad}")

    bld = _ProgramBuilder()
    X = bld.variables("x", (K, N_X))
    U = bld.variables("u", (n_int, N_U))
    NU = bld.variables("nu", (n_int, N_X))
    S = bld.variables("nu_abs", (n_int, N_X))
    n_eta = K if mode is TrustMode.REFERENCE else n_int
    ETA = bld.variables("eta", (n_eta,))

    # linear dynamics with virtual control: x+ - A x - B u - nu - z = 0
    r = np.arange(n_int * N_X).reshape(n_int, N_X)
    bld.zero.add(
        n_int * N_X,
        np.concatenate([
            r.ravel(),
            np.repeat(r, N_X, axis=1).ravel(),
            np.repeat(r, N_U, axis=1).ravel(),
            r.ravel(),
        ]),
        np.concatenate([
            X[1:].ravel(),
            np.tile(X[:-1], (1, N_X)).reshape(n_int, N_X, N_X).ravel(),
            np.tile(U, (1, N_X)).reshape(n_int, N_X, N_U).ravel(),
            NU.ravel(),
        ]),
        np.concatenate([
            np.ones(n_int * N_X),
            -segments.A.ravel(),
            -segments.B.ravel(),
            -np.ones(n_int * N_X),
        ]),
        -segments.z.ravel(),
    )
    # boundary pinning; final mass free per mask
    bld.zero.add(N_X, np.arange(N_X), X[0], 1.0, -bc.initial)
    fin = np.flatnonzero(bc.final_mask)
    bld.zero.add(fin.size, np.arange(fin.size), X[-1, fin], 1.0, -bc.final[fin])

    # mass floor
    bld.nonneg.add(K, np.arange(K), X[:, IDX_M], 1.0, -p.m_dry)
    # |nu| <= s elementwise
    m_nu = n_int * N_X
    idx = np.arange(m_nu)
    bld.nonneg.add(m_nu, np.concatenate([idx, idx]), np.concatenate([S.ravel(), NU.ravel()]),
                   np.concatenate([np.ones(m_nu), -np.ones(m_nu)]), 0.0)
    bld.nonneg.add(m_nu, np.concatenate([idx, idx]), np.concatenate([S.ravel(), NU.ravel()]),
                   np.concatenate([np.ones(m_nu), np.ones(m_nu)]), 0.0)
    # linearized minimum thrust: (ubar/|ubar|)^T u >= T_min
    nhat = ubar / ubar_norm[:, None]
    bld.nonneg.add(n_int, np.repeat(np.arange(n_int), N_U), U.ravel(), nhat.ravel(), -p.T_min)

    r_idx = X[:, IDX_R]
    q_idx = X[:, IDX_Q]
    w_idx = X[:, IDX_W]
    # angular-rate cone
    bld.socs(K, [([], p.omega_max)] + [([(w_idx[:, j], 1.0)], 0.0) for j in range(3)])
    # glide slope: tan(gamma) |r_xy| <= r_z
    tg = np.tan(p.gamma_gs)
    bld.socs(K, [([(r_idx[:, 2], 1.0)], 0.0), ([(r_idx[:, 0], tg)], 0.0), ([(r_idx[:, 1], tg)], 0.0)])
    # tilt: 1 - 2 (q_x^2 + q_y^2) >= cos(theta_max)
    tilt_radius = np.sqrt((1.0 - np.cos(p.theta_max)) / 2.0)
    bld.socs(K, [([], tilt_radius), ([(q_idx[:, 1], 1.0)], 0.0), ([(q_idx[:, 2], 1.0)], 0.0)])
    # max thrust
    bld.socs(n_int, [([], p.T_max)] + [([(U[:, j], 1.0)], 0.0) for j in range(3)])
    # gimbal: cos(delta) |u| <= u_z
    bld.socs(n_int, [([(U[:, 2], 1.0 / np.cos(p.delta_max))], 0.0)]
             + [([(U[:, j], 1.0)], 0.0) for j in range(3)])

    # trust-region epigraphs |(2 d, eta - 1)| <= eta + 1
    if mode is TrustMode.REFERENCE:
        trust_weight = weights.w_tr
        dx_rows = [(X[:, j], 2.0 * np.ones(K), -2.0 * ref.x[:, j]) for j in range(N_X)]
        # final node has no control term
        du_rows = [
            (U[:, j], 2.0 * np.ones(n_int), -2.0 * ubar[:, j]) for j in range(N_U)
        ]
        _trust_cones(bld, ETA[:n_int],
                     [(c[:n_int], v[:n_int], h[:n_int]) for c, v, h in dx_rows] + du_rows)
        _trust_cones(bld, ETA[n_int:], [(c[n_int:], v[n_int:], h[n_int:]) for c, v, h in dx_rows])
    else:
        trust_weight = weights.w_trp
        du_rows = [
            (U[:, j], 2.0 * np.ones(n_int), -2.0 * policy_controls[:, j]) for j in range(N_U)
        ]
        _trust_cones(bld, ETA, du_rows)

    c = np.zeros(bld.n)
    c[X[-1, IDX_M]] = -1.0
    c[S.ravel()] = weights.w_nu
    c[ETA] = trust_weight
    if running_cost is not None:
        cx, cu = running_cost
        c[X.ravel()] += np.asarray(cx, dtype=float).ravel()
        c[U.ravel()] += np.asarray(cu, dtype=float).ravel()

    A, b, n_zero, n_nonneg = bld.build(c)
    return ConicProgram(
        n=bld.n, c=c, A=A, b=b, n_zero=n_zero, n_nonneg=n_nonneg,
        soc_sizes=bld.soc_sizes, index=bld.index, mode=mode,
        trust_weight=trust_weight, nu_weight=weights.w_nu,
    )


def _trust_cones(bld: _ProgramBuilder, eta: np.ndarray, d_rows):
    """eta_k >= |d_k|^2, row j of d_k being ``vals * v[cols] + h`` (batched over k)."""
    if eta.size == 0:
        return
    rows = [([(eta, 1.0)], 1.0), ([(eta, 1.0)], -1.0)]
    rows += [([(cols, vals)], h) for cols, vals, h in d_rows]
    bld.socs(eta.size, rows)


def _to_clarabel_cones(program: ConicProgram):
    cones = []
    if program.n_zero:
        cones.append(clarabel.ZeroConeT(program.n_zero))
    if program.n_nonneg:
        cones.append(clarabel.NonnegativeConeT(program.n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(s) for s in program.soc_sizes)
    return cones


def _cone_violation(program: ConicProgram, s: np.ndarray) -> float:
    """How far the nonnegative and second-order rows of ``s`` sit outside their cones."""
    nn = s[program.n_zero: program.n_zero + program.n_nonneg]
    viol = float(np.max(-nn, initial=0.0))
    pos = program.n_zero + program.n_nonneg
    for size in program.soc_sizes:
        t, y = s[pos], s[pos + 1: pos + size]
        viol = max(viol, float(np.linalg.norm(y) - t))
        pos += size
    return max(viol, 0.0)


def cone_residuals(program: ConicProgram, v: np.ndarray) -> tuple[float, float]:
    """Max |equality residual| and max cone-membership violation of b - A v."""
    s = program.b - program.A @ v
    eq = float(np.max(np.abs(s[: program.n_zero]), initial=0.0))
    return eq, _cone_violation(program, s)


_STATUS_MAP = {
    "Solved": SolveStatus.OPTIMAL,
    "PrimalInfeasible": SolveStatus.INFEASIBLE,
    "DualInfeasible": SolveStatus.INFEASIBLE,
    "AlmostPrimalInfeasible": SolveStatus.INFEASIBLE,
    "AlmostDualInfeasible": SolveStatus.INFEASIBLE,
    "MaxIterations": SolveStatus.MAX_ITERATIONS,
    "MaxTime": SolveStatus.MAX_ITERATIONS,
}


def _clarabel_settings(settings: SolverSettings, attempt: str):
    cs = clarabel.DefaultSettings()
    cs.verbose = settings.verbose
    cs.max_iter = settings.max_iter
    scale = 1e-2 if attempt == "tight" else 1.0
    cs.tol_gap_abs = settings.tol_gap_abs * scale
    cs.tol_gap_rel = settings.tol_gap_rel * scale
    cs.tol_feas = settings.tol_feas * scale
    if attempt == "refine":
        cs.iterative_refinement_stop_ratio = 1.0
        cs.iterative_refinement_max_iter = 30
    else:
        cs.static_regularization_constant = settings.static_regularization
    return cs


def solve(program: ConicProgram, settings: SolverSettings | None = None) -> Solution:
    """Solve ``program``; failures come back as a status, never an exception.

    An optimal exit is only reported once the recomputed equality residual
    and cone violation meet ``settings.residual_tol``. Clarabel's own
    tolerances are relative, so a run that misses the bound is repeated with
    tolerances 100x tighter; one that stops short of full accuracy is
    retried with default regularization and extended iterative refinement.
    An "almost solved" exit still counts when its residuals meet the bound.
    """
    settings = settings or SolverSettings()
    P = sp.csc_matrix((program.n, program.n))
    cones = _to_clarabel_cones(program)
    sol = None
    attempts = ["base", "tight", "refine"]
    while attempts:
        attempt = attempts.pop(0)
        try:
            result = clarabel.DefaultSolver(
                P, program.c, program.A, program.b, cones, _clarabel_settings(settings, attempt)
            ).solve()
        except Exception:  # solver-side panic on malformed numerics
            continue
        raw = str(result.status)
        status = _STATUS_MAP.get(raw, SolveStatus.NUMERICAL_FAILURE)
        v = np.asarray(result.x, dtype=float)
        eq, viol = cone_residuals(program, v)
        accurate = max(eq, viol) <= settings.residual_tol
        if raw in ("Solved", "AlmostSolved") and accurate:
            return Solution(SolveStatus.OPTIMAL, v, float(program.c @ v), int(result.iterations),
                            eq, viol, float(result.solve_time), np.asarray(result.z, dtype=float))
        if status is SolveStatus.OPTIMAL:
            status = SolveStatus.NUMERICAL_FAILURE
        elif attempt == "base":
            attempts.remove("tight")  # tightening only helps runs that finished
        sol = Solution(status, None, np.nan, int(result.iterations),
                       solve_time=float(result.solve_time))
        if status is SolveStatus.INFEASIBLE:
            break
    return sol or Solution(SolveStatus.NUMERICAL_FAILURE, None, np.nan, 0)


def kkt_residuals(program: ConicProgram, solution: Solution) -> dict[str, float]:
    """Max-norm KKT residuals of an optimal primal-dual pair.

    ``primal``: equality rows of b - A v; ``cone``: violation of s in K;
    ``dual``: c + A^T z; ``dual_cone``: violation of z in K (self-dual);
    ``gap``: |c^T v + b^T z|, the complementarity s^T z.
    """
    if solution.primal is None or solution.dual is None:
        raise ExtractionError("KKT residuals need an optimal primal-dual pair")
    v, z = solution.primal, solution.dual
    eq, viol = cone_residuals(program, v)
    return {
        "primal": eq,
        "cone": viol,
        "dual": float(np.max(np.abs(program.c + program.A.T @ z), initial=0.0)),
        "dual_cone": _cone_violation(program, z),
        "gap": float(abs(program.c @ v + program.b @ z)),
    }


def extract_trajectory(program: ConicProgram, solution: Solution) -> TrajectoryIterate:
    if solution.status is not SolveStatus.OPTIMAL or solution.primal is None:
        raise ExtractionError(f"cannot extract from a {solution.status.value} solution")
    v = solution.primal
    return TrajectoryIterate(
        v[program.index["x"]].copy(), v[program.index["u"]].copy(), v[program.index["nu"]].copy()
    )


def write_program_text(program: ConicProgram, path) -> None:
    """Debug dump: header, cone layout, then one-based coordinate triplets."""
    A = program.A.tocoo()
    lines = [
        "# conic-program v1",
        f"dims {program.n_rows} {program.n}",
        f"cones zero {program.n_zero} nonneg {program.n_nonneg} soc "
        + " ".join(str(s) for s in program.soc_sizes),
        f"objective {np.count_nonzero(program.c)}",
    ]
    lines += [f"{j + 1} {float(program.c[j])!r}" for j in np.flatnonzero(program.c)]
    lines.append(f"matrix {A.nnz}")
    order = np.lexsort((A.col, A.row))
    lines += [f"{A.row[t] + 1} {A.col[t] + 1} {float(A.data[t])!r}" for t in order]
    lines.append(f"rhs {np.count_nonzero(program.b)}")
    lines += [f"{i + 1} {float(program.b[i])!r}" for i in np.flatnonzero(program.b)]
    Path(path).write_text("\n".join(lines) + "\n")
