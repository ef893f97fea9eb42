"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line with the measured values, then asserts
at the stated tolerance. The full-scale run is opt-in via PTRGPS_FULL=1.
"""

import os
import time

import numpy as np
import pytest
import scipy.sparse as sp

from ptrgps.bench import feasibility_report, init_benchmark
from ptrgps.cli import test_states as sample_test_states
from ptrgps.config import desk_defaults, from_dict
from ptrgps.data import (
    build_desk_grid,
    build_desk_validation_grid,
    build_training_grid,
    build_validation_grid,
    filter_convergent,
)
from ptrgps.gps import consistent_virtual_control, gps_run
from ptrgps.lqr import LqrWeights, NoiseSchedule, generate_samples, riccati_backward, stream
from ptrgps.policy import DEFAULT_DIMS, init_xavier
from ptrgps.ptr import PtrConfig, ptr_solve
from ptrgps.socp import ConicProgram, SolveStatus, kkt_residuals, solve
from ptrgps.transcription import (
    ReferenceTrajectory,
    flow,
    hover_controls,
    linearize_discretize,
    make_grid,
    propagate_nonlinear_zoh,
    straight_line_init,
)
from ptrgps.vehicle import N_X, BoundaryConditions, VehicleParams, landing_target, make_state

P = VehicleParams()
TARGET = landing_target(P)
GRID = make_grid(31, 5.0)
NOMINAL = make_state(2.0, [2.5, 0, 2.5], [0, 0, -1], [1, 0, 0, 0], [0, 0, 0])


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail

    return emit


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def random_feasible_reference(rng):
    """Nonlinear ZOH rollout of thrust inside the magnitude and gimbal bounds."""
    x0 = sample_test_states(desk_defaults(), int(rng.integers(1 << 30)))[0]
    x = straight_line_init(BoundaryConditions(x0, TARGET), GRID, P).x
    u = hover_controls(x[:-1], P)
    tilt = rng.uniform(0, 0.8 * P.delta_max, GRID.K - 1)
    az = rng.uniform(0, 2 * np.pi, GRID.K - 1)
    mag = np.clip(np.linalg.norm(u, axis=1) * rng.uniform(0.9, 1.1, GRID.K - 1), P.T_min, P.T_max)
    u = mag[:, None] * np.column_stack([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az),
                                        np.cos(tilt)])
    return propagate_nonlinear_zoh(x0, u, GRID, P), u


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_discretization_exactness(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_affine, worst_A, worst_B = 0.0, 0.0, 0.0
    h = 1e-6
    for _ in range(20):
        x, u = random_feasible_reference(rng)
        seg = linearize_discretize(ReferenceTrajectory(x, u), GRID, P)
        pred = (np.einsum("kij,kj->ki", seg.A, x[:-1]) + np.einsum("kij,kj->ki", seg.B, u)
                + seg.z)
        dense = flow(x[:-1], u, GRID.dt, P, substeps=1000)
        worst_affine = max(worst_affine, np.abs(pred - dense).max())
        A_fd = np.stack([(flow(x[:-1] + h * e, u, GRID.dt, P) - flow(x[:-1] - h * e, u, GRID.dt, P))
                         / (2 * h) for e in np.eye(N_X)], axis=2)
        B_fd = np.stack([(flow(x[:-1], u + h * e, GRID.dt, P) - flow(x[:-1], u - h * e, GRID.dt, P))
                         / (2 * h) for e in np.eye(3)], axis=2)
        for k in range(GRID.K - 1):
            worst_A = max(worst_A, relative_error(seg.A[k], A_fd[k]))
            worst_B = max(worst_B, relative_error(seg.B[k], B_fd[k]))
    elapsed = time.perf_counter() - t0
    ok = worst_affine <= 1e-8 and worst_A <= 1e-4 and worst_B <= 1e-4 and elapsed < 60
    verdict("discretization exactness", ok,
            f"max affine defect {worst_affine:.2e} (<= 1e-8), Jacobian rel err A {worst_A:.2e} "
            f"B {worst_B:.2e} (<= 1e-4), {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------------------
# Conic solver
# ---------------------------------------------------------------------------


def conic(c, A, b, n_zero=0, n_nonneg=0, socs=()):
    A = sp.csc_matrix(np.asarray(A, dtype=float))
    return ConicProgram(A.shape[1], np.asarray(c, dtype=float), A, np.asarray(b, dtype=float),
                        n_zero, n_nonneg, list(socs), {})


ANALYTIC = {
    # project a = (3, 4) onto the unit disc: y = a / 5, distance 4
    "ball projection": (conic([0, 0, 1], [[0, 0, -1], [-1, 0, 0], [0, -1, 0],
                                           [0, 0, 0], [-1, 0, 0], [0, -1, 0]],
                              [0, -3, -4, 1, 0, 0], socs=(3, 3)), [0.6, 0.8, 4.0], 4.0),
    "LP bound": (conic([1.0], [[-1.0]], [-3.0], n_nonneg=1), [3.0], 3.0),
    "LP equality corner": (conic([1, 2], [[1, 1], [-1, 0], [0, -1]], [2, 0, 0], n_zero=1,
                                 n_nonneg=2), [2.0, 0.0], 2.0),
    # max x1 + x2 on x1 + 2 x2 <= 4, 3 x1 + x2 <= 6, x >= 0: vertex (8/5, 6/5)
    "LP vertex": (conic([-1, -1], [[1, 2], [3, 1], [-1, 0], [0, -1]], [4, 6, 0, 0], n_nonneg=4),
                  [1.6, 1.2], -2.8),
}


def test_conic_solver_contract(verdict):
    worst, details = 0.0, []
    for name, (prog, x_star, f_star) in ANALYTIC.items():
        sol = solve(prog)
        res = max(kkt_residuals(prog, sol).values()) if sol.status is SolveStatus.OPTIMAL else np.inf
        err = max(np.abs(sol.primal - x_star).max(), abs(sol.objective - f_star)) \
            if sol.primal is not None else np.inf
        worst = max(worst, res)
        details.append(f"{name} kkt {res:.1e} err {err:.1e}")
        worst = max(worst, 0.0 if err <= 1e-6 else np.inf)
    verdict("conic solver contract", worst <= 1e-8, "; ".join(details) + " (KKT <= 1e-8)")


# ---------------------------------------------------------------------------
# PTR
# ---------------------------------------------------------------------------


def test_ptr_nominal_convergence(verdict):
    bc = BoundaryConditions(NOMINAL, TARGET)
    t0 = time.perf_counter()
    res = ptr_solve(bc, GRID, P, PtrConfig(eps_nu=1e-6, eps_tr=1e-3, max_iterations=50),
                    straight_line_init(bc, GRID, P))
    elapsed = time.perf_counter() - t0
    m_f = res.trajectory.x[-1, 0]
    ok = res.converged and res.iterations <= 50 and 1.83 <= m_f <= 1.90 and elapsed < 120
    verdict("PTR nominal convergence", ok,
            f"{res.status} in {res.iterations} iterations, final mass {m_f:.4f} "
            f"(in [1.83, 1.90]), {elapsed:.1f} s (< 120 s)")


# ---------------------------------------------------------------------------
# Policy gradient
# ---------------------------------------------------------------------------


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(99)
    mlp = init_xavier(DEFAULT_DIMS, rng)
    for b in mlp.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    theta = mlp.get_flat()
    worst, h = 0.0, 1e-6
    for _ in range(3):
        z, y = rng.normal(size=(1, 14)), rng.normal(size=(1, 3))
        _, gW, gb = mlp.loss_and_grad(z, y)
        grad = np.concatenate([a.ravel() for W, b in zip(gW, gb) for a in (W, b)])
        for j in rng.choice(mlp.n_params, 10, replace=False):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            mlp.set_flat(tp)
            lp = mlp.loss_and_grad(z, y)[0]
            mlp.set_flat(tm)
            lm = mlp.loss_and_grad(z, y)[0]
            mlp.set_flat(theta)
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-3))
    verdict("gradient correctness", worst <= 1e-5,
            f"max relative error {worst:.2e} over 10 parameters x 3 inputs (<= 1e-5)")


# ---------------------------------------------------------------------------
# LQR
# ---------------------------------------------------------------------------


class _Scalar:
    A = np.ones((1, 1, 1))
    B = np.ones((1, 1, 1))


def test_lqr_properties(verdict):
    scalar = riccati_backward(_Scalar, LqrWeights(np.eye(1), np.eye(1), np.eye(1)))
    k0 = scalar.K[0, 0, 0]
    bc = BoundaryConditions(NOMINAL, TARGET)
    res = ptr_solve(bc, GRID, P, PtrConfig(), straight_line_init(bc, GRID, P))
    seg = linearize_discretize(res.trajectory.as_reference(), GRID, P)
    iterate = consistent_virtual_control(res.trajectory, seg)
    gains = riccati_backward(seg, LqrWeights())
    asym = np.abs(gains.P - np.swapaxes(gains.P, 1, 2)).max()
    min_eig = np.linalg.eigvalsh(gains.P).min()
    quiet = generate_samples(iterate, seg, gains, 4, NoiseSchedule(0.0, 0.0, 0.0), stream(0))
    repro = max(np.abs(quiet.x - iterate.x).max(), np.abs(quiet.u - iterate.u).max())
    ok = asym == 0.0 and min_eig >= -1e-9 and repro <= 1e-12 and abs(k0 + 0.5) <= 1e-15
    verdict("LQR properties", ok,
            f"P asymmetry {asym:.1e}, min eigenvalue {min_eig:.3e}, zero-noise deviation "
            f"{repro:.1e} (<= 1e-12), scalar K(0) = {k0}")


# ---------------------------------------------------------------------------
# Desk-scale GPS and initialization benefit
# ---------------------------------------------------------------------------


def desk_pipeline(seed=0):
    cfg = desk_defaults()
    t0 = time.perf_counter()
    kept, _ = filter_convergent(build_desk_grid(), cfg.ptr, TARGET, cfg.gps.grid, P)
    res = gps_run(kept, build_desk_validation_grid(), TARGET, cfg.gps, P, seed=seed)
    return cfg, res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk():
    return desk_pipeline()


@pytest.mark.slow
def test_desk_gps_pipeline(verdict, desk):
    cfg, res, elapsed = desk
    report, _ = feasibility_report(res.mlp, res.normalizer, build_desk_validation_grid(),
                                   cfg.gps.grid, P, TARGET)
    n_iter = len(res.log.entries)
    ok = (n_iter <= 8 and elapsed < 1800 and report.n_failures == 0
          and report.position_error <= 0.05 and report.max_violation <= 0.05)
    verdict("desk-scale GPS", ok,
            f"{n_iter} iterations ({res.log.stopped_by}), {elapsed:.0f} s; over 8 validation "
            f"states mean terminal position error {report.position_error:.4f} (<= 0.05), mean "
            f"max violation {report.max_violation:.4f} (<= 0.05), {report.n_failures} failed")


@pytest.fixture(scope="session")
def benchmark(desk):
    cfg, res, _ = desk
    states = sample_test_states(cfg, 0)
    t0 = time.perf_counter()
    reports = {
        name: init_benchmark(name, states, cfg.sweep, TARGET, cfg.gps.grid, P, res.mlp,
                             res.normalizer)
        for name in ("policy", "straight-line")
    }
    return reports, time.perf_counter() - t0


@pytest.mark.slow
def test_initialization_benefit(verdict, benchmark):
    reports, elapsed = benchmark
    pol, sl = reports["policy"][0], reports["straight-line"][0]
    n_cells = len({(r["w_nu"], r["w_tr"]) for r in reports["policy"][1]})
    ok = (pol.n_states >= 10 and n_cells == 18 and pol.median <= sl.median
          and pol.success_rate >= sl.success_rate and elapsed < 1800)
    verdict("initialization benefit", ok,
            f"{pol.n_states} states x {n_cells} cells; policy median {pol.median:.1f} "
            f"(mean {pol.mean:.2f}, success {pol.success_rate:.0%}) vs straight-line median "
            f"{sl.median:.1f} (mean {sl.mean:.2f}, success {sl.success_rate:.0%}), {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_determinism(verdict, desk, benchmark, tmp_path):
    cfg, res, _ = desk
    _, again, _ = desk_pipeline()
    same_policy = np.array_equal(res.mlp.get_flat(), again.mlp.get_flat())
    res.log.write_csv(tmp_path / "a.csv")
    again.log.write_csv(tmp_path / "b.csv")
    same_log = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    val = build_desk_validation_grid()
    same_feas = (feasibility_report(res.mlp, res.normalizer, val, cfg.gps.grid, P, TARGET)
                 == feasibility_report(again.mlp, again.normalizer, val, cfg.gps.grid, P, TARGET))
    states = sample_test_states(cfg, 0)[:3]
    rerun = init_benchmark("policy", states, cfg.sweep, TARGET, cfg.gps.grid, P, again.mlp,
                           again.normalizer)
    first = benchmark[0]["policy"][1]
    same_bench = rerun[1] == [r for r in first if r["state"] < 3]
    ok = same_policy and same_log and same_feas and same_bench
    verdict("determinism", ok,
            f"policy weights identical {same_policy}, GPS log identical {same_log}, feasibility "
            f"report identical {same_feas}, benchmark rows identical {same_bench}")


# ---------------------------------------------------------------------------
# Full-scale reproduction (opt-in)
# ---------------------------------------------------------------------------


@pytest.mark.fullscale
@pytest.mark.skipif(os.environ.get("PTRGPS_FULL") != "1", reason="set PTRGPS_FULL=1 to run")
def test_full_scale_reproduction(verdict):
    cfg = from_dict({"scale": "full", "n_test": 100})
    threads = os.cpu_count() or 1
    kept, _ = filter_convergent(build_training_grid(), cfg.ptr, TARGET, cfg.gps.grid, P, threads)
    res = gps_run(kept, build_validation_grid(), TARGET, cfg.gps, P, seed=0, threads=threads)
    states = sample_test_states(cfg, 0)
    pol = init_benchmark("policy", states, cfg.sweep, TARGET, cfg.gps.grid, P, res.mlp,
                         res.normalizer, threads)[0]
    sl = init_benchmark("straight-line", states, cfg.sweep, TARGET, cfg.gps.grid, P,
                        threads=threads)[0]
    n_iter = len(res.log.entries)
    ok = (4 <= n_iter <= 8 and pol.mean <= 4 and pol.successes == 100 and sl.mean >= 5)
    verdict("full-scale reproduction", ok,
            f"{len(kept)} training states, GPS {n_iter} iterations (4 to 8); policy mean "
            f"{pol.mean:.2f} (<= 4), success {pol.successes}/100; straight-line mean "
            f"{sl.mean:.2f} (>= 5)")
