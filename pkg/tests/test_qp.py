"""QP solver: analytic cases, KKT residuals, and projected-gradient oracles."""

import numpy as np
import pytest

from interplan.qp import QpConfig, QuadraticProgram, kkt_residuals, solve_qp
from oracles import dual_pg_qp, pg_box_qp, random_qp_pd

TOL = 1e-7


def test_equality_constrained_analytic():
    # min (x-1)^2 + (y-2)^2  s.t. x + y = 1  ->  x = (0, 1), nu = 2, f = 2.
    p = QuadraticProgram(Q=np.eye(2), q=np.array([-2.0, -4.0]), offset=5.0,
                         A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([1.0]))
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.x, [0.0, 1.0], atol=1e-8)
    assert abs(sol.objective - 2.0) < 1e-8
    assert abs(sol.nu[0] - 2.0) < 1e-7


def test_single_inequality_analytic():
    # min x^2 s.t. x >= 1 expressed as a row: lam = 2 at x = 1.
    p = QuadraticProgram(Q=np.array([[1.0]]), q=np.zeros(1),
                         A_in=np.array([[-1.0]]), b_in=np.array([-1.0]))
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert abs(sol.x[0] - 1.0) < 1e-8
    assert abs(sol.lam[0] - 2.0) < 1e-7
    r = kkt_residuals(p, sol)
    assert max(r.values()) < TOL


def test_bound_multiplier():
    # Same problem but through lb: the bound dual carries the 2.
    p = QuadraticProgram(Q=np.array([[1.0]]), q=np.zeros(1),
                         lb=np.array([1.0]), ub=np.array([np.inf]))
    sol = solve_qp(p)
    assert abs(sol.x[0] - 1.0) < 1e-8
    assert abs(sol.z_lo[0] - 2.0) < 1e-7


def test_unconstrained():
    p = QuadraticProgram(Q=np.array([[1.0]]), q=np.zeros(1))
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert abs(sol.x[0]) < 1e-9
    assert abs(sol.objective) < 1e-12


def test_degenerate_psd_flat_direction():
    # y is cost-free but boxed; any y is optimal, objective must still be 0.
    p = QuadraticProgram(Q=np.diag([1.0, 0.0]), q=np.zeros(2),
                         lb=np.array([-np.inf, -1.0]), ub=np.array([np.inf, 2.0]))
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert abs(sol.objective) < 1e-9
    assert -1.0 - 1e-9 <= sol.x[1] <= 2.0 + 1e-9


def test_infeasible_bounds():
    p = QuadraticProgram(Q=np.eye(1), q=np.zeros(1),
                         lb=np.array([1.0]), ub=np.array([0.0]))
    assert solve_qp(p).status == "infeasible"


def test_infeasible_rows():
    # x >= 1 and x <= 0 as rows.
    p = QuadraticProgram(Q=np.eye(1), q=np.zeros(1),
                         A_in=np.array([[-1.0], [1.0]]), b_in=np.array([-1.0, 0.0]))
    assert solve_qp(p).status == "infeasible"


def test_infeasible_equalities():
    p = QuadraticProgram(Q=np.eye(2), q=np.zeros(2),
                         A_eq=np.array([[1.0, 1.0], [1.0, 1.0]]),
                         b_eq=np.array([1.0, 2.0]))
    assert solve_qp(p).status == "infeasible"


def test_fixed_variables_substituted():
    # lb == ub pins x0; the rest optimizes around it.
    p = QuadraticProgram(Q=np.eye(2), q=np.array([0.0, -2.0]),
                         lb=np.array([3.0, -np.inf]), ub=np.array([3.0, np.inf]))
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.x, [3.0, 1.0], atol=1e-9)
    r = kkt_residuals(p, sol)
    assert max(r.values()) < TOL


def test_big_m_scaled_rows():
    # Mixed O(1) and O(1e4) rows; equilibration keeps the duals usable.
    M = 1.0e4
    p = QuadraticProgram(Q=np.eye(2), q=np.array([-2.0, 0.0]),
                         A_in=np.array([[1.0, M], [-1.0, 0.0]]),
                         b_in=np.array([M, 0.0]),
                         lb=np.array([-np.inf, 0.0]), ub=np.array([np.inf, 1.0]))
    sol = solve_qp(p)
    assert sol.status == "optimal"
    r = kkt_residuals(p, sol)
    assert r["feas_in"] < 1e-6 and r["comp"] < 1e-5 * M


def test_random_pd_against_dual_projected_gradient():
    rng = np.random.default_rng(42)
    for _ in range(40):
        Q, q, A_in, b_in, A_eq, b_eq = random_qp_pd(rng)
        p = QuadraticProgram(Q=Q, q=q, A_in=A_in, b_in=b_in, A_eq=A_eq, b_eq=b_eq)
        sol = solve_qp(p)
        assert sol.status == "optimal"
        r = kkt_residuals(p, sol)
        assert r["stat"] < TOL * (1 + np.abs(q).max())
        assert r["feas_in"] < TOL and r["feas_eq"] < TOL and r["comp"] < TOL * 10
        x_ref, _, _ = dual_pg_qp(Q, q, A_in, b_in, A_eq, b_eq)
        assert p.objective(x_ref) >= sol.objective - 1e-6
        assert abs(p.objective(x_ref) - sol.objective) < 1e-6


def test_random_psd_box_against_projected_gradient():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = int(rng.integers(2, 9))
        M = rng.standard_normal((max(1, n - 2), n))
        Q = M.T @ M                      # rank-deficient PSD on purpose
        q = rng.standard_normal(n)
        lb = -1.0 - rng.random(n)
        ub = 1.0 + rng.random(n)
        p = QuadraticProgram(Q=Q, q=q, lb=lb, ub=ub)
        sol = solve_qp(p)
        assert sol.status == "optimal"
        x_ref = pg_box_qp(Q, q, lb, ub)
        assert abs(p.objective(x_ref) - sol.objective) < 1e-6


def test_deterministic():
    rng = np.random.default_rng(11)
    Q, q, A_in, b_in, A_eq, b_eq = random_qp_pd(rng)
    p = QuadraticProgram(Q=Q, q=q, A_in=A_in, b_in=b_in, A_eq=A_eq, b_eq=b_eq)
    a = solve_qp(p)
    b = solve_qp(p)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.lam.tobytes() == b.lam.tobytes()


def test_dump_roundtrip_text(tmp_path):
    p = QuadraticProgram(Q=np.eye(2), q=np.array([1.0, -1.0]),
                         A_in=np.array([[1.0, 2.0]]), b_in=np.array([3.0]))
    path = tmp_path / "prob.txt"
    from interplan.qp import dump_qp
    dump_qp(p, path, legend=[("x", 0), ("y", 1)])
    text = path.read_text()
    assert "n 2 m_eq 0 m_in 1" in text
    assert "legend x:0 y:1" in text
    assert repr(2.0) in text
