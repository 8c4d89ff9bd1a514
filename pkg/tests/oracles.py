"""Independent reference implementations used to cross-check the solvers.

Everything here is deliberately written with different algorithms than the
package under test: fine-step Runge-Kutta instead of matrix exponentials,
(dual) projected gradient instead of interior point, exhaustive enumeration
instead of branch-and-bound, grid search instead of the imputation QP. Slow
and simple on purpose.
"""

import itertools

import numpy as np

from interplan.miqp import fix_and_relax
from interplan.qp import QpConfig, solve_qp


def rk4_discretize(A, B, dt, substeps=1000):
    """Integrate xdot = A x + B u with u held, via RK4 at dt/substeps.

    Returns (Ad, Bd) acting on the stacked [x; u] like the ZOH pair does.
    """
    n, m = B.shape
    h = dt / substeps
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    X = np.eye(n + m)
    for _ in range(substeps):
        k1 = M @ X
        k2 = M @ (X + 0.5 * h * k1)
        k3 = M @ (X + 0.5 * h * k2)
        k4 = M @ (X + h * k3)
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X[:n, :n], X[:n, n:]


def pg_box_qp(Q, q, lb, ub, iters=200000, tol=1e-12):
    """Projected gradient (with momentum) for min x'Qx + q'x over a box.

    Momentum is dropped whenever it would increase the objective; a pure
    gradient step that fails to descend means we are at a fixed point, which
    is the stopping rule that survives semidefinite Q (plain small-step
    detection stalls in the flat directions).
    """
    n = q.shape[0]
    L = 2.0 * max(np.linalg.eigvalsh(Q).max(), 1e-12)
    step = 1.0 / L

    def f(v):
        return v @ Q @ v + q @ v

    x = np.clip(np.zeros(n), lb, ub)
    y, t = x.copy(), 1.0
    fx = f(x)
    for _ in range(iters):
        g = 2.0 * Q @ y + q
        x_new = np.clip(y - step * g, lb, ub)
        f_new = f(x_new)
        if f_new > fx:
            if t == 1.0:
                break
            y, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, fx, t = x_new, f_new, t_new
        g_x = 2.0 * Q @ x + q
        if np.max(np.abs(x - np.clip(x - step * g_x, lb, ub))) < tol:
            break
    return x


def dual_pg_qp(Q, q, A_in, b_in, A_eq=None, b_eq=None, iters=400000, tol=1e-13):
    """Projected gradient on the dual of a strictly convex QP.

    Requires Q positive definite. The primal minimizer for multipliers
    (lam, nu) is x = -0.5 Q^{-1} (q + A_in' lam + A_eq' nu); the dual gradient
    is the constraint violation at that x. lam is projected onto >= 0.
    """
    Qinv = np.linalg.inv(Q)
    me = 0 if A_eq is None else A_eq.shape[0]
    mi = A_in.shape[0]
    A = A_in if me == 0 else np.vstack([A_in, A_eq])
    b = b_in if me == 0 else np.concatenate([b_in, b_eq])
    L = 0.5 * max(np.linalg.eigvalsh(A @ Qinv @ A.T).max(), 1e-12)
    step = 1.0 / L
    y = np.zeros(mi + me)
    prev = y.copy()
    for _ in range(iters):
        x = -0.5 * Qinv @ (q + A.T @ y)
        g = A @ x - b
        y = y + step * g
        y[:mi] = np.maximum(y[:mi], 0.0)
        if np.max(np.abs(y - prev)) < tol:
            break
        prev = y.copy()
    x = -0.5 * Qinv @ (q + A.T @ y)
    return x, y[:mi], y[mi:]


def enumerate_miqp(miqp, qp_cfg=None):
    """Brute force over every integral assignment; returns (objective, x).

    (np.inf, None) when every assignment is infeasible. Integer bounds must
    be finite.
    """
    m = miqp.normalized()
    cfg = qp_cfg or QpConfig()
    ints = m.integers
    los = np.ceil(m.qp.lb[ints] - 1e-9).astype(int)
    his = np.floor(m.qp.ub[ints] + 1e-9).astype(int)
    best = (np.inf, None)
    for combo in itertools.product(*[range(lo, hi + 1) for lo, hi in zip(los, his)]):
        sol = solve_qp(fix_and_relax(m, np.array(combo, float)), cfg)
        if sol.status == "optimal" and sol.objective < best[0]:
            best = (sol.objective, sol.x)
    return best


def random_qp_pd(rng, n_max=10):
    """Random strictly convex QP with inequality rows and sometimes equalities,
    feasible by construction (an interior point is sampled first)."""
    n = rng.integers(2, n_max + 1)
    M = rng.standard_normal((n, n))
    Q = M @ M.T + (0.3 + rng.random()) * np.eye(n)
    x_star = rng.standard_normal(n)
    q = -2.0 * Q @ x_star + 0.3 * rng.standard_normal(n)
    mi = rng.integers(1, 2 * n + 1)
    A_in = rng.standard_normal((mi, n))
    x0 = rng.standard_normal(n)
    b_in = A_in @ x0 + 0.1 + rng.random(mi)
    if rng.random() < 0.4 and n > 2:
        me = rng.integers(1, n - 1)
        A_eq = rng.standard_normal((me, n))
        b_eq = A_eq @ x0
    else:
        A_eq = b_eq = None
    return Q, q, A_in, b_in, A_eq, b_eq


def random_miqp(rng, n_cont_max=12, n_int_max=8):
    """Random mixed-integer QP with enumerable integer ranges, feasible by
    construction. Returns a dict of pieces (assembled by the caller so tests
    can also build variants)."""
    nc = int(rng.integers(1, n_cont_max + 1))
    ni = int(rng.integers(1, n_int_max + 1))
    n = nc + ni
    M = rng.standard_normal((n, n))
    Q = M @ M.T + (0.2 + rng.random()) * np.eye(n)
    x_star = rng.standard_normal(n)
    q = -2.0 * Q @ x_star
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    ints = np.arange(nc, n)
    # Mostly binaries, occasionally a wider range; keeps enumeration small.
    for j in ints:
        if rng.random() < 0.7:
            lb[j], ub[j] = 0.0, 1.0
        else:
            lo = int(rng.integers(-2, 1))
            lb[j], ub[j] = lo, lo + int(rng.integers(1, 4))
    x_feas = rng.standard_normal(n)
    x_feas[ints] = np.round(np.clip(rng.integers(-2, 4, ni), lb[ints], ub[ints]))
    mi = int(rng.integers(1, n + 3))
    A_in = rng.standard_normal((mi, n))
    b_in = A_in @ x_feas + 0.05 + rng.random(mi)
    return Q, q, A_in, b_in, lb, ub, ints


def nv_cost_mpc_trace(alpha_p, steps, dt=0.2, tau=0.275, horizon=20,
                      gap0=20.0, v0=10.0, ego_v=10.0, c=1.0):
    """Neighbor data generated by an MPC that really minimizes the imputed
    cost family: alpha_p (s - s_ego)^2 + alpha_a a^2 under the same
    backward-difference dynamics the imputation assumes. Receding horizon,
    constant-velocity ego prediction, states advanced with the identical
    difference equations so the data is exactly dynamics-consistent.

    Returns an array of rows (s_nv, v_nv, a_nv, s_ego), one per step.
    """
    alpha_a = c - alpha_p
    H = horizon

    def mpc_u0(s0, v0_, a0, ego_s):
        # vars: s(1..H), v(1..H), a(1..H), u(0..H-1)
        n = 4 * H
        S = lambda i: i - 1
        V = lambda i: H + i - 1
        A = lambda i: 2 * H + i - 1
        U = lambda i: 3 * H + i
        rows, rhs = [], []
        for i in range(1, H + 1):
            r1 = np.zeros(n); r1[S(i)] = 1.0; r1[V(i)] = -dt
            if i > 1:
                r1[S(i - 1)] = -1.0
            rows.append(r1); rhs.append(s0 if i == 1 else 0.0)
            r2 = np.zeros(n); r2[V(i)] = 1.0; r2[A(i)] = -dt
            if i > 1:
                r2[V(i - 1)] = -1.0
            rows.append(r2); rhs.append(v0_ if i == 1 else 0.0)
            r3 = np.zeros(n); r3[A(i)] = 1.0; r3[U(i - 1)] = -dt / tau
            if i == 1:
                rows.append(r3); rhs.append((1.0 - dt / tau) * a0)
            else:
                r3[A(i - 1)] = -(1.0 - dt / tau)
                rows.append(r3); rhs.append(0.0)
        Q = np.zeros((n, n)); q = np.zeros(n); off = 0.0
        for i in range(1, H + 1):
            se = ego_s + ego_v * dt * i
            Q[S(i), S(i)] += alpha_p
            q[S(i)] += -2.0 * alpha_p * se
            off += alpha_p * se * se
            Q[A(i), A(i)] += alpha_a
        from interplan.qp import QuadraticProgram
        sol = solve_qp(QuadraticProgram(Q, q, np.array(rows), np.array(rhs),
                                        None, None, None, None, off),
                       QpConfig())
        assert sol.status == "optimal", sol.status
        return sol.x[U(0)]

    s_e = 0.0
    s, v, a = gap0, v0, 0.0
    rec = []
    for _ in range(steps):
        u = mpc_u0(s, v, a, s_e)
        a = a - (dt / tau) * (a - u)
        v = v + a * dt
        s = s + v * dt
        s_e += ego_v * dt
        rec.append((s, v, a, s_e))
    return np.array(rec)


def imputation_objective_at(window, cfg, alpha_p):
    """Residual objective at a fixed alpha split, duals solved as a bounded
    least-squares subproblem (scipy, independent of the package's IPM)."""
    from scipy.optimize import lsq_linear

    from interplan.imputation import residual_rows
    R, _ = residual_rows(window, cfg)
    r = window.r
    target = -(R[:, :2] @ np.array([alpha_p, cfg.c - alpha_p]))
    lb = np.concatenate([np.zeros(r), np.full(3 * r, -np.inf)])
    res = lsq_linear(R[:, 2:], target, bounds=(lb, np.full(4 * r, np.inf)))
    return float(np.sum((R[:, 2:] @ res.x - target) ** 2))


def grid_impute(window, cfg, coarse=0.01, fine=1e-4):
    """Two-stage grid search over alpha_p in [0, c]: coarse scan, then a fine
    scan around the best cell. Returns (alpha_p, objective)."""
    grid = np.arange(0.0, cfg.c + 1e-12, coarse * cfg.c)
    vals = [imputation_objective_at(window, cfg, g) for g in grid]
    best = grid[int(np.argmin(vals))]
    lo = max(0.0, best - coarse * cfg.c)
    hi = min(cfg.c, best + coarse * cfg.c)
    fgrid = np.arange(lo, hi + 1e-12, fine * cfg.c)
    fvals = [imputation_objective_at(window, cfg, g) for g in fgrid]
    j = int(np.argmin(fvals))
    return float(fgrid[j]), float(fvals[j])
