"""Dense convex QP solver with multiplier extraction.

Solves

    minimize    x' Q x + q' x + offset
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lb <= x <= ub

with Q symmetric positive semidefinite. Note the objective carries no 1/2
factor, so a weighted square w*(f'x + g)^2 lands on the Hessian diagonal with
weight w; the gradient is 2 Q x + q and the Lagrangian stationarity condition
reads

    2 Q x + q + A_in' lam + A_eq' nu - z_lo + z_up = 0,

with lam >= 0 on the inequality rows and z_lo, z_up >= 0 on the bounds.

The algorithm is a Mehrotra predictor-corrector interior-point method on the
inequality-only reduced problem: fixed variables (lb == ub) are substituted
out, equality constraints are eliminated through a nullspace basis, and the
remaining problem min z' Qz z + qz' z s.t. G z <= h is solved by damped Newton
steps on the perturbed KKT system. A final active-set polish solves the
equality-constrained KKT system on the identified active rows, which is what
pushes complementarity and stationarity residuals to ~1e-10 instead of the
~1e-8 an interior iterate settles at. Equality multipliers are recovered
afterwards from the stationarity condition (the dynamics rows of the motion
planning problems have full row rank, so the recovery is a well-posed least
squares solve).

Everything is deterministic: no randomization, no wall-clock dependencions in
the iteration itself.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space


@dataclass
class QuadraticProgram:
    Q: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None
    offset: float = 0.0

    @property
    def n(self):
        return self.q.shape[0]

    def normalized(self):
        """Copy with consistent shapes/dtypes and missing pieces as empties."""
        n = self.q.shape[0]
        Q = np.asarray(self.Q, float).reshape(n, n)
        q = np.asarray(self.q, float).reshape(n)
        A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, float).reshape(-1, n)
        b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).reshape(-1)
        A_in = np.zeros((0, n)) if self.A_in is None else np.asarray(self.A_in, float).reshape(-1, n)
        b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, float).reshape(-1)
        lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float).reshape(n)
        ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float).reshape(n)
        return QuadraticProgram(0.5 * (Q + Q.T), q, A_eq, b_eq, A_in, b_in, lb, ub, float(self.offset))

    def objective(self, x):
        x = np.asarray(x, float)
        return float(x @ self.Q @ x + self.q @ x + self.offset)


@dataclass
class QpConfig:
    tol_feas: float = 1e-7
    tol_stat: float = 1e-7
    tol_comp: float = 1e-7
    max_iterations: int = 60
    # Static regularization added to the Newton matrix; lifted automatically
    # if a factorization fails.
    reg: float = 1e-9


@dataclass
class QpSolution:
    status: str                  # optimal | infeasible | max_iterations
    x: np.ndarray = None
    objective: float = np.nan
    lam: np.ndarray = None       # multipliers of A_in rows, >= 0
    nu: np.ndarray = None        # multipliers of A_eq rows, sign free
    z_lo: np.ndarray = None      # multipliers of lb, >= 0
    z_up: np.ndarray = None      # multipliers of ub, >= 0
    iterations: int = 0
    residuals: dict = field(default_factory=dict)


def kkt_residuals(problem, sol):
    """Worst-case stationarity / feasibility / complementarity residuals.

    Returns a dict with keys stat, feas_eq, feas_in, feas_bounds, comp. Used
    both by the solver for self-reporting and by tests as the ground-truth
    optimality check.
    """
    p = problem.normalized()
    x, lam, nu = sol.x, sol.lam, sol.nu
    z_lo = sol.z_lo if sol.z_lo is not None else np.zeros(p.n)
    z_up = sol.z_up if sol.z_up is not None else np.zeros(p.n)
    g = 2.0 * p.Q @ x + p.q
    if p.A_in.shape[0]:
        g = g + p.A_in.T @ lam
    if p.A_eq.shape[0]:
        g = g + p.A_eq.T @ nu
    g = g - z_lo + z_up
    stat = float(np.max(np.abs(g))) if g.size else 0.0
    feas_eq = float(np.max(np.abs(p.A_eq @ x - p.b_eq))) if p.A_eq.shape[0] else 0.0
    slack = p.b_in - p.A_in @ x if p.A_in.shape[0] else np.zeros(0)
    feas_in = float(max(0.0, np.max(-slack))) if slack.size else 0.0
    lo_viol = np.where(np.isfinite(p.lb), p.lb - x, 0.0)
    up_viol = np.where(np.isfinite(p.ub), x - p.ub, 0.0)
    feas_bounds = float(max(0.0, lo_viol.max(initial=0.0), up_viol.max(initial=0.0)))
    comp = 0.0
    if slack.size:
        comp = float(np.max(np.abs(lam * slack)))
    lo_gap = np.where(np.isfinite(p.lb), x - p.lb, 0.0)
    up_gap = np.where(np.isfinite(p.ub), p.ub - x, 0.0)
    comp = max(comp, float(np.max(np.abs(z_lo * lo_gap), initial=0.0)),
               float(np.max(np.abs(z_up * up_gap), initial=0.0)))
    return {"stat": stat, "feas_eq": feas_eq, "feas_in": feas_in,
            "feas_bounds": feas_bounds, "comp": comp}


# ---------------------------------------------------------------------------
# Internal reduction: fixed variables out, equalities out, bounds to rows.


class _Reduced:
    """Inequality-only problem G z <= h equivalent to the original QP.

    Keeps the affine map x = x_base + X_free @ (x_p + Z z) needed to undo the
    reduction, plus bookkeeping to scatter multipliers back onto the original
    rows and bounds.
    """

    def __init__(self, p, tol_feas):
        n = p.n
        self.p = p
        self.status = None
        lb, ub = p.lb.copy(), p.ub.copy()
        if np.any(lb > ub + 1e-12):
            self.status = "infeasible"
            return
        fixed = np.isfinite(lb) & (ub - lb <= 1e-12)
        free = ~fixed
        self.fixed = fixed
        self.free = free
        x_fix = np.zeros(n)
        x_fix[fixed] = 0.5 * (lb[fixed] + ub[fixed])
        nf = int(free.sum())
        Qff = p.Q[np.ix_(free, free)]
        qf = p.q[free] + 2.0 * p.Q[np.ix_(free, fixed)] @ x_fix[fixed]
        off = p.offset + x_fix @ p.Q @ x_fix + p.q[fixed] @ x_fix[fixed]
        A_eq = p.A_eq[:, free] if p.A_eq.shape[0] else np.zeros((0, nf))
        b_eq = p.b_eq - p.A_eq[:, fixed] @ x_fix[fixed] if p.A_eq.shape[0] else np.zeros(0)
        self.x_fix = x_fix

        # Eliminate equalities: x_free = x_p + Z z.
        scale_eq = 1.0 + (np.abs(b_eq).max() if b_eq.size else 0.0)
        if A_eq.shape[0]:
            x_p, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
            if np.max(np.abs(A_eq @ x_p - b_eq)) > 1e3 * tol_feas * scale_eq:
                self.status = "infeasible"
                return
            Z = null_space(A_eq)
        else:
            x_p = np.zeros(nf)
            Z = np.eye(nf)
        self.x_p, self.Z = x_p, Z
        nz = Z.shape[1]

        # Inequality rows over the free variables, bounds included as rows.
        rows, rhs, tags = [], [], []
        if p.A_in.shape[0]:
            rows.append(p.A_in[:, free])
            rhs.append(p.b_in - p.A_in[:, fixed] @ x_fix[fixed])
            tags.extend(("in", i) for i in range(p.A_in.shape[0]))
        idx_free = np.where(free)[0]
        lo_rows = [j for j in range(nf) if np.isfinite(lb[idx_free[j]])]
        up_rows = [j for j in range(nf) if np.isfinite(ub[idx_free[j]])]
        if lo_rows:
            E = np.zeros((len(lo_rows), nf))
            E[np.arange(len(lo_rows)), lo_rows] = -1.0
            rows.append(E)
            rhs.append(-lb[idx_free[lo_rows]])
            tags.extend(("lo", idx_free[j]) for j in lo_rows)
        if up_rows:
            E = np.zeros((len(up_rows), nf))
            E[np.arange(len(up_rows)), up_rows] = 1.0
            rows.append(E)
            rhs.append(ub[idx_free[up_rows]])
            tags.extend(("up", idx_free[j]) for j in up_rows)
        Gx = np.vstack(rows) if rows else np.zeros((0, nf))
        h = np.concatenate(rhs) if rhs else np.zeros(0)
        self.tags = tags

        if nz == 0:
            # Equalities pin the point entirely.
            self.pinned = True
            x_red = x_p
            viol = Gx @ x_red - h if Gx.shape[0] else np.zeros(0)
            if viol.size and np.any(viol > tol_feas * (1.0 + np.abs(h))):
                self.status = "infeasible"
                return
            self.Qz = np.zeros((0, 0))
            self.qz = np.zeros(0)
            self.G = np.zeros((0, 0))
            self.h = np.zeros(0)
            return
        self.pinned = False

        self.Qz = Z.T @ Qff @ Z
        self.qz = Z.T @ (2.0 * Qff @ x_p + qf)
        self.off = off + x_p @ Qff @ x_p + qf @ x_p
        G = Gx @ Z
        h = h - Gx @ x_p
        # Rows whose coefficients vanished (typically after variables were
        # pinned) are vacuous or contradictory constants; settle them here.
        if G.shape[0]:
            rmax = np.abs(G).max(axis=1, initial=0.0)
            dead = rmax <= 1e-10 * (1.0 + np.abs(h))
            if np.any(dead & (h < -tol_feas * (1.0 + np.abs(h)))):
                self.status = "infeasible"
                return
            if np.any(dead):
                keep = ~dead
                G, h = G[keep], h[keep]
                self.tags = [t for t, k in zip(self.tags, keep) if k]
        # Row equilibration keeps the big-M rows from wrecking the Newton
        # system conditioning; multipliers are mapped back exactly.
        rn = np.maximum(np.abs(G).max(axis=1, initial=0.0), 1e-12) if G.shape[0] else np.zeros(0)
        self.row_scale = rn
        self.G = G / rn[:, None] if G.shape[0] else G
        self.h = h / rn if h.size else h

    def expand(self, z, lam_rows):
        """Map a reduced solution back to x, lam, z_lo, z_up on the original."""
        p = self.p
        n = p.n
        x = self.x_fix.copy()
        x_free = self.x_p + (self.Z @ z if z.size else 0.0)
        x[self.free] = x_free
        # Clip microscopic bound violations left by the interior iterate.
        x = np.minimum(np.maximum(x, p.lb), p.ub)
        lam = np.zeros(p.A_in.shape[0])
        z_lo = np.zeros(n)
        z_up = np.zeros(n)
        if lam_rows.size:
            lam_orig = lam_rows / self.row_scale
            for (kind, i), v in zip(self.tags, lam_orig):
                if kind == "in":
                    lam[i] = v
                elif kind == "lo":
                    z_lo[i] = v
                else:
                    z_up[i] = v
        return x, lam, z_lo, z_up


def _ipm(Qz, qz, G, h, cfg, z0=None, phase1=True):
    """Mehrotra predictor-corrector on min z'Qz z + qz'z s.t. G z <= h.

    Returns (status, z, lam, iterations). status is one of "optimal",
    "infeasible", "max_iterations". Infeasibility is certified through a
    Farkas point (G'y ~ 0, h'y < 0) scraped off the diverging multipliers,
    or failing that by a phase-1 subproblem (disabled via phase1 when we
    already are that subproblem).
    """
    m, nz = G.shape
    if m == 0:
        # Unconstrained: least-norm stationary point.
        z, *_ = np.linalg.lstsq(2.0 * Qz + cfg.reg * np.eye(nz), -qz, rcond=None)
        return "optimal", z, np.zeros(0), 0

    hw = 1.0 + np.abs(h)              # per-row feasibility scale
    scale_q = 1.0 + np.abs(qz).max(initial=0.0)
    reg = cfg.reg * (1.0 + np.trace(Qz) / max(nz, 1))

    if z0 is not None:
        z = z0.copy()
    else:
        H0 = 2.0 * Qz + reg * np.eye(nz)
        try:
            z = np.linalg.solve(H0, -qz)
        except np.linalg.LinAlgError:
            z = np.zeros(nz)
        # Zero-curvature directions with linear cost blow this start up by
        # 1/reg; a huge start point is worse than none at all.
        zn = np.abs(z).max(initial=0.0)
        if not np.isfinite(zn) or zn > 1e3:
            z = np.zeros(nz)
    r = h - G @ z
    s = np.maximum(r, 1.0)
    lam = np.ones(m)

    best = None
    for it in range(1, cfg.max_iterations + 1):
        r_d = 2.0 * Qz @ z + qz + G.T @ lam
        r_p = G @ z + s - h
        mu = s @ lam / m
        if not (np.isfinite(mu) and np.isfinite(r_d).all() and np.isfinite(r_p).all()):
            break
        stat = np.abs(r_d).max() / scale_q
        feas = np.max(np.abs(r_p) / hw)
        comp = mu
        score = max(stat, feas, comp)
        if best is None or score < best[0]:
            best = (score, z.copy(), lam.copy(), it)
        if stat <= 0.1 * cfg.tol_stat and feas <= 0.1 * cfg.tol_feas and mu <= 0.1 * cfg.tol_comp:
            return "optimal", z, lam, it

        # Farkas check on the normalized multipliers once they start running away.
        lam_norm = lam.max()
        if lam_norm > 1e7:
            y = lam / lam_norm
            if np.abs(G.T @ y).max() <= 1e-6 and h @ y < -1e-6:
                return "infeasible", z, lam, it

        if s.min() <= 0.0 or lam.min() <= 0.0:
            break
        w = lam / s
        M = 2.0 * Qz + (G.T * w) @ G + reg * np.eye(nz)
        if not np.isfinite(M).all():
            break
        try:
            c_fact = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            try:
                c_fact = np.linalg.cholesky(M + (1e-8 + 1e3 * reg) * np.eye(nz))
            except np.linalg.LinAlgError:
                break

        def newton(rs):
            # rs is the complementarity target: the step solves S lam -> rs.
            rhs = -(2.0 * Qz @ z + qz) - G.T @ ((rs + lam * r_p) / s)
            dz = np.linalg.solve(c_fact.T, np.linalg.solve(c_fact, rhs))
            ds = -r_p - G @ dz
            dlam = (rs - lam * ds) / s - lam
            return dz, ds, dlam

        # Affine scaling step.
        dz_a, ds_a, dlam_a = newton(np.zeros(m))
        a_p = _step_len(s, ds_a)
        a_d = _step_len(lam, dlam_a)
        mu_aff = (s + a_p * ds_a) @ (lam + a_d * dlam_a) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1
        sigma = min(max(sigma, 1e-8), 0.99)

        # Corrector.
        rs = sigma * mu - ds_a * dlam_a
        dz, ds, dlam = newton(rs)
        tau = 0.995 if mu > 1e-6 else 0.9999
        a_p = tau * _step_len(s, ds)
        a_d = tau * _step_len(lam, dlam)
        alpha = min(a_p, a_d, 1.0)
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam

    if not phase1:
        return "max_iterations", best[1], best[2], cfg.max_iterations

    # Out of iterations: either genuinely hard or infeasible. Decide with a
    # phase-1 problem min t s.t. G z - t*hw <= h (t is the worst relative
    # violation), started from the best iterate, bounded once t is floored.
    t0 = max(0.0, ((G @ best[1] - h) / hw).max()) + 1.0
    Gp = np.hstack([G, -hw[:, None]])
    Gp = np.vstack([Gp, np.zeros((1, nz + 1))])
    Gp[-1, -1] = -1.0
    hp = np.concatenate([h, [t0 + 1.0]])
    Qp = np.zeros((nz + 1, nz + 1))
    Qp[:nz, :nz] = 1e-10 * np.eye(nz)
    qp_lin = np.zeros(nz + 1)
    qp_lin[-1] = 1.0
    sub = QpConfig(max_iterations=100, tol_feas=1e-9, tol_stat=1e-9, tol_comp=1e-9)
    zp0 = np.concatenate([best[1], [t0]])
    st, zt, _, _ = _ipm(Qp, qp_lin, Gp, hp, sub, z0=zp0, phase1=False)
    if st != "max_iterations" and zt is not None and zt[-1] > 1e-7:
        return "infeasible", best[1], best[2], cfg.max_iterations
    return "max_iterations", best[1], best[2], cfg.max_iterations


def _step_len(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _polish(red, z, lam, cfg):
    """Exact KKT solve on the active rows identified by the interior iterate."""
    G, h, Qz, qz = red.G, red.h, red.Qz, red.qz
    m, nz = G.shape
    if m == 0:
        return z, lam
    s = h - G @ z
    act = np.where((lam > s) | (s < 1e-9 * (1.0 + np.abs(h))))[0]
    if act.size > nz:
        # Keep the strongest multipliers; the rest are degenerate duplicates.
        act = act[np.argsort(-lam[act])[:nz]]
        act.sort()
    Ga = G[act]
    k = act.size
    K = np.zeros((nz + k, nz + k))
    K[:nz, :nz] = 2.0 * Qz + 1e-11 * np.eye(nz)
    K[:nz, nz:] = Ga.T
    K[nz:, :nz] = Ga
    K[nz:, nz:] = -1e-11 * np.eye(k)
    rhs = np.concatenate([-qz, h[act]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return z, lam
    z_new = sol[:nz]
    lam_act = sol[nz:]
    if k and lam_act.min() < -1e-9:
        return z, lam
    viol = G @ z_new - h
    if viol.size and np.any(viol > 1e-9 * (1.0 + np.abs(h))):
        return z, lam
    lam_new = np.zeros(m)
    lam_new[act] = np.maximum(lam_act, 0.0)
    # Accept only if it does not regress the stationarity residual.
    r_old = np.abs(2.0 * Qz @ z + qz + G.T @ lam).max(initial=0.0)
    r_new = np.abs(2.0 * Qz @ z_new + qz + G.T @ lam_new).max(initial=0.0)
    if r_new <= r_old + 1e-12:
        return z_new, lam_new
    return z, lam


def solve_qp(problem, config=None):
    """Solve a convex QP; returns a QpSolution with primal and dual values."""
    cfg = config or QpConfig()
    p = problem.normalized()
    red = _Reduced(p, cfg.tol_feas)
    if red.status == "infeasible":
        return QpSolution(status="infeasible")

    if red.pinned:
        z = np.zeros(0)
        lam_rows = np.zeros(len(red.tags))
        status, iters = "optimal", 0
    else:
        status, z, lam_rows, iters = _ipm(red.Qz, red.qz, red.G, red.h, cfg)
        if status == "infeasible":
            return QpSolution(status="infeasible", iterations=iters)
        z, lam_rows = _polish(red, z, lam_rows, cfg)

    x, lam, z_lo, z_up = red.expand(z, lam_rows)

    # Recover equality multipliers from stationarity on the free coordinates.
    g = 2.0 * p.Q @ x + p.q
    if p.A_in.shape[0]:
        g = g + p.A_in.T @ lam
    g = g - z_lo + z_up
    if p.A_eq.shape[0]:
        nu, *_ = np.linalg.lstsq(p.A_eq[:, red.free].T, -g[red.free], rcond=None)
    else:
        nu = np.zeros(0)
    # Fixed variables absorb their stationarity residual into bound duals.
    if red.fixed.any():
        gf = g[red.fixed] + (p.A_eq[:, red.fixed].T @ nu if p.A_eq.shape[0] else 0.0)
        idx = np.where(red.fixed)[0]
        z_lo[idx] += np.maximum(gf, 0.0)
        z_up[idx] += np.maximum(-gf, 0.0)

    sol = QpSolution(status=status, x=x, objective=p.objective(x),
                     lam=lam, nu=nu, z_lo=z_lo, z_up=z_up, iterations=iters)
    sol.residuals = kkt_residuals(p, sol)
    if status == "max_iterations":
        # The iteration path ran out, but the polished point may still satisfy
        # the optimality conditions; the residuals are the certificate.
        scale = 1.0 + max(np.abs(p.q).max(initial=0.0), abs(p.objective(x)))
        r = sol.residuals
        if (r["stat"] <= cfg.tol_stat * scale and r["comp"] <= cfg.tol_comp * scale
                and max(r["feas_eq"], r["feas_in"], r["feas_bounds"]) <= cfg.tol_feas * scale):
            sol.status = "optimal"
    return sol


def dump_qp(problem, path, legend=None):
    """Write a problem as plain text: sizes, then dense row-major matrices."""
    p = problem.normalized()
    with open(path, "w") as f:
        f.write(f"n {p.n} m_eq {p.A_eq.shape[0]} m_in {p.A_in.shape[0]}\n")
        f.write(f"offset {p.offset!r}\n")
        if legend:
            f.write("legend " + " ".join(f"{name}:{i}" for name, i in legend) + "\n")
        for name, arr in [("Q", p.Q), ("q", p.q), ("A_eq", p.A_eq), ("b_eq", p.b_eq),
                          ("A_in", p.A_in), ("b_in", p.b_in), ("lb", p.lb), ("ub", p.ub)]:
            arr = np.atleast_2d(arr)
            f.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                f.write(" ".join(repr(v) for v in row) + "\n")
