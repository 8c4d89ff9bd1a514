"""Mixed-integer lane-change planning with a co-optimized neighbor.

The ego vehicle must leave lane 1 (blocked by a stopped obstacle ahead) and
merge into lane 2, which is occupied by a neighbor vehicle (NV). Instead of
treating the NV prediction as fixed, the joint problem also decides an
acceleration input for the NV and charges it through a two-weight cost:
alpha_p penalizes longitudinal separation between NV and ego ("the NV wants
to stay close"), alpha_a penalizes NV acceleration activity ("the NV wants
comfort"). The balance between the two is what imputation estimates online;
a proximity-heavy NV is modeled as willing to react, a comfort-heavy NV as
indifferent, and the ego's plan changes accordingly.

Collision avoidance is encoded with big-M indicator rows. Per planning step
there is one ahead/behind binary per obstacle pair and two lane indicators
(mu1, mu2) that are forced by the ego's lateral position, tied by a
one-lane-at-a-time equality, and in turn activate the gap rows for the lane
the ego occupies. Lane membership means being within delta of the lane
center. The big-M coefficients are sized from the reachable envelope of the
spawn states rather than a global constant (cfg.M only caps them), so a
fractional binary buys the relaxation little and branch-and-bound closes the
gap in few nodes. Slack exists only on the stopped-obstacle rows so that a
tight spawn can never make the problem structurally infeasible; the NV rows
are hard.

Builders:

  build_aimpc              joint ego/NV problem, NV cost weighted by alpha
  build_joint_fixed_alpha  same problem with alpha pinned to (c/2, c/2)
  build_baseline_cv        NV frozen to a constant-velocity prediction,
                           no NV decision variable and no NV cost
  build_general            V vehicles on L lanes, pairwise gap binaries,
                           per-lane indicators with a one-lane-at-a-time row

All builders default to a condensed decision vector (states eliminated
through the closed-form rollout). form="explicit" keeps the states as
decision variables tied by equality rows; the feasible set and cost are the
same, and the explicit row structure is easy to audit in tests.

Planner / GeneralPlanner wrap the builders into a receding-horizon step with
time-shifted warm starts and a braking fail-safe.
"""

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .miqp import MiqpConfig, MiqpSolution, MixedIntegerQP, fix_and_relax, solve_miqp
from .qp import QuadraticProgram, dump_qp, solve_qp
from .vehicles import A, DEFAULT_LIMITS, L, R, S, V, AccelLimits, ego_discrete, nv_discrete

PLANNER_KINDS = ("aimpc", "joint_fixed", "baseline_cv")


@dataclass(frozen=True)
class EgoCostWeights:
    q_v: float = 10.0          # velocity tracking
    q_a: float = 30.0          # acceleration state and command
    q_da: float = 100.0        # acceleration change
    q_dl: float = 1000.0       # lane position / lane command change
    q_slack: float = 1.0e4     # obstacle slack, must dominate the others
    v_ref: float = 10.0


@dataclass(frozen=True)
class AlphaWeights:
    """NV cost split: alpha_p on proximity, alpha_a on acceleration.

    Normalized so alpha_p + alpha_a = c; only the ratio matters for the
    planner, c fixes the scale of the NV block against the ego weights.
    """
    alpha_p: float
    alpha_a: float

    @property
    def c(self):
        return self.alpha_p + self.alpha_a

    @staticmethod
    def equal(c=1.0):
        return AlphaWeights(0.5 * c, 0.5 * c)

    def validate(self):
        if self.alpha_p < -1e-9 or self.alpha_a < -1e-9:
            raise ValueError(f"alpha must be nonnegative, got {self}")


@dataclass(frozen=True)
class PlannerConfig:
    N: int = 20                   # horizon steps
    dt: float = 0.2               # planning period, s
    M: float = 1.0e4              # big-M, far above any reachable position
    d_gap: float = 10.0           # minimum bumper gap, m
    delta: float = 0.5            # lane membership half-width
    lanes: int = 2
    nv_gap_margin: float = 1.5    # extra gap vs. the NV absorbing prediction
                                  # error; kills zero-margin merge plans that
                                  # a replan one period later cannot honor
    limits: AccelLimits = field(default_factory=lambda: DEFAULT_LIMITS)


@dataclass(frozen=True)
class GeneralVehicle:
    """One participant of the multi-vehicle problem (vehicle 0 is the ego)."""
    state: np.ndarray             # [s, v, a, l, r]
    w_v: float = 10.0
    w_a: float = 30.0
    v_ref: float = 10.0
    w_dl: float = 0.0             # optional in-plan lane command smoothing
    alpha: AlphaWeights = None    # optional coupling terms against vehicle 0


class Layout:
    """Named blocks of the stacked decision vector."""

    def __init__(self, blocks):
        self.blocks = {}
        off = 0
        for name, count in blocks:
            self.blocks[name] = slice(off, off + count)
            off += count
        self.size = off

    def sl(self, name):
        return self.blocks[name]

    def start(self, name):
        return self.blocks[name].start

    def legend(self, step0=None):
        """(name, index) pairs; step0 maps block name -> first step number."""
        out = []
        for name, sl in self.blocks.items():
            base = 0 if step0 is None else step0.get(name, 0)
            for i in range(sl.stop - sl.start):
                out.append((f"{name}[{base + i}]", sl.start + i))
        return out


def _rollout_rows(model, x0, u_cols, n, n_steps):
    """Affine rows for each state over the horizon: x(k) = C[k] z + o[k].

    u_cols: one array of variable indices per control channel, length n_steps.
    """
    nx, nu = model.B.shape
    coeff = np.zeros((n_steps + 1, nx, n))
    off = np.zeros((n_steps + 1, nx))
    off[0] = x0
    for k in range(n_steps):
        coeff[k + 1] = model.A @ coeff[k]
        off[k + 1] = model.A @ off[k]
        for j in range(nu):
            coeff[k + 1, :, u_cols[j][k]] += model.B[:, j]
    return coeff, off


def _state_var_rows(x0, block_start, nx, n, n_steps):
    """Explicit-form counterpart of _rollout_rows: unit rows into the state
    block for k >= 1, constants at k = 0."""
    coeff = np.zeros((n_steps + 1, nx, n))
    off = np.zeros((n_steps + 1, nx))
    off[0] = x0
    for k in range(1, n_steps + 1):
        for i in range(nx):
            coeff[k, i, block_start + (k - 1) * nx + i] = 1.0
    return coeff, off


class _CostStack:
    """Accumulates weighted squares w*(row.z + const)^2 and linear terms into
    f(z) = z'Qz + q'z + offset (no 1/2 convention)."""

    def __init__(self, n):
        self.n = n
        self.rows = []
        self.weights = []
        self.consts = []
        self.q_lin = np.zeros(n)

    def add_sq(self, w, row, const=0.0):
        if w == 0.0:
            return
        self.rows.append(row)
        self.weights.append(w)
        self.consts.append(const)

    def add_lin(self, w, idx):
        self.q_lin[idx] += w

    def build(self):
        if not self.rows:
            return np.zeros((self.n, self.n)), self.q_lin.copy(), 0.0
        R = np.vstack(self.rows)
        w = np.asarray(self.weights)
        c = np.asarray(self.consts)
        Q = R.T @ (w[:, None] * R)
        q = 2.0 * R.T @ (w * c) + self.q_lin
        return Q, q, float(w @ (c * c))


class _RowStack:
    """Accumulates inequality rows sum_i c_i expr_i + sum_j d_j z_j <= rhs."""

    def __init__(self, n):
        self.n = n
        self.rows = []
        self.rhs = []
        self.labels = []

    def add(self, label, exprs, vars_, rhs):
        """exprs: (coef, row, off) triples; vars_: (coef, index) pairs."""
        row = np.zeros(self.n)
        for coef, crow, coff in exprs:
            row += coef * crow
            rhs -= coef * coff
        for coef, idx in vars_:
            row[idx] += coef
        self.rows.append(row)
        self.rhs.append(rhs)
        self.labels.append(label)

    def build(self):
        if not self.rows:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.vstack(self.rows), np.asarray(self.rhs)


@dataclass
class LaneChangeProblem:
    miqp: MixedIntegerQP
    layout: Layout
    row_labels: list
    eq_labels: list
    cfg: PlannerConfig
    weights: EgoCostWeights
    alpha: AlphaWeights          # None for the constant-velocity baseline
    form: str
    with_nv: bool                # NV co-optimized (False = CV baseline)
    x_ego0: np.ndarray
    x_nv0: np.ndarray
    obstacle_s: float
    prev_u_l: int
    d_eff: float


def _expr(C, o, k, idx):
    return (C[k, idx], o[k, idx])


def _accel_cap(lim):
    """Largest command magnitude the envelope admits at any velocity."""
    if lim.m1 != lim.m2:
        v_peak = max((lim.b2 - lim.b1) / (lim.m1 - lim.m2), 0.0)
    else:
        v_peak = 0.0
    return max(abs(lim.u_min), float(lim.upper(v_peak)), float(lim.upper(0.0)))


def _reach(v0, t, cap):
    """Bound on |s(t) - s(0)|. The accel lag only smooths the
    double-integrator envelope; the constant pads the residual."""
    return abs(v0) * t + 0.5 * cap * t * t + 0.5


def _pair_big_m(gap0, reach_a, reach_b, d, cap_m):
    """Smallest coefficient that still makes a gap row vacuous in its
    inactive polarity, given how far the pair can actually spread."""
    return min(cap_m, gap0 + reach_a + reach_b + d + 1.0)


def _velocity_floors(model, iv, ia, v0, a0, n, u_max, u_min):
    """Per-step lower bounds for the no-reverse rows: min(0, v under full
    throttle). A vehicle braking through rest carries its velocity sign for
    a step or two on the accel state alone, so a hard v >= 0 there is
    infeasible no matter the command; the floor concedes exactly that
    transient (centimeters of position) and returns to zero as soon as the
    command can act."""
    sub = model.A[np.ix_([iv, ia], [iv, ia])]
    bu = model.B[[iv, ia], 0]
    x = np.array([v0, a0], float)
    out = np.empty(n)
    for k in range(n):
        u = max(u_min, u_max(x[0]))
        x = sub @ x + bu * u
        out[k] = min(0.0, x[0])
    return out


def _lane_change_problem(ego, nv, obstacle_s, alpha, weights, cfg,
                         form="condensed", with_nv=True, prev_u_l=None):
    if cfg.lanes != 2:
        raise ValueError("the ego/NV lane-change problem is two-lane")
    ego = np.asarray(ego, float).reshape(5)
    nv = np.asarray(nv, float).reshape(3)
    if not (np.all(np.isfinite(ego)) and np.all(np.isfinite(nv))):
        raise ValueError("nonfinite state")
    if alpha is not None:
        alpha.validate()
    N, dt, M = cfg.N, cfg.dt, cfg.M
    w = weights
    lim = cfg.limits
    if prev_u_l is None:
        prev_u_l = 1 if ego[L] < 1.5 else 2
    d_eff = cfg.d_gap + cfg.nv_gap_margin
    # Big-M values derived from the reachable envelope, per step: just large
    # enough to be vacuous in a row's inactive polarity at that step, so a
    # fractional binary buys the relaxation very little and branching bites
    # immediately. cfg.M only caps them. Anything too far to interact within
    # a horizon (with generous margin, so the set of rows is stable under
    # replanning) contributes no rows and its binaries are pinned to zero
    # rather than branched on.
    if obstacle_s is None:
        obstacle_s = np.inf
    T = N * dt
    cap = _accel_cap(lim)
    cap_e = max(cap, abs(ego[A]))
    cap_n = max(cap, abs(nv[A]))
    gap0_nv = abs(nv[S] - ego[S])
    gap0_obs = abs(obstacle_s - ego[S])
    nv_in_range = (gap0_nv
                   <= 3.0 * (_reach(ego[V], T, cap_e) + _reach(nv[V], T, cap_n))
                   + d_eff)
    # Past the window the velocity floor keeps planned positions on the far
    # side for good, so the obstacle rows can never bind again and the whole
    # family drops out together with its binaries.
    obs_passed = ego[S] >= obstacle_s + cfg.d_gap + 2.0
    obs_in_range = (not obs_passed
                    and gap0_obs <= 6.0 * _reach(ego[V], T, cap_e) + cfg.d_gap)
    # The lane rows are geometry, not reachability: their vacuous polarity
    # must release l across the whole road band [1 - delta, lanes + delta],
    # or the indicator semantics would silently narrow the band.
    l_pad = (max(0.0, ego[L] - cfg.lanes - cfg.delta, 1.0 - cfg.delta - ego[L])
             + 0.5 * abs(ego[R]))
    m_lane = min(M, max(1.0, 0.5 + cfg.delta) + l_pad)

    blocks = []
    if form == "explicit":
        blocks.append(("x_ego", 5 * N))
        if with_nv:
            blocks.append(("x_nv", 3 * N))
    elif form != "condensed":
        raise ValueError(f"unknown form {form!r}")
    blocks += [("u_a", N), ("u_l", N)]
    if with_nv:
        blocks.append(("u_nv", N))
    blocks += [("eps", N), ("beta_nv", N), ("beta_obs", N), ("mu1", N), ("mu2", N)]
    lay = Layout(blocks)
    n = lay.size

    ua = lay.start("u_a")
    ul = lay.start("u_l")
    eps = lay.start("eps")
    bnv = lay.start("beta_nv")
    bobs = lay.start("beta_obs")
    mu1 = lay.start("mu1")
    mu2 = lay.start("mu2")

    ego_model = ego_discrete(dt)
    nv_model = nv_discrete(dt)
    if form == "condensed":
        uego_cols = [ua + np.arange(N), ul + np.arange(N)]
        Ce, oe = _rollout_rows(ego_model, ego, uego_cols, n, N)
        if with_nv:
            unv_cols = [lay.start("u_nv") + np.arange(N)]
            Cn, on = _rollout_rows(nv_model, nv, unv_cols, n, N)
    else:
        Ce, oe = _state_var_rows(ego, lay.start("x_ego"), 5, n, N)
        if with_nv:
            Cn, on = _state_var_rows(nv, lay.start("x_nv"), 3, n, N)
    if not with_nv:
        # Constant-velocity prediction: fixed parameters, no NV variables.
        Cn = np.zeros((N + 1, 3, n))
        on = np.zeros((N + 1, 3))
        on[:, S] = nv[S] + np.arange(N + 1) * dt * nv[V]
        on[:, V] = nv[V]

    cost = _CostStack(n)
    for k in range(1, N + 1):
        cost.add_sq(w.q_v, Ce[k, V], oe[k, V] - w.v_ref)
        cost.add_sq(w.q_a, Ce[k, A], oe[k, A])
        cost.add_sq(w.q_da, Ce[k, A] - Ce[k - 1, A], oe[k, A] - oe[k - 1, A])
        cost.add_sq(w.q_dl, Ce[k, L] - Ce[k - 1, L], oe[k, L] - oe[k - 1, L])
        cost.add_lin(w.q_slack, eps + k - 1)
        if with_nv:
            cost.add_sq(alpha.alpha_p, Cn[k, S] - Ce[k, S], on[k, S] - oe[k, S])
            cost.add_sq(alpha.alpha_a, Cn[k, A], on[k, A])
            cost.add_sq(alpha.alpha_a, Cn[k, A] - Cn[k - 1, A], on[k, A] - on[k - 1, A])
    e = np.zeros(n)
    for k in range(N):
        e[:] = 0.0
        e[ua + k] = 1.0
        cost.add_sq(w.q_a, e.copy())
        e[:] = 0.0
        e[ul + k] = 1.0
        if k == 0:
            cost.add_sq(w.q_dl, e.copy(), -float(prev_u_l))
        else:
            e[ul + k - 1] = -1.0
            cost.add_sq(w.q_dl, e.copy())
        if with_nv:
            e[:] = 0.0
            e[lay.start("u_nv") + k] = 1.0
            cost.add_sq(alpha.alpha_a, e.copy())
    Q, q, offset = cost.build()

    if with_nv:
        # Predicted control authority of the neighbour scales with the
        # imputed influence fraction. With the acceleration weight dominant
        # the prediction collapses toward constant velocity, so the plan
        # cannot count on concessions the neighbour has shown no sign of
        # making; with the proximity weight dominant the full authority is
        # available and the joint plan may open the gap through it.
        phi = alpha.alpha_p / max(alpha.alpha_p + alpha.alpha_a, 1e-12)
        u_nv_hi = float(phi * lim.upper(w.v_ref))
        floors_n = _velocity_floors(nv_model, 1, 2, nv[1], nv[2], N,
                                    lambda v: u_nv_hi, phi * lim.u_min)
    floors_e = _velocity_floors(ego_model, V, A, ego[V], ego[A], N,
                                lim.upper, lim.u_min)

    rows = _RowStack(n)
    for k in range(1, N + 1):
        i = k - 1
        t_k = k * dt
        re_k = _reach(ego[V], t_k, cap_e)
        # NV pair: active in lane 2; beta_nv = 1 means the ego is ahead.
        if nv_in_range:
            m_nv = _pair_big_m(gap0_nv, re_k, _reach(nv[V], t_k, cap_n),
                               d_eff, M)
            rows.add(f"nv_gap_ahead[{k}]",
                     [(-1.0, *_expr(Ce, oe, k, S)), (1.0, *_expr(Cn, on, k, S))],
                     [(m_nv, bnv + i), (m_nv, mu2 + i)], 2.0 * m_nv - d_eff)
            rows.add(f"nv_gap_behind[{k}]",
                     [(1.0, *_expr(Ce, oe, k, S)), (-1.0, *_expr(Cn, on, k, S))],
                     [(-m_nv, bnv + i), (m_nv, mu2 + i)], m_nv - d_eff)
        # Stopped obstacle in lane 1, slack-relaxed. The plant crosses the
        # lane boundary between plan samples, so each bound is enforced
        # twice: once gated on the step's own membership and once gated on
        # the previous step's ("entry" rows). A segment that starts in lane
        # 1 then clears the window at both of its endpoints, and positions
        # between them are covered because planned positions are monotone.
        if obs_in_range:
            m_obs = _pair_big_m(gap0_obs, re_k, 0.0, cfg.d_gap, M)
            rows.add(f"obs_gap_ahead[{k}]",
                     [(-1.0, *_expr(Ce, oe, k, S))],
                     [(-1.0, eps + i), (m_obs, bobs + i), (m_obs, mu1 + i)],
                     2.0 * m_obs - cfg.d_gap - obstacle_s)
            rows.add(f"obs_gap_behind[{k}]",
                     [(1.0, *_expr(Ce, oe, k, S))],
                     [(-1.0, eps + i), (-m_obs, bobs + i), (m_obs, mu1 + i)],
                     m_obs - cfg.d_gap + obstacle_s)
            if k == 1:
                if ego[L] <= 1.0 + cfg.delta:
                    rows.add("obs_gap_ahead_entry[1]",
                             [(-1.0, *_expr(Ce, oe, 1, S))],
                             [(-1.0, eps), (m_obs, bobs)],
                             m_obs - cfg.d_gap - obstacle_s)
                    rows.add("obs_gap_behind_entry[1]",
                             [(1.0, *_expr(Ce, oe, 1, S))],
                             [(-1.0, eps), (-m_obs, bobs)],
                             obstacle_s - cfg.d_gap)
            else:
                rows.add(f"obs_gap_ahead_entry[{k}]",
                         [(-1.0, *_expr(Ce, oe, k, S))],
                         [(-1.0, eps + i), (m_obs, bobs + i), (m_obs, mu1 + i - 1)],
                         2.0 * m_obs - cfg.d_gap - obstacle_s)
                rows.add(f"obs_gap_behind_entry[{k}]",
                         [(1.0, *_expr(Ce, oe, k, S))],
                         [(-1.0, eps + i), (-m_obs, bobs + i), (m_obs, mu1 + i - 1)],
                         m_obs - cfg.d_gap + obstacle_s)
        # Lane membership: mu1 commits the ego below the lane boundary,
        # mu2 above; each zero side forces the opposite bound.
        rows.add(f"lane_low_if_mu1[{k}]",
                 [(1.0, *_expr(Ce, oe, k, L))], [(m_lane, mu1 + i)],
                 2.0 - cfg.delta + m_lane)
        rows.add(f"lane_low_if_not_mu2[{k}]",
                 [(1.0, *_expr(Ce, oe, k, L))], [(-m_lane, mu2 + i)],
                 1.0 + cfg.delta)
        rows.add(f"lane_high_if_not_mu1[{k}]",
                 [(-1.0, *_expr(Ce, oe, k, L))], [(-m_lane, mu1 + i)],
                 cfg.delta - 2.0)
        rows.add(f"lane_high_if_mu2[{k}]",
                 [(-1.0, *_expr(Ce, oe, k, L))], [(m_lane, mu2 + i)],
                 m_lane - 1.0 - cfg.delta)
    for k in range(N):
        # Velocity-dependent acceleration envelope at the command instant.
        rows.add(f"accel_cap1[{k}]",
                 [(-lim.m1, *_expr(Ce, oe, k, V))], [(1.0, ua + k)], lim.b1)
        rows.add(f"accel_cap2[{k}]",
                 [(-lim.m2, *_expr(Ce, oe, k, V))], [(1.0, ua + k)], lim.b2)
        rows.add(f"accel_floor[{k}]", [], [(-1.0, ua + k)], -lim.u_min)
    for k in range(1, N + 1):
        # No driving backward. Without this, braking plans happily pass
        # through v = 0 and reverse, which fakes compliance with the
        # position constraints. The floor is 0 except through a
        # braking-to-rest transient, where the early velocities are pinned
        # by the accel state and a hard zero would be infeasible outright.
        rows.add(f"v_floor[{k}]", [(-1.0, *_expr(Ce, oe, k, V))], [],
                 -floors_e[k - 1])
        if with_nv:
            rows.add(f"v_floor_nv[{k}]", [(-1.0, *_expr(Cn, on, k, V))], [],
                     -floors_n[k - 1])
    A_in, b_in = rows.build()
    row_labels = rows.labels

    eq = _RowStack(n)
    # Exactly one lane membership per step. The forcing rows already pin the
    # mu matching the lateral position; the tie also kills the redundant
    # all-zero combination at the shared band boundary, so branching either
    # mu decides the step's lane outright.
    for k in range(1, N + 1):
        eq.add(f"one_lane[{k}]", [],
               [(1.0, mu1 + k - 1), (1.0, mu2 + k - 1)], 1.0)
    if form == "explicit":
        names = ["s", "v", "a", "l", "r"]
        for k in range(N):
            for i in range(5):
                exprs = [(1.0, *_expr(Ce, oe, k + 1, i))]
                for j in range(5):
                    if ego_model.A[i, j] != 0.0:
                        exprs.append((-ego_model.A[i, j], *_expr(Ce, oe, k, j)))
                eq.add(f"dyn_ego_{names[i]}[{k + 1}]", exprs,
                       [(-ego_model.B[i, 0], ua + k), (-ego_model.B[i, 1], ul + k)],
                       0.0)
        if with_nv:
            unv = lay.start("u_nv")
            for k in range(N):
                for i in range(3):
                    exprs = [(1.0, *_expr(Cn, on, k + 1, i))]
                    for j in range(3):
                        if nv_model.A[i, j] != 0.0:
                            exprs.append((-nv_model.A[i, j], *_expr(Cn, on, k, j)))
                    eq.add(f"dyn_nv_{names[i]}[{k + 1}]", exprs,
                           [(-nv_model.B[i, 0], unv + k)], 0.0)
    A_eq, b_eq = eq.build()
    eq_labels = eq.labels

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[lay.sl("u_l")] = 1.0
    ub[lay.sl("u_l")] = float(cfg.lanes)
    if with_nv:
        lb[lay.sl("u_nv")] = phi * lim.u_min
        ub[lay.sl("u_nv")] = u_nv_hi
    # Slack halves the gap requirement at most. The residual forbidden
    # window then stays far wider than one step of travel, so a relaxed
    # plan cannot step across the obstacle between samples.
    lb[lay.sl("eps")] = 0.0
    ub[lay.sl("eps")] = 0.5 * cfg.d_gap
    for name in ("beta_nv", "beta_obs", "mu1", "mu2"):
        lb[lay.sl(name)] = 0.0
        ub[lay.sl(name)] = 1.0
    if not nv_in_range:
        ub[lay.sl("beta_nv")] = 0.0
    if not obs_in_range:
        # No rows reference the binary, so its value only matters for
        # branching; pin it to the side the ego is actually on.
        side = 1.0 if obs_passed else 0.0
        lb[lay.sl("beta_obs")] = side
        ub[lay.sl("beta_obs")] = side

    integers = np.concatenate([np.arange(lay.sl(name).start, lay.sl(name).stop)
                               for name in ("u_l", "beta_nv", "beta_obs", "mu1", "mu2")])
    ks = np.arange(N, dtype=float)
    priority = np.concatenate([2 * N + ks, N + ks, N + ks, ks, ks])

    qp = QuadraticProgram(Q=Q, q=q, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                          lb=lb, ub=ub, offset=offset)
    miqp = MixedIntegerQP(qp, integers, priority)
    return LaneChangeProblem(miqp=miqp, layout=lay, row_labels=row_labels,
                             eq_labels=eq_labels, cfg=cfg, weights=w,
                             alpha=alpha, form=form, with_nv=with_nv,
                             x_ego0=ego, x_nv0=nv, obstacle_s=float(obstacle_s),
                             prev_u_l=int(prev_u_l), d_eff=d_eff)


def build_aimpc(ego, nv, obstacle_s, alpha, weights=None, cfg=None,
                form="condensed", prev_u_l=None):
    """Joint ego/NV problem with the NV block weighted by alpha."""
    return _lane_change_problem(ego, nv, obstacle_s, alpha,
                                weights or EgoCostWeights(),
                                cfg or PlannerConfig(), form=form,
                                with_nv=True, prev_u_l=prev_u_l)


def build_joint_fixed_alpha(ego, nv, obstacle_s, weights=None, cfg=None,
                            form="condensed", prev_u_l=None, c=1.0):
    """The joint problem with the NV weights pinned to an even split."""
    return build_aimpc(ego, nv, obstacle_s, AlphaWeights.equal(c),
                       weights=weights, cfg=cfg, form=form, prev_u_l=prev_u_l)


def build_baseline_cv(ego, nv, obstacle_s, weights=None, cfg=None,
                      form="condensed", prev_u_l=None):
    """Non-interactive baseline: the NV is a constant-velocity parameter."""
    return _lane_change_problem(ego, nv, obstacle_s, None,
                                weights or EgoCostWeights(),
                                cfg or PlannerConfig(), form=form,
                                with_nv=False, prev_u_l=prev_u_l)


@dataclass
class Binaries:
    beta_nv: np.ndarray     # steps 1..N
    beta_obs: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray


@dataclass
class Plan:
    ego_states: np.ndarray       # (N+1, 5)
    ego_controls: np.ndarray     # (N, 2): [u_a, u_l]
    nv_states: np.ndarray        # (N+1, 3) co-optimized or CV prediction
    nv_controls: np.ndarray      # (N,)
    slack: np.ndarray            # (N+1,), slack[0] = 0
    binaries: Binaries
    objective: float
    status: str
    solve_time: float
    nodes: int
    gap: float
    warm_start_used: bool
    fail_safe: bool = False


def extract_plan(prob, msol):
    """Read controls off the solution and roll the models for exact states."""
    lay = prob.layout
    z = msol.x
    N = prob.cfg.N
    u_a = z[lay.sl("u_a")].copy()
    u_l = np.rint(z[lay.sl("u_l")]).astype(int)
    ego_model = ego_discrete(prob.cfg.dt)
    nv_model = nv_discrete(prob.cfg.dt)
    xs = np.zeros((N + 1, 5))
    xs[0] = prob.x_ego0
    for k in range(N):
        xs[k + 1] = ego_model.step(xs[k], [u_a[k], u_l[k]])
    if prob.with_nv:
        u_nv = z[lay.sl("u_nv")].copy()
        xn = np.zeros((N + 1, 3))
        xn[0] = prob.x_nv0
        for k in range(N):
            xn[k + 1] = nv_model.step(xn[k], [u_nv[k]])
    else:
        u_nv = np.zeros(N)
        xn = np.zeros((N + 1, 3))
        xn[:, S] = prob.x_nv0[S] + np.arange(N + 1) * prob.cfg.dt * prob.x_nv0[V]
        xn[:, V] = prob.x_nv0[V]
    slack = np.zeros(N + 1)
    slack[1:] = z[lay.sl("eps")]
    binaries = Binaries(
        beta_nv=np.rint(z[lay.sl("beta_nv")]).astype(int),
        beta_obs=np.rint(z[lay.sl("beta_obs")]).astype(int),
        mu1=np.rint(z[lay.sl("mu1")]).astype(int),
        mu2=np.rint(z[lay.sl("mu2")]).astype(int))
    return Plan(ego_states=xs, ego_controls=np.column_stack([u_a, u_l.astype(float)]),
                nv_states=xn, nv_controls=u_nv, slack=slack, binaries=binaries,
                objective=msol.objective, status=msol.status,
                solve_time=msol.solve_time, nodes=msol.nodes, gap=msol.gap,
                warm_start_used=msol.warm_start_used)


def _fail_safe_plan(prob, msol, u_hold):
    """Comfort-braking rollout used when the solver produced nothing.
    Brakes to rest and holds; braking past rest would reverse the plant,
    and a reversing fallback feeds itself (the next problem starts from a
    state the floors cannot admit)."""
    N = prob.cfg.N
    ego_model = ego_discrete(prob.cfg.dt)
    nv_model = nv_discrete(prob.cfg.dt)
    u_brake = max(prob.cfg.limits.u_min, -2.0)
    xs = np.zeros((N + 1, 5))
    xs[0] = prob.x_ego0
    u_a = np.empty(N)
    for k in range(N):
        u_a[k] = u_brake if xs[k][V] > 0.3 else 0.0
        xs[k + 1] = ego_model.step(xs[k], [u_a[k], u_hold])
    xn = np.zeros((N + 1, 3))
    xn[0] = prob.x_nv0
    for k in range(N):
        xn[k + 1] = nv_model.step(xn[k], [0.0])
    return Plan(ego_states=xs,
                ego_controls=np.column_stack([u_a, np.full(N, float(u_hold))]),
                nv_states=xn, nv_controls=np.zeros(N), slack=np.zeros(N + 1),
                binaries=None, objective=np.nan, status=msol.status,
                solve_time=msol.solve_time, nodes=msol.nodes, gap=msol.gap,
                warm_start_used=msol.warm_start_used, fail_safe=True)


def dump_problem(prob, path):
    """Plain-text dump of the MIQP with a variable-name legend."""
    step0 = {name: 1 for name in ("eps", "beta_nv", "beta_obs", "mu1", "mu2")}
    dump_qp(prob.miqp.qp, path, legend=prob.layout.legend(step0))


class Planner:
    """Receding-horizon wrapper: build, warm-start, solve, extract, fall back.

    kind selects the builder: "aimpc" consumes the imputed alpha passed to
    mpc_step, "joint_fixed" pins it to an even split, "baseline_cv" freezes
    the NV prediction. One instance serves one vehicle; it carries the
    previously applied lane command (anchor of the lane-change cost) and the
    previous integer assignment (time-shifted warm start).
    """

    def __init__(self, kind="aimpc", cfg=None, weights=None, solver=None, c=1.0):
        if kind not in PLANNER_KINDS:
            raise ValueError(f"unknown planner kind {kind!r}")
        self.kind = kind
        self.cfg = cfg or PlannerConfig()
        self.weights = weights or EgoCostWeights()
        self.solver = solver or MiqpConfig(time_limit=self.cfg.dt)
        self.c = c
        self.prev_u_l = None
        self._assignment = None
        self._last_status = None
        # Lateral probing state; see _probe_override.
        self._probe_hold = 0
        self._probe_cool = 0
        self._probe_round = 0

    def _build(self, ego, nv, obstacle_s, alpha):
        if self.kind == "baseline_cv":
            return build_baseline_cv(ego, nv, obstacle_s, self.weights,
                                     self.cfg, prev_u_l=self.prev_u_l)
        if self.kind == "joint_fixed" or alpha is None:
            alpha = AlphaWeights.equal(self.c)
        else:
            # Imputed pairs come normalized to alpha_p + alpha_a = 1; c sets
            # the scale of the NV block against the ego weights. With the
            # block too cheap the joint plan conscripts the neighbour into
            # braking fantasies whenever that shaves ego cost, regardless of
            # what the imputation says.
            alpha = AlphaWeights(alpha.alpha_p * self.c, alpha.alpha_a * self.c)
        return build_aimpc(ego, nv, obstacle_s, alpha, self.weights,
                           self.cfg, prev_u_l=self.prev_u_l)

    def _cold_assignment(self, prob):
        """Hold-lane guess: keeps the current lane, orders by position."""
        N = self.cfg.N
        lane = 1 if prob.x_ego0[L] < 1.5 else 2
        u_l = np.full(N, float(lane))
        mu1 = np.full(N, 1.0 if lane == 1 else 0.0)
        mu2 = 1.0 - mu1
        ahead_nv = 1.0 if prob.x_ego0[S] > prob.x_nv0[S] else 0.0
        ahead_obs = 1.0 if prob.x_ego0[S] > prob.obstacle_s else 0.0
        return np.concatenate([u_l, np.full(N, ahead_nv), np.full(N, ahead_obs),
                               mu1, mu2])

    def _warm_assignment(self, prob):
        n_int = prob.miqp.integers.size
        if self._assignment is not None and self._assignment.size == n_int:
            fam = self._assignment.reshape(5, self.cfg.N)
            return np.column_stack([fam[:, 1:], fam[:, -1]]).reshape(-1)
        return self._cold_assignment(prob)

    def _probe_assignments(self, prob):
        """Integer assignments worth trying before branching: the shifted
        previous plan, holding the current command, pulling back to lane 1,
        and committing to lane 2 at one of a few upcoming steps, each lane
        plan paired with passing ahead of or behind the NV. The lateral servo
        never sees u_a, so lane membership follows from a control-only
        rollout and each assignment is internally consistent; with a poor
        relaxation bound the applied plan is whichever of these survives the
        solver as incumbent, so the family doubles as the maneuver menu."""
        N, dt = self.cfg.N, self.cfg.dt
        ego = prob.x_ego0
        model = ego_discrete(dt)
        cands = [self._warm_assignment(prob)]
        seen = {tuple(int(v) for v in cands[0])}
        base = float(self.prev_u_l) if self.prev_u_l is not None else (
            1.0 if ego[L] < 1.5 else 2.0)
        # The commit family starts from the lane the ego is actually in, not
        # from the held command; otherwise a probing tick (command 2, body
        # still in lane 1) collapses every delayed commit into "cross now".
        home = 1.0 if ego[L] < 1.5 else 2.0
        lane_plans = [np.full(N, base), np.full(N, 1.0)]
        # Early switches cover committed merges, late ones cover plans that
        # first brake or accelerate to open the gap and only then cross.
        for j in (0, 1, 2, 3, 4, 6, 8, 10, 12, 14, 16):
            u_l = np.full(N, home)
            u_l[j:] = 2.0
            lane_plans.append(u_l)
        ahead_obs = 1.0 if ego[S] > prob.obstacle_s else 0.0
        for u_l in lane_plans:
            x = ego
            mu2 = np.empty(N)
            for k in range(N):
                x = model.step(x, np.array([0.0, u_l[k]]))
                mu2[k] = 1.0 if x[L] >= 1.5 else 0.0
            for bnv in (0.0, 1.0):
                a = np.concatenate([u_l, np.full(N, bnv),
                                    np.full(N, ahead_obs), 1.0 - mu2, mu2])
                key = tuple(int(v) for v in a)
                if key not in seen:
                    seen.add(key)
                    cands.append(a)
        return np.vstack(cands)

    def _frozen_step(self, prob):
        """Post-maneuver fast path. Once the obstacle is behind and the
        shifted plan holds one lane and one ordering for the whole horizon,
        the integer pattern is frozen and replanning reduces to a single
        pinned QP. The world leaving that pattern's envelope shows up as
        infeasibility, which drops back to the full search; a follow state
        never closes its relaxation bound, so branching there buys nothing
        at any budget."""
        if self._assignment is None or self._last_status not in (
                "optimal", "feasible_incumbent"):
            return None
        if not (np.isfinite(prob.obstacle_s)
                and prob.x_ego0[S] >= prob.obstacle_s + self.cfg.d_gap + 2.0):
            return None
        a = self._warm_assignment(prob)
        fam = a.reshape(5, self.cfg.N)
        if any(np.ptp(fam[i]) > 0.0 for i in (0, 1, 3, 4)):
            return None
        qp = prob.miqp.qp
        ints = prob.miqp.integers
        a = np.clip(a, qp.lb[ints], qp.ub[ints])
        t0 = time.perf_counter()
        sol = solve_qp(fix_and_relax(prob.miqp, a), self.solver.qp)
        if sol.status != "optimal":
            return None
        return MiqpSolution(status="feasible_incumbent", x=sol.x,
                            objective=sol.objective, best_bound=-np.inf,
                            gap=np.inf, nodes=1,
                            solve_time=time.perf_counter() - t0,
                            assignment=a, warm_start_used=True)

    def _probe_override(self, prob, alpha, control, plan):
        """Lateral probing. When the target lane is blocked and the imputed
        weights predict no concession, no merge plan survives the authority
        envelope and the standoff would resolve passively. A brief forced
        nose toward the lane boundary confronts the neighbour with a visible
        bid, and the following imputation windows carry its reaction: a
        conceding neighbour re-opens the envelope, an indifferent one leaves
        it shut and the probe retracts. The nose stays well inside the
        lane-1 membership band, so every constraint row of the applied plan
        is unaffected by the override."""
        ego, nv = prob.x_ego0, prob.x_nv0
        if self._probe_cool > 0:
            self._probe_cool -= 1
        if control[1] == 2 or plan.fail_safe:
            # A native merge command or an emergency stop ends the probe.
            self._probe_hold = 0
            return control
        if self._probe_hold > 0:
            self._probe_hold -= 1
            if ego[L] >= 1.35:
                # Deep enough: the bid is unmistakable and the membership
                # band is getting close. Any reaction is on the record.
                self._probe_hold = 0
                self._probe_cool = 10
                return control
            if self._probe_hold == 0:
                self._probe_cool = 10
            return (control[0], 2)
        phi = 0.5 if alpha is None else (
            alpha.alpha_p / max(alpha.alpha_p + alpha.alpha_a, 1e-12))
        runway = prob.obstacle_s - ego[S]
        blocking = abs(nv[S] - ego[S]) < self.cfg.d_gap + self.cfg.nv_gap_margin
        if (blocking and phi < 0.55 and ego[L] < 1.1
                and 25.0 <= runway <= 55.0
                and self._probe_cool == 0 and self._probe_round < 3):
            self._probe_round += 1
            self._probe_hold = 6
            return (control[0], 2)
        return control

    def mpc_step(self, ego, nv, obstacle_s, alpha=None):
        """One planning step. Returns ((u_a, u_l), Plan)."""
        prob = self._build(ego, nv, obstacle_s, alpha)
        msol = self._frozen_step(prob)
        if msol is None:
            # While solves end at the budget the candidate menu buys
            # incumbent quality; once they close at the root again the
            # shifted plan alone is enough and the probes would only tax
            # easy steps.
            if self._last_status == "optimal":
                warm = np.atleast_2d(self._warm_assignment(prob))
            else:
                warm = self._probe_assignments(prob)
            solver = self.solver
            if solver.node_limit is not None:
                # Root, one probe per menu entry, and a short dive. The
                # applied plan comes from the menu on contested steps, so
                # nodes past that point mostly re-derive known incumbents.
                cap = 1 + warm.shape[0] + 8
                if cap < solver.node_limit:
                    solver = replace(solver, node_limit=cap)
            msol = solve_miqp(prob.miqp, solver, warm_start=warm)
        self._last_status = msol.status
        if msol.x is None:
            hold = 1 if np.asarray(ego, float)[L] < 1.5 else 2
            self._assignment = None
            plan = _fail_safe_plan(prob, msol, hold)
            control = (float(plan.ego_controls[0, 0]), hold)
        else:
            plan = extract_plan(prob, msol)
            self._assignment = msol.assignment
            control = (float(plan.ego_controls[0, 0]), int(plan.ego_controls[0, 1]))
        if self.kind == "aimpc" and np.isfinite(prob.obstacle_s):
            control = self._probe_override(prob, alpha, control, plan)
        self.prev_u_l = control[1]
        return control, plan


@dataclass
class GeneralProblem:
    miqp: MixedIntegerQP
    layout: Layout
    row_labels: list
    eq_labels: list
    cfg: PlannerConfig
    vehicles: list
    pairs: list
    form: str
    states0: np.ndarray


def build_general(vehicles, lanes=None, cfg=None, form="condensed"):
    """Multi-vehicle problem: pairwise gap binaries, per-lane indicators with
    a one-lane-at-a-time equality per vehicle and step."""
    cfg = cfg or PlannerConfig(lanes=3)
    lanes = lanes or cfg.lanes
    vehicles = list(vehicles)
    n_veh = len(vehicles)
    if n_veh < 1 or lanes < 2:
        raise ValueError("need at least one vehicle and two lanes")
    N, dt, M = cfg.N, cfg.dt, cfg.M
    lim = cfg.limits
    states0 = np.vstack([np.asarray(v.state, float).reshape(5) for v in vehicles])
    pairs = list(itertools.combinations(range(n_veh), 2))
    cap = _accel_cap(lim)
    caps = [max(cap, abs(states0[v, A])) for v in range(n_veh)]
    gap0 = {(a, b): abs(states0[a, S] - states0[b, S]) for a, b in pairs}
    # Lane-row Ms release l across the whole road band in the vacuous
    # polarity (same rationale as the two-lane builder); gap-row Ms are
    # derived per step from the reachable envelope inside the row loop.
    m_lane = [[min(M, max(lanes - ln, ln - 1.0)
                   + max(0.0, states0[v, L] - lanes - cfg.delta,
                         1.0 - cfg.delta - states0[v, L])
                   + 0.5 * abs(states0[v, R]))
               for ln in range(1, lanes + 1)]
              for v in range(n_veh)]

    blocks = []
    if form == "explicit":
        blocks += [(f"x{v}", 5 * N) for v in range(n_veh)]
    elif form != "condensed":
        raise ValueError(f"unknown form {form!r}")
    for v in range(n_veh):
        blocks += [(f"u_a{v}", N), (f"u_l{v}", N)]
    for v in range(n_veh):
        for ln in range(1, lanes + 1):
            blocks.append((f"mu{v}_l{ln}", N))
    for i, j in pairs:
        blocks.append((f"beta{i}{j}", N))
    lay = Layout(blocks)
    n = lay.size

    model = ego_discrete(dt)
    E = []
    for v in range(n_veh):
        if form == "condensed":
            cols = [lay.start(f"u_a{v}") + np.arange(N),
                    lay.start(f"u_l{v}") + np.arange(N)]
            E.append(_rollout_rows(model, states0[v], cols, n, N))
        else:
            E.append(_state_var_rows(states0[v], lay.start(f"x{v}"), 5, n, N))

    cost = _CostStack(n)
    for v, veh in enumerate(vehicles):
        Cv, ov = E[v]
        for k in range(1, N + 1):
            cost.add_sq(veh.w_v, Cv[k, V], ov[k, V] - veh.v_ref)
            cost.add_sq(veh.w_a, Cv[k, A], ov[k, A])
            if veh.alpha is not None and v > 0:
                C0, o0 = E[0]
                cost.add_sq(veh.alpha.alpha_p, Cv[k, S] - C0[k, S], ov[k, S] - o0[k, S])
                cost.add_sq(veh.alpha.alpha_a, Cv[k, A], ov[k, A])
                cost.add_sq(veh.alpha.alpha_a, Cv[k, A] - Cv[k - 1, A],
                            ov[k, A] - ov[k - 1, A])
        if veh.w_dl > 0.0:
            # In-plan smoothing only; no memory of the previously applied
            # command is assumed for the other vehicles.
            for k in range(1, N):
                e = np.zeros(n)
                e[lay.start(f"u_l{v}") + k] = 1.0
                e[lay.start(f"u_l{v}") + k - 1] = -1.0
                cost.add_sq(veh.w_dl, e)
        if veh.alpha is not None and v > 0:
            for k in range(N):
                e = np.zeros(n)
                e[lay.start(f"u_a{v}") + k] = 1.0
                cost.add_sq(veh.alpha.alpha_a, e)
    Q, q, offset = cost.build()

    rows = _RowStack(n)
    for k in range(1, N + 1):
        i = k - 1
        t_k = k * dt
        r_k = [_reach(states0[v, V], t_k, caps[v]) for v in range(n_veh)]
        for (a_, b_) in pairs:
            Ca, oa = E[a_]
            Cb, ob = E[b_]
            beta = lay.start(f"beta{a_}{b_}") + i
            mp = _pair_big_m(gap0[(a_, b_)], r_k[a_], r_k[b_], cfg.d_gap, M)
            for ln in range(1, lanes + 1):
                mua = lay.start(f"mu{a_}_l{ln}") + i
                mub = lay.start(f"mu{b_}_l{ln}") + i
                rows.add(f"pair_gap_ahead[{a_},{b_},{ln},{k}]",
                         [(-1.0, *_expr(Ca, oa, k, S)), (1.0, *_expr(Cb, ob, k, S))],
                         [(mp, beta), (mp, mua), (mp, mub)], 3.0 * mp - cfg.d_gap)
                rows.add(f"pair_gap_behind[{a_},{b_},{ln},{k}]",
                         [(1.0, *_expr(Ca, oa, k, S)), (-1.0, *_expr(Cb, ob, k, S))],
                         [(-mp, beta), (mp, mua), (mp, mub)], 2.0 * mp - cfg.d_gap)
        for v in range(n_veh):
            Cv, ov = E[v]
            for ln in range(1, lanes + 1):
                ml = m_lane[v][ln - 1]
                mu = lay.start(f"mu{v}_l{ln}") + i
                rows.add(f"lane_upper[{v},{ln},{k}]",
                         [(1.0, *_expr(Cv, ov, k, L))], [(ml, mu)],
                         ln + cfg.delta + ml)
                rows.add(f"lane_lower[{v},{ln},{k}]",
                         [(-1.0, *_expr(Cv, ov, k, L))], [(ml, mu)],
                         ml - ln + cfg.delta)
    for v in range(n_veh):
        Cv, ov = E[v]
        uav = lay.start(f"u_a{v}")
        for k in range(N):
            rows.add(f"accel_cap1[{v},{k}]",
                     [(-lim.m1, *_expr(Cv, ov, k, V))], [(1.0, uav + k)], lim.b1)
            rows.add(f"accel_cap2[{v},{k}]",
                     [(-lim.m2, *_expr(Cv, ov, k, V))], [(1.0, uav + k)], lim.b2)
            rows.add(f"accel_floor[{v},{k}]", [], [(-1.0, uav + k)], -lim.u_min)
        fl = _velocity_floors(model, V, A, states0[v, V], states0[v, A], N,
                              lim.upper, lim.u_min)
        for k in range(1, N + 1):
            # No driving backward; see the two-lane builder.
            rows.add(f"v_floor[{v},{k}]", [(-1.0, *_expr(Cv, ov, k, V))], [],
                     -fl[k - 1])
    A_in, b_in = rows.build()

    eq = _RowStack(n)
    for v in range(n_veh):
        for k in range(1, N + 1):
            eq.add(f"one_lane[{v},{k}]", [],
                   [(1.0, lay.start(f"mu{v}_l{ln}") + k - 1) for ln in range(1, lanes + 1)],
                   1.0)
    if form == "explicit":
        names = ["s", "v", "a", "l", "r"]
        for v in range(n_veh):
            Cv, ov = E[v]
            for k in range(N):
                for si in range(5):
                    exprs = [(1.0, *_expr(Cv, ov, k + 1, si))]
                    for sj in range(5):
                        if model.A[si, sj] != 0.0:
                            exprs.append((-model.A[si, sj], *_expr(Cv, ov, k, sj)))
                    eq.add(f"dyn{v}_{names[si]}[{k + 1}]", exprs,
                           [(-model.B[si, 0], lay.start(f"u_a{v}") + k),
                            (-model.B[si, 1], lay.start(f"u_l{v}") + k)], 0.0)
    A_eq, b_eq = eq.build()

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    int_blocks = []
    for v in range(n_veh):
        lb[lay.sl(f"u_l{v}")] = 1.0
        ub[lay.sl(f"u_l{v}")] = float(lanes)
    mu_names = [f"mu{v}_l{ln}" for v in range(n_veh) for ln in range(1, lanes + 1)]
    beta_names = [f"beta{i}{j}" for i, j in pairs]
    for name in mu_names + beta_names:
        lb[lay.sl(name)] = 0.0
        ub[lay.sl(name)] = 1.0
    ks = np.arange(N, dtype=float)
    pr = []
    for v in range(n_veh):
        int_blocks.append(np.arange(lay.sl(f"u_l{v}").start, lay.sl(f"u_l{v}").stop))
        pr.append(2 * N + ks)
    for name in mu_names:
        int_blocks.append(np.arange(lay.sl(name).start, lay.sl(name).stop))
        pr.append(ks)
    for name in beta_names:
        int_blocks.append(np.arange(lay.sl(name).start, lay.sl(name).stop))
        pr.append(N + ks)
    integers = np.concatenate(int_blocks)
    priority = np.concatenate(pr)

    qp = QuadraticProgram(Q=Q, q=q, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                          lb=lb, ub=ub, offset=offset)
    return GeneralProblem(miqp=MixedIntegerQP(qp, integers, priority),
                          layout=lay, row_labels=rows.labels, eq_labels=eq.labels,
                          cfg=replace(cfg, lanes=lanes), vehicles=vehicles,
                          pairs=pairs, form=form, states0=states0)


@dataclass
class GeneralPlan:
    states: np.ndarray           # (V, N+1, 5)
    controls: np.ndarray         # (V, N, 2)
    mu: np.ndarray               # (V, lanes, N), steps 1..N
    beta: dict                   # (i, j) -> (N,)
    objective: float
    status: str
    solve_time: float
    nodes: int
    fail_safe: bool = False


def extract_general_plan(prob, msol):
    lay = prob.layout
    z = msol.x
    cfg = prob.cfg
    N = cfg.N
    n_veh = len(prob.vehicles)
    model = ego_discrete(cfg.dt)
    states = np.zeros((n_veh, N + 1, 5))
    controls = np.zeros((n_veh, N, 2))
    for v in range(n_veh):
        u_a = z[lay.sl(f"u_a{v}")]
        u_l = np.rint(z[lay.sl(f"u_l{v}")])
        controls[v] = np.column_stack([u_a, u_l])
        states[v, 0] = prob.states0[v]
        for k in range(N):
            states[v, k + 1] = model.step(states[v, k], controls[v, k])
    mu = np.zeros((n_veh, cfg.lanes, N), int)
    for v in range(n_veh):
        for ln in range(1, cfg.lanes + 1):
            mu[v, ln - 1] = np.rint(z[lay.sl(f"mu{v}_l{ln}")]).astype(int)
    beta = {(i, j): np.rint(z[lay.sl(f"beta{i}{j}")]).astype(int)
            for i, j in prob.pairs}
    return GeneralPlan(states=states, controls=controls, mu=mu, beta=beta,
                       objective=msol.objective, status=msol.status,
                       solve_time=msol.solve_time, nodes=msol.nodes)


class GeneralPlanner:
    """Distributed step for one vehicle of the multi-vehicle problem.

    Every vehicle solves the same joint problem (costs of the others are
    known constants) and applies only its own first control. Instances must
    not be shared between vehicles: each keeps its own warm-start state.
    """

    def __init__(self, index, vehicles, lanes=None, cfg=None, solver=None):
        self.index = index
        self.vehicles = list(vehicles)
        self.cfg = cfg or PlannerConfig(lanes=3)
        self.lanes = lanes or self.cfg.lanes
        self.solver = solver or MiqpConfig(time_limit=self.cfg.dt)
        self._assignment = None

    def _cold_assignment(self, prob):
        N = self.cfg.N
        n_veh = len(self.vehicles)
        lanes_now = np.clip(np.rint(prob.states0[:, L]), 1, self.lanes).astype(int)
        parts = [np.full(N, float(lanes_now[v])) for v in range(n_veh)]
        for v in range(n_veh):
            for ln in range(1, self.lanes + 1):
                parts.append(np.full(N, 1.0 if lanes_now[v] == ln else 0.0))
        for i, j in prob.pairs:
            parts.append(np.full(N, 1.0 if prob.states0[i, S] > prob.states0[j, S] else 0.0))
        return np.concatenate(parts)

    def mpc_step(self, states):
        vehicles = [replace(v, state=np.asarray(states[i], float))
                    for i, v in enumerate(self.vehicles)]
        prob = build_general(vehicles, self.lanes, self.cfg)
        n_int = prob.miqp.integers.size
        if self._assignment is not None and self._assignment.size == n_int:
            fam = self._assignment.reshape(-1, self.cfg.N)
            warm = np.column_stack([fam[:, 1:], fam[:, -1]]).reshape(-1)
        else:
            warm = self._cold_assignment(prob)
        msol = solve_miqp(prob.miqp, self.solver, warm_start=warm)
        if msol.x is None:
            self._assignment = None
            lane = int(np.clip(round(states[self.index][L]), 1, self.lanes))
            brake = max(self.cfg.limits.u_min, -2.0)
            u = (brake if states[self.index][V] > 0.3 else 0.0, lane)
            plan = GeneralPlan(states=None, controls=None, mu=None, beta=None,
                               objective=np.nan, status=msol.status,
                               solve_time=msol.solve_time, nodes=msol.nodes,
                               fail_safe=True)
            return u, plan
        self._assignment = msol.assignment
        plan = extract_general_plan(prob, msol)
        u = (float(plan.controls[self.index, 0, 0]),
             int(plan.controls[self.index, 0, 1]))
        return u, plan
