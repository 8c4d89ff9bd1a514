"""Estimating the neighbor's cost trade-off from observed motion.

The neighbor is modeled as driving approximately optimally for a cost
alpha_p * (s_nv - s_ego)^2 + alpha_a * a_nv^2 under simple longitudinal
dynamics (position/velocity kinematics plus a first-order lag between the
acceleration command and the realized acceleration). For a window of observed
states the KKT residuals of that problem are linear in the unknowns (alpha and
the dual variables), so minimizing their squared norm subject to alpha >= 0,
lambda >= 0, alpha_p + alpha_a = c is a small convex QP whose solution imputes
the weight split the observed motion is most consistent with.

Two stationarity-row conventions ship. In `literal` mode every step's block is
self-contained: the duals of step i appear only in step i's rows. That form
has a blind spot: the free equality duals can cancel the alpha_p-bearing row
exactly at any alpha, so on generic data the objective reduces to a pure
alpha_a^2 term and the split saturates at alpha_p = c. `coupled` mode
differentiates the Lagrangian of the whole window instead, so equality duals
telescope between neighboring steps and the velocity/acceleration rows pick up
-dt cross terms; the cancellation disappears and alpha_p/alpha_a genuinely
trade off against each other. coupled is the default.

The collision-avoidance ellipse between the two vehicles is carried for
completeness (one multiplier per step, complementarity rows lambda * g); with
vehicles that are not overlapping it is strongly inactive and the
complementarity rows push those multipliers to zero.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .planner import AlphaWeights
from .qp import QpConfig, QuadraticProgram, solve_qp


@dataclass(frozen=True)
class VehicleGeometry:
    length: float = 4.5      # m
    width: float = 2.0       # m

    def validate(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"geometry must be positive, got {self}")


class ImputationError(RuntimeError):
    """QP failure during imputation; carries the window for diagnosis."""

    def __init__(self, message, window):
        super().__init__(f"{message} (window: {window})")
        self.window = window


def reconstruct_accel(velocities, dt):
    """Acceleration from sampled velocity: central differences inside the
    window, one-sided at the ends. Exact for affine velocity profiles."""
    v = np.asarray(velocities, float).reshape(-1)
    if v.size < 2:
        raise ValueError("need at least 2 velocity samples")
    return np.gradient(v, dt)


@dataclass(frozen=True)
class ObservationWindow:
    """r consecutive observations of the neighbor and the ego at uniform dt."""
    s_nv: np.ndarray
    v_nv: np.ndarray
    a_nv: np.ndarray
    l_nv: np.ndarray
    s_ego: np.ndarray
    l_ego: np.ndarray
    dt: float

    @property
    def r(self):
        return self.s_nv.shape[0]

    @staticmethod
    def from_observations(s_nv, v_nv, l_nv, s_ego, l_ego, dt, a_nv=None):
        s_nv = np.asarray(s_nv, float).reshape(-1)
        v_nv = np.asarray(v_nv, float).reshape(-1)
        l_nv = np.asarray(l_nv, float).reshape(-1)
        s_ego = np.asarray(s_ego, float).reshape(-1)
        l_ego = np.asarray(l_ego, float).reshape(-1)
        a_nv = (reconstruct_accel(v_nv, dt) if a_nv is None
                else np.asarray(a_nv, float).reshape(-1))
        w = ObservationWindow(s_nv, v_nv, a_nv, l_nv, s_ego, l_ego, float(dt))
        w.validate()
        return w

    def validate(self):
        n = self.s_nv.shape[0]
        for name in ("v_nv", "a_nv", "l_nv", "s_ego", "l_ego"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"window field {name} length != {n}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def digest(self):
        h = hashlib.sha256()
        for a in (self.s_nv, self.v_nv, self.a_nv, self.l_nv,
                  self.s_ego, self.l_ego, np.array([self.dt])):
            h.update(np.ascontiguousarray(a, float).tobytes())
        return h.hexdigest()[:12]

    def __str__(self):
        return f"ObservationWindow(r={self.r}, dt={self.dt}, {self.digest()})"


@dataclass(frozen=True)
class DualEstimates:
    lam1: np.ndarray      # ellipse multipliers, >= 0
    nu1: np.ndarray       # position-kinematics duals
    nu2: np.ndarray       # velocity-kinematics duals
    nu3: np.ndarray       # accel-lag duals

    def validate(self):
        if np.any(self.lam1 < -1e-9):
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class ImputationConfig:
    c: float = 1.0
    geometry: VehicleGeometry = field(default_factory=VehicleGeometry)
    tau: float = 0.275             # accel lag used in the fitted dynamics, s
    mode: str = "coupled"          # coupled | literal
    interval: int = 6              # planner steps between imputations
    r: int = 6                     # observation window length
    tie_break_alpha: AlphaWeights = None

    def validate(self):
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.interval < 1 or self.r < 1:
            raise ValueError("interval and r must be >= 1")
        if self.mode not in ("coupled", "literal"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def tie_break(self):
        return self.tie_break_alpha or AlphaWeights.equal(self.c)


def residual_rows(window, cfg):
    """Linear residual map R and labels: residual = R @ z with decision
    vector z = [alpha_p, alpha_a, lam1(r), nu1(r), nu2(r), nu3(r)].

    Rows come in per-step blocks (s, v, a, u stationarity, then one
    complementarity row); labels are (kind, step) pairs.
    """
    r = window.r
    dt, tau = window.dt, cfg.tau
    geo = cfg.geometry
    ds = window.s_nv - window.s_ego
    dl = window.l_nv - window.l_ego
    g1 = 1.0 - (ds / (geo.length / 2)) ** 2 - (dl / (geo.width / 2)) ** 2

    AP, AA = 0, 1
    lam = lambda i: 2 + i
    nu1 = lambda i: 2 + r + i
    nu2 = lambda i: 2 + 2 * r + i
    nu3 = lambda i: 2 + 3 * r + i
    nvar = 2 + 4 * r

    R = np.zeros((5 * r, nvar))
    labels = []
    coupled = cfg.mode == "coupled"
    for i in range(r):
        b = 5 * i
        # position stationarity
        R[b, AP] = 2.0 * ds[i]
        R[b, lam(i)] = -2.0 * ds[i] / (geo.length / 2) ** 2
        R[b, nu1(i)] = 1.0
        if coupled and i + 1 < r:
            R[b, nu1(i + 1)] = -1.0
        # velocity stationarity
        R[b + 1, nu2(i)] = 1.0
        if coupled:
            R[b + 1, nu1(i)] = -dt
            if i + 1 < r:
                R[b + 1, nu2(i + 1)] = -1.0
        # acceleration stationarity
        R[b + 2, AA] = 2.0 * window.a_nv[i]
        R[b + 2, nu3(i)] = 1.0
        if coupled:
            R[b + 2, nu2(i)] = -dt
            if i + 1 < r:
                R[b + 2, nu3(i + 1)] = -(1.0 - dt / tau)
        # command stationarity
        R[b + 3, nu3(i)] = -dt / tau
        # complementarity
        R[b + 4, lam(i)] = g1[i]
        labels += [("s", i), ("v", i), ("a", i), ("u", i), ("comp", i)]
    return R, labels


def build_imputation_qp(window, cfg=None):
    """The imputation problem as a QP: minimize ||R z||^2 subject to
    alpha >= 0, lambda >= 0, alpha_p + alpha_a = c."""
    cfg = cfg or ImputationConfig()
    cfg.validate()
    window.validate()
    R, _ = residual_rows(window, cfg)
    n = R.shape[1]
    r = window.r
    Q = R.T @ R
    q = np.zeros(n)
    A_eq = np.zeros((1, n))
    A_eq[0, :2] = 1.0
    b_eq = np.array([cfg.c])
    lb = np.full(n, -np.inf)
    lb[:2] = 0.0
    lb[2:2 + r] = 0.0
    return QuadraticProgram(Q, q, A_eq, b_eq, None, None, lb, None, 0.0)


def _solve(window, cfg, pin_alpha_p=None):
    qp = build_imputation_qp(window, cfg)
    if pin_alpha_p is not None:
        lb, ub = qp.lb.copy(), np.full(qp.n, np.inf)
        lb[0] = pin_alpha_p
        ub[0] = pin_alpha_p
        qp = QuadraticProgram(qp.Q, qp.q, qp.A_eq, qp.b_eq, None, None,
                              lb, ub, 0.0)
    sol = solve_qp(qp, QpConfig())
    if sol.status != "optimal":
        raise ImputationError(f"imputation QP ended {sol.status}", window)
    return sol


def impute_alpha(window, cfg=None):
    """Returns (AlphaWeights, DualEstimates, objective).

    When the optimum is flat over the whole alpha interval (both pinned
    extremes match the free optimum) the data says nothing about the split
    and the configured tie-break is returned instead.
    """
    cfg = cfg or ImputationConfig()
    sol = _solve(window, cfg)
    obj = sol.objective
    r = window.r
    x = sol.x
    flat_tol = 1e-9 * (1.0 + abs(obj))
    lo = _solve(window, cfg, pin_alpha_p=0.0)
    hi = _solve(window, cfg, pin_alpha_p=cfg.c)
    if lo.objective <= obj + flat_tol and hi.objective <= obj + flat_tol:
        alpha = cfg.tie_break()
        x = (lo.x + hi.x) / 2.0
    else:
        ap = min(max(x[0], 0.0), cfg.c)
        alpha = AlphaWeights(ap, cfg.c - ap)
    duals = DualEstimates(lam1=np.maximum(x[2:2 + r], 0.0),
                          nu1=x[2 + r:2 + 2 * r].copy(),
                          nu2=x[2 + 2 * r:2 + 3 * r].copy(),
                          nu3=x[2 + 3 * r:2 + 4 * r].copy())
    return alpha, duals, obj


class ImputationScheduler:
    """Buffers observations at planner rate and re-imputes alpha on a fixed
    cadence; publishes the tie-break split until the first update.

    Feed one observation per planner step via observe(); it returns the new
    AlphaWeights on update steps and None otherwise. The current estimate is
    always available as .alpha, and .trace records every update.
    """

    def __init__(self, cfg=None, dt=0.2):
        self.cfg = cfg or ImputationConfig()
        self.cfg.validate()
        self.dt = float(dt)
        self.alpha = self.cfg.tie_break()
        self.trace = []
        self._obs = []

    def observe(self, s_nv, v_nv, a_nv, l_nv, s_ego, l_ego):
        self._obs.append((float(s_nv), float(v_nv), float(a_nv),
                          float(l_nv), float(s_ego), float(l_ego)))
        tick = len(self._obs)
        if tick % self.cfg.interval != 0 or tick < self.cfg.r:
            return None
        tail = np.array(self._obs[-self.cfg.r:])
        window = ObservationWindow(s_nv=tail[:, 0], v_nv=tail[:, 1],
                                   a_nv=tail[:, 2], l_nv=tail[:, 3],
                                   s_ego=tail[:, 4], l_ego=tail[:, 5],
                                   dt=self.dt)
        alpha, _, obj = impute_alpha(window, self.cfg)
        self.alpha = alpha
        self.trace.append({"tick": tick, "window": window.digest(),
                           "mode": self.cfg.mode,
                           "alpha_p": alpha.alpha_p, "alpha_a": alpha.alpha_a,
                           "objective": obj})
        return alpha
