"""Deterministic closed-loop simulation around the lane-change planner.

The plant is the planner's own discrete model run at a finer tick (the plan
is exact under it, so every gap guarantee of the optimizer carries over to
the loop), optionally wrapped in an empirical first-order actuation filter
with a command-derivative boost. One scripted neighbor policy stands in for
the human driver; the policies are shaped to elicit the two interesting
outcomes: a yielder that opens the gap (ego merges ahead) and a pacer that
pulls away (ego merges behind), plus an aggressor, a bait that invites the
merge and then denies it, trace replay, and an externally-driven policy for
live sessions.

Every run is bit-reproducible: no wall clock in any control path (the solver
runs on a node budget in deterministic mode; wall-clock limits are opt-in for
timing studies), policies are pure functions of the visible states, and
traces serialize with stable field order.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .imputation import ImputationConfig, ImputationScheduler
from .miqp import MiqpConfig
from .planner import PLANNER_KINDS, AlphaWeights, Planner, PlannerConfig
from .vehicles import A, DEFAULT_LIMITS, L, R, S, V, ego_discrete, nv_discrete


@dataclass(frozen=True)
class ActuationLagParams:
    tau_t: float = 0.3     # ego throttle lag, s
    tau_s: float = 0.2     # steering lag, s
    tau_a: float = 0.25    # neighbor throttle lag, s

    def validate(self):
        if min(self.tau_t, self.tau_s, self.tau_a) <= 0:
            raise ValueError("lag time constants must be positive")


@dataclass(frozen=True)
class Scenario:
    obstacle_s: float = 60.0
    lanes: int = 2
    ego_init: tuple = (0.0, 8.0, 0.0, 1.0, 0.0)
    nv_init: tuple = (0.0, 8.0, 0.0)
    v_ref: float = 8.0            # neighbor tracking target
    sim_dt: float = 0.05
    planner_dt: float = 0.2
    duration: float = 30.0
    nv_policy: str = "pacer"
    planner_kind: str = "aimpc"
    lag: ActuationLagParams = None    # None = ideal plant

    def validate(self):
        ratio = self.planner_dt / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("planner_dt must be an integer multiple of sim_dt")
        if self.planner_kind not in PLANNER_KINDS:
            raise ValueError(f"unknown planner kind {self.planner_kind!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.lag is not None:
            self.lag.validate()

    def ticks_per_plan(self):
        return int(round(self.planner_dt / self.sim_dt))

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "obstacle_s", "lanes", "ego_init", "nv_init", "v_ref", "sim_dt",
            "planner_dt", "duration", "nv_policy", "planner_kind")}
        d["ego_init"] = list(self.ego_init)
        d["nv_init"] = list(self.nv_init)
        if self.lag is not None:
            d["lag"] = {"tau_t": self.lag.tau_t, "tau_s": self.lag.tau_s,
                        "tau_a": self.lag.tau_a}
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        lag = d.pop("lag", None)
        if lag is not None:
            lag = ActuationLagParams(**lag)
        for k in ("ego_init", "nv_init"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        sc = Scenario(lag=lag, **d)
        sc.validate()
        return sc


def builtin_scenario(name, **overrides):
    """sub1/sub2/sub3 put the stopped obstacle at 70/60/50 m."""
    table = {"sub1": 70.0, "sub2": 60.0, "sub3": 50.0}
    if name not in table:
        raise KeyError(f"unknown scenario {name!r} (have {sorted(table)})")
    return replace(Scenario(obstacle_s=table[name]), **overrides)


class ThrottleFilter:
    """Empirical discrete actuation delay: first-order pull toward the
    command plus a one-tick boost proportional to the command change. Time
    constants at or below the tick degenerate to passthrough (the explicit
    update is unstable there and the lag is unresolvable anyway)."""

    def __init__(self, tau, dt):
        self.tau = float(tau)
        self.dt = float(dt)
        self.out = 0.0
        self.prev_cmd = 0.0

    def step(self, cmd):
        cmd = float(cmd)
        if self.tau <= self.dt:
            self.out = cmd
        else:
            boost = (cmd - self.prev_cmd) / self.dt
            self.out += (self.dt / self.tau) * (-self.out + cmd + boost)
        self.prev_cmd = cmd
        return self.out


class NvInputDynamics:
    """Pedal/steer conditioning for a human-driven neighbor: the pedal pulls
    the throttle actuation toward the mapped acceleration against the realized
    acceleration (first-order, time constant tau_a); the steering path keeps a
    damped wiggle strictly inside the lane band and never moves lane
    membership."""

    PEDAL_ACCEL = 3.0        # full throttle, m/s^2
    PEDAL_BRAKE = 4.0        # full brake magnitude, m/s^2
    WIGGLE = 0.25            # lateral cosmetic bound, lane units

    def __init__(self, params=None, dt=0.05):
        self.params = params or ActuationLagParams()
        self.dt = float(dt)
        self.o_throttle = 0.0
        self.o_steer = 0.0
        self.prev_steer = 0.0

    @staticmethod
    def pedal_to_accel(pedal):
        p = min(max(float(pedal), -1.0), 1.0)
        return p * (NvInputDynamics.PEDAL_ACCEL if p >= 0
                    else NvInputDynamics.PEDAL_BRAKE)

    def step(self, raw_pedal, raw_steer, nv_state):
        target = self.pedal_to_accel(raw_pedal)
        a = float(nv_state[A])
        self.o_throttle += self.dt * (-a + target) / self.params.tau_a
        steer = min(max(float(raw_steer), -1.0), 1.0)
        d_steer = (steer - self.prev_steer) / self.dt
        self.o_steer += self.dt * (-self.o_steer + steer + d_steer) / self.params.tau_s
        self.prev_steer = steer
        wiggle = min(max(self.o_steer * self.WIGGLE, -self.WIGGLE), self.WIGGLE)
        return self.o_throttle, wiggle


def _clip_accel(u, v, limits=DEFAULT_LIMITS):
    # Brakes hold a stopped car; they do not reverse it.
    lo = limits.u_min if v > 0.0 else 0.0
    return float(np.clip(u, lo, limits.upper(max(v, 0.0))))


class PacerPolicy:
    """Tracks its reference speed and ignores the ego entirely."""

    def __init__(self, kp=1.2):
        self.kp = kp

    def __call__(self, nv, ego, v_ref, dt):
        return _clip_accel(self.kp * (v_ref - nv[V]), nv[V])


class YielderPolicy:
    """Tracks the reference but makes room once the ego visibly bids for the
    lane: alongside and drifted off its lane center toward the boundary.

    Gating the concession on lateral evidence is what separates planners
    that interact from planners that predict. A passive planner never drifts
    until a gap already exists, so to it this policy is indistinguishable
    from a plain tracker. While engaged it holds a speed below the ego's,
    deeper the larger the remaining gap deficit, the way a driver who has
    decided to let someone in hangs back until they are in; easing off at
    the first sign of the ego pulling ahead would claw back exactly the gap
    a merge needs. The latch releases only once the bid resolves with the
    ego clearly ahead or clearly behind."""

    def __init__(self, kp=1.2, d_gap=10.0, t_open=4.0, intent_l=1.15):
        self.kp = kp
        self.d_gap = d_gap
        self.t_open = t_open
        self.intent_l = intent_l
        self.engaged = False
        self._hold = None

    def __call__(self, nv, ego, v_ref, dt):
        lead = ego[S] - nv[S]
        if not self.engaged:
            if abs(lead) <= self.d_gap and ego[L] >= self.intent_l:
                self.engaged = True
                self._hold = None
        else:
            # A mutual standstill means the bid failed; rolling again lets
            # the ego fall back to the slot behind.
            stalled = nv[V] < 0.5 and ego[V] < 0.5
            if lead >= self.d_gap + 1.0 or lead <= -1.5 * self.d_gap or stalled:
                self.engaged = False
        if self.engaged:
            deficit = max(self.d_gap - lead, 0.0)
            raw = max(min(v_ref, ego[V]) - deficit / self.t_open, 0.0)
            # Hold the deepest concession made so far. Recovering speed as
            # the gap approaches target would stall the bid just short of it.
            self._hold = raw if self._hold is None else min(self._hold, raw)
            v_target = self._hold
        else:
            v_target = v_ref
        return _clip_accel(self.kp * (v_target - nv[V]), nv[V])


class AggressorPolicy:
    """Adds up to 1.5 m/s^2 over tracking while the ego contests the slot
    behind or alongside."""

    def __init__(self, kp=1.2, d_gap=10.0, push=1.5):
        self.kp = kp
        self.d_gap = d_gap
        self.push = push

    def __call__(self, nv, ego, v_ref, dt):
        u = self.kp * (v_ref - nv[V])
        rel = ego[S] - nv[S]
        if -2.0 * self.d_gap <= rel <= 0.5 * self.d_gap:
            u += self.push * (1.0 - abs(rel) / (2.0 * self.d_gap))
        return _clip_accel(u, nv[V])


class BaitPolicy:
    """Yields like the yielder until the ego commits laterally, then chases
    the ego's bumper so the ahead slot never opens. The pursuit pauses while
    the ego retreats to its own lane, so a merge behind stays available; any
    renewed bid is punished again."""

    def __init__(self, kp=1.2, d_gap=10.0, trigger_l=1.2, offset=2.0,
                 t_open=4.0, intent_l=1.15):
        self.kp = kp
        self.d_gap = d_gap
        self.trigger_l = trigger_l
        self.offset = offset
        self.t_open = t_open
        self.intent_l = intent_l
        self.triggered = False
        self.engaged = False
        self._hold = None

    def __call__(self, nv, ego, v_ref, dt):
        if not self.triggered and ego[L] >= self.trigger_l:
            self.triggered = True
        if self.triggered:
            if ego[L] >= 1.1:
                u = 0.8 * ((ego[S] - self.offset) - nv[S]) + 1.6 * (ego[V] - nv[V])
            else:
                u = self.kp * (v_ref - nv[V])
            return _clip_accel(u, nv[V])
        # Lure phase: same committed concession as the yielder, so the bid
        # that springs the trap is the same bid the yielder rewards.
        lead = ego[S] - nv[S]
        if not self.engaged:
            if abs(lead) <= self.d_gap and ego[L] >= self.intent_l:
                self.engaged = True
                self._hold = None
        else:
            stalled = nv[V] < 0.5 and ego[V] < 0.5
            if lead >= self.d_gap + 1.0 or lead <= -1.5 * self.d_gap or stalled:
                self.engaged = False
        if self.engaged:
            deficit = max(self.d_gap - lead, 0.0)
            raw = max(min(v_ref, ego[V]) - deficit / self.t_open, 0.0)
            self._hold = raw if self._hold is None else min(self._hold, raw)
            v_target = self._hold
        else:
            v_target = v_ref
        return _clip_accel(self.kp * (v_target - nv[V]), nv[V])


class ReplayPolicy:
    """Plays back a recorded command sequence; holds the last value after."""

    def __init__(self, commands):
        self.commands = [float(u) for u in commands]
        if not self.commands:
            raise ValueError("replay needs at least one command")
        self.k = 0

    def __call__(self, nv, ego, v_ref, dt):
        u = self.commands[min(self.k, len(self.commands) - 1)]
        self.k += 1
        return _clip_accel(u, nv[V])


class ExternalPolicy:
    """Latest-value command injected from outside (live session driver)."""

    def __init__(self):
        self.command = 0.0

    def __call__(self, nv, ego, v_ref, dt):
        return _clip_accel(self.command, nv[V])


POLICIES = {
    "pacer": PacerPolicy,
    "yielder": YielderPolicy,
    "aggressor": AggressorPolicy,
    "bait": BaitPolicy,
}


def make_policy(name, **kw):
    if name == "replay":
        return ReplayPolicy(kw.pop("commands"))
    if name == "external":
        return ExternalPolicy()
    if name not in POLICIES:
        raise KeyError(f"unknown policy {name!r}")
    return POLICIES[name](**kw)


def step_plant(state, control, model, throttle_filter=None):
    """One plant tick. With a filter the longitudinal command passes through
    the actuation delay first; the model itself is exact."""
    u = np.atleast_1d(np.asarray(control, float)).copy()
    if throttle_filter is not None:
        u[0] = throttle_filter.step(u[0])
    return model.step(state, u)


def _default_solver():
    # Node budget instead of wall clock: identical machines or not, the
    # search visits the same nodes. Sized to cover the planner's candidate
    # probes plus a modest dive; contested steps run on incumbent quality,
    # not on proving the bound.
    return MiqpConfig(node_limit=64, time_limit=None)


def run_closed_loop(scenario, seed=0, solver=None, observer=None):
    """Simulate one scenario. Returns (trace, metrics).

    trace is a list of per-tick dicts (stable key order); metrics is a dict.
    observer, if given, is called as observer(tick_record) after each tick.
    """
    scenario.validate()
    del seed  # runs are deterministic; kept for interface stability
    dt = scenario.sim_dt
    ratio = scenario.ticks_per_plan()
    n_ticks = int(round(scenario.duration / dt))
    ego_model = ego_discrete(dt)
    nv_model = nv_discrete(dt)
    cfg = PlannerConfig(dt=scenario.planner_dt, lanes=scenario.lanes)
    planner = Planner(kind=scenario.planner_kind, cfg=cfg,
                      solver=solver or _default_solver())
    policy = make_policy(scenario.nv_policy)
    sched = (ImputationScheduler(ImputationConfig(), dt=scenario.planner_dt)
             if scenario.planner_kind == "aimpc" else None)
    throttle = (ThrottleFilter(scenario.lag.tau_t, dt)
                if scenario.lag is not None else None)

    ego = np.asarray(scenario.ego_init, float).copy()
    nv = np.asarray(scenario.nv_init, float).copy()
    control = (0.0, int(round(ego[L])))
    plan_meta = {"status": "none", "solve_time": 0.0, "nodes": 0,
                 "gap": float("inf"), "fail_safe": False, "eps_max": 0.0}
    alpha = AlphaWeights.equal()
    trace = []
    failed = None

    for k in range(n_ticks):
        planned = k % ratio == 0
        if planned:
            if sched is not None:
                out = sched.observe(nv[S], nv[V], nv[A], 2.0, ego[S], ego[L])
                if out is not None:
                    alpha = out
            try:
                control, plan = planner.mpc_step(ego, nv, scenario.obstacle_s,
                                                 alpha=alpha)
            except Exception as e:     # hard failure: keep the partial trace
                failed = f"planner error: {e}"
                break
            plan_meta = {"status": plan.status,
                         "solve_time": plan.solve_time,
                         "nodes": plan.nodes,
                         "gap": plan.gap if np.isfinite(plan.gap) else -1.0,
                         "fail_safe": plan.fail_safe,
                         "eps_max": float(np.max(plan.slack))}
        u_nv = policy(nv, ego, scenario.v_ref, dt)
        rec = {
            "t": round(k * dt, 6),
            "s_ego": ego[S], "v_ego": ego[V], "a_ego": ego[A],
            "l_ego": ego[L], "r_ego": ego[R],
            "s_nv": nv[S], "v_nv": nv[V], "a_nv": nv[A], "l_nv": 2.0,
            "u_a": float(control[0]), "u_l": int(control[1]),
            "u_nv": float(u_nv),
            "alpha_p": alpha.alpha_p, "alpha_a": alpha.alpha_a,
            "planned": planned,
            "planner_status": plan_meta["status"],
            "solve_time": plan_meta["solve_time"],
            "nodes": plan_meta["nodes"],
            "gap": plan_meta["gap"],
            "fail_safe": bool(plan_meta["fail_safe"]),
            "eps_max": plan_meta["eps_max"],
        }
        trace.append(rec)
        if observer is not None:
            observer(rec)
        ego = step_plant(ego, control, ego_model, throttle)
        nv = nv_model.step(nv, [u_nv])

    if trace:
        metrics = compute_metrics(trace, d_gap=cfg.d_gap, delta=cfg.delta,
                                  obstacle_s=scenario.obstacle_s)
    else:
        metrics = {}
    if failed is not None:
        metrics["status"] = "failed"
        metrics["failure"] = failed
    else:
        metrics["status"] = "completed"
    return trace, metrics


def detect_nudge(l_series, delta_nudge=0.15, target=1.5, base=1.0):
    """Maximal excursions above base+delta_nudge that fall back without ever
    reaching the target lane band count as nudges."""
    events = []
    lo = base + delta_nudge
    inside = False
    start = None
    reached = False
    for k, l in enumerate(l_series):
        if not inside and l > lo:
            inside, start, reached = True, k, False
        if inside:
            if l >= target:
                reached = True
            if l <= lo:
                if not reached:
                    events.append((start, k))
                inside = False
    return events


def compute_metrics(trace, d_gap=10.0, delta=0.5, obstacle_s=None):
    if not trace:
        raise ValueError("empty trace")
    v_ego = np.array([r["v_ego"] for r in trace])
    v_nv = np.array([r["v_nv"] for r in trace])
    l_ego = np.array([r["l_ego"] for r in trace])
    l_nv = np.array([r["l_nv"] for r in trace])
    s_ego = np.array([r["s_ego"] for r in trace])
    s_nv = np.array([r["s_nv"] for r in trace])
    dt = trace[1]["t"] - trace[0]["t"] if len(trace) > 1 else 0.0

    # Same lane band = within delta of the same center, matching the
    # membership definition of the planner's indicator rows.
    co_lane = np.abs(l_ego - l_nv) <= delta
    gaps = np.abs(s_ego - s_nv)[co_lane]
    min_gap = float(gaps.min()) if gaps.size else float("inf")

    in_lane1 = np.abs(l_ego - 1.0) <= delta
    if obstacle_s is not None and np.any(in_lane1):
        obs_clear = float(np.min(np.abs(s_ego[in_lane1] - obstacle_s)))
    else:
        obs_clear = float("inf")

    # Completed = reaches the target band and holds it for a second. A later
    # return to lane 1 (legitimate once past the obstacle) is a new maneuver,
    # not an undoing of this one.
    target = 2.0 - delta
    hold = max(1, int(round(1.0 / dt))) if dt > 0.0 else 1
    completed = False
    t_complete = float("nan")
    merged_ahead = False
    for j in np.where(l_ego >= target)[0]:
        if np.all(l_ego[j:j + hold] >= target - 1e-9):
            completed = True
            t_complete = trace[j]["t"]
            merged_ahead = bool(s_ego[j] > s_nv[j])
            break

    plans = [r for r in trace if r.get("planned")]
    solve_times = [r["solve_time"] for r in plans]
    budget_hits = sum(1 for r in plans
                      if r["planner_status"] in ("feasible_incumbent",
                                                 "timeout_no_incumbent"))

    nudges = detect_nudge(l_ego, target=target)
    return {
        "v_ego_avg": float(v_ego.mean()),
        "v_nv_avg": float(v_nv.mean()),
        "min_same_lane_gap": min_gap,
        "min_obstacle_clearance_lane1": obs_clear,
        "lane_change_completed": completed,
        "lane_change_time": t_complete,
        "merged_ahead": merged_ahead,
        "nudge_count": len(nudges),
        "max_solve_time": float(max(solve_times)) if solve_times else 0.0,
        "mean_solve_time": float(np.mean(solve_times)) if solve_times else 0.0,
        "median_solve_time": float(np.median(solve_times)) if solve_times else 0.0,
        "budget_hit_fraction": budget_hits / max(len(plans), 1),
        "fail_safe_ticks": int(sum(1 for r in plans if r["fail_safe"])),
        "eps_applied_max": float(max(r["eps_max"] for r in trace)),
        "duration": float(trace[-1]["t"] + dt if len(trace) > 1 else 0.0),
    }


def write_trace(trace, path):
    with open(path, "w") as f:
        for rec in trace:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_metrics(metrics, path):
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
