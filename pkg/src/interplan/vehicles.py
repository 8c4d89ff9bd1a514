"""Linear vehicle models shared by the planner and the simulator.

Ego state is x = [s, v, a, l, r], with s the longitudinal position along the
road, v the longitudinal velocity, a the realized acceleration, l the lateral
position measured in lane units (lane centers at 1, 2, ...), and r the lateral
rate. The longitudinal channel is a double integrator with a first-order lag
of time constant tau between the acceleration command u_a and the realized a.
The lateral channel is a critically damped second-order servo of natural
frequency omega_n driven by the integer lane command u_l, so a lane command
step settles on the commanded lane center without overshoot.

The neighbor vehicle keeps only the longitudinal triple [s, v, a] with the
same lag constant.

Both models are LTI, so the simulator and the planner share one exact
zero-order-hold discretization (matrix exponential of the augmented system)
instead of an integration scheme with step-size error.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of the ego/neighbor models."""

    tau: float = 0.275        # accel tracking lag [s]
    omega_n: float = 1.091    # lateral natural frequency [rad/s]
    zeta: float = 1.0         # lateral damping ratio (critically damped)
    gain: float = 1.0         # lateral DC gain, lane units per command unit


DEFAULT_PARAMS = VehicleParams()

# Ego state/control indices.
S, V, A, L, R = range(5)


def ego_continuous(params=DEFAULT_PARAMS):
    """Continuous-time (A, B) of the 5-state ego model, controls [u_a, u_l]."""
    tau, wn, zeta, K = params.tau, params.omega_n, params.zeta, params.gain
    A_c = np.array([
        [0.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0 / tau, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, -wn * wn, -2.0 * zeta * wn],
    ])
    B_c = np.zeros((5, 2))
    B_c[A, 0] = 1.0 / tau
    B_c[R, 1] = K * wn * wn
    return A_c, B_c


def nv_continuous(params=DEFAULT_PARAMS):
    """Continuous-time (A, B) of the 3-state neighbor model, control [u_nv]."""
    tau = params.tau
    A_c = np.array([
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0 / tau],
    ])
    B_c = np.zeros((3, 1))
    B_c[2, 0] = 1.0 / tau
    return A_c, B_c


def zoh(A_c, B_c, dt):
    """Exact zero-order-hold discretization via the augmented matrix exponential.

    Returns (A_d, B_d) with x[k+1] = A_d x[k] + B_d u[k] for u held over dt.
    """
    n, m = B_c.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A_c
    M[:n, n:] = B_c
    E = expm(M * dt)
    return E[:n, :n].copy(), E[:n, n:].copy()


@dataclass(frozen=True)
class DiscreteModel:
    """ZOH-discretized LTI model x[k+1] = A x[k] + B u[k]."""

    A: np.ndarray
    B: np.ndarray
    dt: float

    def step(self, x, u):
        return self.A @ np.asarray(x, float) + self.B @ np.atleast_1d(np.asarray(u, float))


@lru_cache(maxsize=32)
def ego_discrete(dt, params=DEFAULT_PARAMS):
    A_c, B_c = ego_continuous(params)
    A_d, B_d = zoh(A_c, B_c, dt)
    A_d.flags.writeable = False
    B_d.flags.writeable = False
    return DiscreteModel(A_d, B_d, dt)


@lru_cache(maxsize=32)
def nv_discrete(dt, params=DEFAULT_PARAMS):
    A_c, B_c = nv_continuous(params)
    A_d, B_d = zoh(A_c, B_c, dt)
    A_d.flags.writeable = False
    B_d.flags.writeable = False
    return DiscreteModel(A_d, B_d, dt)


@dataclass(frozen=True)
class AccelLimits:
    """Velocity-dependent admissible set for acceleration commands.

    The command must satisfy u >= u_min and u <= m1 v + b1 and u <= m2 v + b2.
    The two affine caps encode the drivetrain envelope: the first limits
    low-speed torque, the second (negative slope) caps what the powertrain
    sustains as speed rises.
    """

    u_min: float = -4.0
    m1: float = 0.285
    b1: float = 2.0
    m2: float = -0.1208
    b2: float = 4.83

    def upper(self, v):
        return np.minimum(self.m1 * np.asarray(v, float) + self.b1,
                          self.m2 * np.asarray(v, float) + self.b2)

    def lower(self, v):
        return np.full_like(np.asarray(v, float), self.u_min)

    def clamp(self, u, v):
        return float(np.clip(u, self.u_min, self.upper(v)))

    def contains(self, u, v, tol=0.0):
        return (u >= self.u_min - tol) and (u <= self.upper(v) + tol)


DEFAULT_LIMITS = AccelLimits()
