"""Vehicle model checks against fine-step integration and closed forms."""

import numpy as np

from interplan import vehicles
from oracles import rk4_discretize


def test_zoh_matches_rk4_ego():
    A, B = vehicles.ego_continuous()
    Ad, Bd = vehicles.zoh(A, B, 0.2)
    Ar, Br = rk4_discretize(A, B, 0.2, substeps=1000)
    assert np.max(np.abs(Ad - Ar)) < 1e-8
    assert np.max(np.abs(Bd - Br)) < 1e-8


def test_zoh_matches_rk4_nv():
    A, B = vehicles.nv_continuous()
    Ad, Bd = vehicles.zoh(A, B, 0.05)
    Ar, Br = rk4_discretize(A, B, 0.05, substeps=1000)
    assert np.max(np.abs(Ad - Ar)) < 1e-10
    assert np.max(np.abs(Bd - Br)) < 1e-10


def test_nv_constant_input_closed_form():
    # First-order lag under a held command u: a(t) = u + (a0-u) e^{-t/tau},
    # then v and s by direct integration.
    tau = vehicles.DEFAULT_PARAMS.tau
    dt = 0.2
    model = vehicles.nv_discrete(dt)
    s0, v0, a0, u = 3.0, 8.0, 0.4, 1.7
    e = np.exp(-dt / tau)
    a = u + (a0 - u) * e
    v = v0 + u * dt + tau * (a0 - u) * (1 - e)
    s = s0 + v0 * dt + 0.5 * u * dt**2 + tau * (a0 - u) * (dt - tau * (1 - e))
    x1 = model.step([s0, v0, a0], [u])
    assert np.allclose(x1, [s, v, a], atol=1e-12)


def test_lateral_step_critically_damped():
    # Unit lane-command step from rest: l(t) = 1 - (1 + w t) e^{-w t}; no
    # overshoot, monotone approach to the commanded lane.
    p = vehicles.DEFAULT_PARAMS
    dt = 0.01
    model = vehicles.ego_discrete(dt)
    x = np.zeros(5)
    ls = []
    for k in range(1, 1201):
        x = model.step(x, [0.0, 1.0])
        ls.append(x[vehicles.L])
        t = k * dt
        ref = 1.0 - (1.0 + p.omega_n * t) * np.exp(-p.omega_n * t)
        assert abs(x[vehicles.L] - ref) < 1e-9
    ls = np.array(ls)
    assert np.all(ls <= 1.0 + 1e-9)
    assert np.all(np.diff(ls) > -1e-12)
    assert ls[-1] > 0.99


def test_zoh_composition_exact():
    # Four 0.05 s steps under a held input equal one 0.2 s step: the
    # discretization is exact, not an integration scheme.
    fine = vehicles.ego_discrete(0.05)
    coarse = vehicles.ego_discrete(0.2)
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.standard_normal(5)
        u = rng.standard_normal(2)
        y = x.copy()
        for _ in range(4):
            y = fine.step(y, u)
        assert np.max(np.abs(y - coarse.step(x, u))) < 1e-10


def test_accel_limits_values():
    lim = vehicles.DEFAULT_LIMITS
    assert lim.upper(0.0) == 2.0                      # low-speed cap binds
    assert abs(lim.upper(8.0) - (-0.1208 * 8 + 4.83)) < 1e-12
    assert abs(lim.upper(10.0) - 3.622) < 1e-12
    # Crossover of the two caps.
    v_x = (lim.b2 - lim.b1) / (lim.m1 - lim.m2)
    assert abs(lim.upper(v_x - 1e-9) - lim.upper(v_x + 1e-9)) < 1e-6
    assert lim.contains(-4.0, 5.0)
    assert not lim.contains(-4.01, 5.0)
    assert not lim.contains(3.0, 0.0)
    assert lim.clamp(9.0, 8.0) == lim.upper(8.0)
    assert lim.clamp(-9.0, 8.0) == -4.0


def test_discrete_models_cached():
    assert vehicles.ego_discrete(0.2) is vehicles.ego_discrete(0.2)
    assert vehicles.nv_discrete(0.05) is not vehicles.nv_discrete(0.2)
