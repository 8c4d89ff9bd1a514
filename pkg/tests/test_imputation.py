import numpy as np
import pytest

from interplan.imputation import (
    ImputationConfig,
    ImputationError,
    ImputationScheduler,
    ObservationWindow,
    VehicleGeometry,
    build_imputation_qp,
    impute_alpha,
    reconstruct_accel,
    residual_rows,
)
from interplan.planner import AlphaWeights
from oracles import grid_impute, nv_cost_mpc_trace

DT = 0.2


def make_window(ds, a, dt=DT, dl=1.0, r=None):
    """Window with prescribed gap and acceleration series; velocities are the
    integral of a so the data looks kinematically sane."""
    ds = np.asarray(ds, float)
    a = np.asarray(a, float)
    r = ds.size if r is None else r
    s_ego = np.cumsum(np.full(r, 10.0 * dt)) + 5.0
    v = 10.0 + np.cumsum(a) * dt
    return ObservationWindow(s_nv=s_ego + ds, v_nv=v, a_nv=a,
                             l_nv=np.full(r, 1.0 + dl),
                             s_ego=s_ego, l_ego=np.full(r, 1.0), dt=dt)


def random_window(rng, r=6, ds_scale=4.0, a_scale=1.2):
    return make_window(rng.normal(0, ds_scale, r), rng.normal(0, a_scale, r))


def trace_window(trace, start, r=6, dt=DT):
    w = trace[start:start + r]
    return ObservationWindow(s_nv=w[:, 0], v_nv=w[:, 1], a_nv=w[:, 2],
                             l_nv=np.full(r, 2.0), s_ego=w[:, 3],
                             l_ego=np.full(r, 1.0), dt=dt)


# ---------------------------------------------------------------- accel


def test_reconstruct_accel_constant_velocity():
    a = reconstruct_accel(np.full(8, 7.3), DT)
    assert np.allclose(a, 0.0, atol=1e-12)


def test_reconstruct_accel_linear_ramp_exact():
    t = np.arange(9) * DT
    a = reconstruct_accel(t, DT)
    assert np.allclose(a, 1.0, atol=1e-9)


def test_reconstruct_accel_sine_matches_derivative():
    t = np.arange(17) * DT          # 0 .. 3.2 s
    a = reconstruct_accel(np.sin(t), DT)
    assert np.max(np.abs(a - np.cos(t))) < 7e-3


def test_reconstruct_accel_needs_two_samples():
    with pytest.raises(ValueError):
        reconstruct_accel([1.0], DT)


# ------------------------------------------------------------ row structure


def test_literal_alpha_p_coefficient_is_twice_gap():
    rng = np.random.default_rng(0)
    w = random_window(rng)
    R, labels = residual_rows(w, ImputationConfig(mode="literal"))
    ds = w.s_nv - w.s_ego
    for row, (kind, i) in zip(R, labels):
        if kind == "s":
            assert row[0] == 2.0 * ds[i]
        else:
            assert row[0] == 0.0


def test_zero_gap_removes_alpha_p_everywhere():
    # A neighbor exactly alongside is a critical point: nothing in the data
    # can prefer any proximity weight.
    a = np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.2])
    w = make_window(np.zeros(6), a)
    for mode in ("literal", "coupled"):
        R, _ = residual_rows(w, ImputationConfig(mode=mode))
        assert np.all(R[:, 0] == 0.0)
        qp = build_imputation_qp(w, ImputationConfig(mode=mode))
        assert np.all(qp.Q[0] == 0.0)
        assert np.all(qp.Q[:, 0] == 0.0)


def test_emitted_q_is_psd():
    rng = np.random.default_rng(1)
    for mode in ("literal", "coupled"):
        for _ in range(10):
            qp = build_imputation_qp(random_window(rng),
                                     ImputationConfig(mode=mode))
            assert np.linalg.eigvalsh(qp.Q).min() >= -1e-9


def test_sign_flip_negates_alpha_p_columns():
    rng = np.random.default_rng(2)
    w = random_window(rng)
    flipped = ObservationWindow(s_nv=2 * w.s_ego - w.s_nv, v_nv=w.v_nv,
                                a_nv=w.a_nv, l_nv=w.l_nv, s_ego=w.s_ego,
                                l_ego=w.l_ego, dt=w.dt)
    for mode in ("literal", "coupled"):
        cfg = ImputationConfig(mode=mode)
        R1, _ = residual_rows(w, cfg)
        R2, _ = residual_rows(flipped, cfg)
        assert np.allclose(R2[:, 0], -R1[:, 0], atol=0)
        # everything that does not involve the gap is untouched
        assert np.allclose(R2[:, 1], R1[:, 1], atol=0)


def test_literal_alpha_invariant_under_sign_flip():
    # Each gap-bearing row owns a private free dual in literal mode, so the
    # flipped problem has the same optimal value and the same split.
    rng = np.random.default_rng(3)
    w = random_window(rng)
    flipped = ObservationWindow(s_nv=2 * w.s_ego - w.s_nv, v_nv=w.v_nv,
                                a_nv=w.a_nv, l_nv=w.l_nv, s_ego=w.s_ego,
                                l_ego=w.l_ego, dt=w.dt)
    cfg = ImputationConfig(mode="literal")
    a1, _, o1 = impute_alpha(w, cfg)
    a2, _, o2 = impute_alpha(flipped, cfg)
    assert abs(a1.alpha_p - a2.alpha_p) < 1e-7
    assert abs(o1 - o2) < 1e-9 * (1 + abs(o1))


# ------------------------------------------------------------ impute_alpha


def test_alpha_normalized_and_nonnegative():
    rng = np.random.default_rng(4)
    for mode in ("literal", "coupled"):
        for c in (1.0, 2.5):
            cfg = ImputationConfig(mode=mode, c=c)
            alpha, duals, _ = impute_alpha(random_window(rng), cfg)
            assert abs(alpha.alpha_p + alpha.alpha_a - c) < 1e-9
            assert alpha.alpha_p >= -1e-9 and alpha.alpha_a >= -1e-9
            assert np.all(duals.lam1 >= 0.0)


def test_fully_degenerate_window_returns_tie_break():
    w = make_window(np.zeros(6), np.zeros(6))
    alpha, _, obj = impute_alpha(w, ImputationConfig())
    assert obj < 1e-12
    assert alpha.alpha_p == pytest.approx(0.5, abs=1e-12)
    custom = ImputationConfig(tie_break_alpha=AlphaWeights(0.7, 0.3))
    alpha2, _, _ = impute_alpha(w, custom)
    assert alpha2.alpha_p == pytest.approx(0.7, abs=1e-12)


def test_literal_mode_saturates_proximity_weight():
    # The per-step free duals cancel every gap row at any alpha, leaving a
    # pure alpha_a^2 objective: the literal split pins alpha_p to c on any
    # data with nonzero acceleration.
    rng = np.random.default_rng(5)
    for _ in range(5):
        w = random_window(rng)
        alpha, _, _ = impute_alpha(w, ImputationConfig(mode="literal"))
        assert alpha.alpha_p > 0.999


def test_qp_matches_grid_search_small_windows():
    rng = np.random.default_rng(6)
    for r in (2, 3, 4):
        for mode in ("literal", "coupled"):
            cfg = ImputationConfig(mode=mode)
            w = random_window(rng, r=r, ds_scale=2.0, a_scale=1.0)
            _, _, obj = impute_alpha(w, cfg)
            _, grid_obj = grid_impute(w, cfg)
            assert abs(obj - grid_obj) < 1e-5


def test_recover_known_alpha_from_generated_data():
    for true_ap in (0.2, 0.5, 0.8):
        trace = nv_cost_mpc_trace(true_ap, steps=8)
        w = trace_window(trace, start=2)
        alpha, _, _ = impute_alpha(w, ImputationConfig())
        assert abs(alpha.alpha_p - true_ap) <= 0.15, \
            f"true {true_ap} imputed {alpha.alpha_p}"


def test_grid_search_confirms_recovered_optimum():
    cfg = ImputationConfig()
    trace = nv_cost_mpc_trace(0.8, steps=8)
    w = trace_window(trace, start=2)
    alpha, _, obj = impute_alpha(w, cfg)
    grid_ap, grid_obj = grid_impute(w, cfg)
    assert abs(alpha.alpha_p - grid_ap) < 0.02
    assert obj <= grid_obj + 1e-7


def test_pacer_imputes_lower_alpha_p_than_yielder():
    r = 6
    s_ego = np.arange(r) * 10.0 * DT
    pacer = ObservationWindow(
        s_nv=15.0 + np.arange(r) * 12.0 * DT, v_nv=np.full(r, 12.0),
        a_nv=np.zeros(r), l_nv=np.full(r, 2.0),
        s_ego=s_ego, l_ego=np.full(r, 1.0), dt=DT)
    a_y = np.array([-1.5, -1.0, -0.2, 0.6, 1.0, 0.4])
    v_y = 10.0 + np.cumsum(a_y) * DT
    yielder = ObservationWindow(
        s_nv=s_ego + 3.0 + np.cumsum(v_y - 10.0) * DT, v_nv=v_y, a_nv=a_y,
        l_nv=np.full(r, 2.0), s_ego=s_ego, l_ego=np.full(r, 1.0), dt=DT)
    cfg = ImputationConfig()
    ap_pacer, _, _ = impute_alpha(pacer, cfg)
    ap_yielder, _, _ = impute_alpha(yielder, cfg)
    assert ap_pacer.alpha_p < ap_yielder.alpha_p


def test_window_validation():
    with pytest.raises(ValueError):
        ObservationWindow(s_nv=np.zeros(3), v_nv=np.zeros(3), a_nv=np.zeros(2),
                          l_nv=np.zeros(3), s_ego=np.zeros(3),
                          l_ego=np.zeros(3), dt=DT).validate()
    with pytest.raises(ValueError):
        VehicleGeometry(length=-1.0).validate()
    with pytest.raises(ValueError):
        ImputationConfig(mode="other").validate()


def test_window_accel_reconstructed_when_missing():
    t = np.arange(6) * DT
    w = ObservationWindow.from_observations(
        s_nv=10 + 10 * t, v_nv=10 + t, l_nv=np.full(6, 2.0),
        s_ego=10 * t, l_ego=np.full(6, 1.0), dt=DT)
    assert np.allclose(w.a_nv, 1.0, atol=1e-9)


# ------------------------------------------------------------- scheduler


def test_scheduler_warmup_and_cadence():
    sched = ImputationScheduler(ImputationConfig(interval=6, r=6), dt=DT)
    assert sched.alpha.alpha_p == pytest.approx(0.5)
    trace = nv_cost_mpc_trace(0.8, steps=20)
    updates = []
    for k, (s, v, a, se) in enumerate(trace, start=1):
        out = sched.observe(s, v, a, 2.0, se, 1.0)
        if out is not None:
            updates.append(k)
    assert updates == [6, 12, 18]
    assert len(sched.trace) == 3


def test_scheduler_is_deterministic():
    trace = nv_cost_mpc_trace(0.5, steps=14)

    def run():
        sched = ImputationScheduler(ImputationConfig(), dt=DT)
        for s, v, a, se in trace:
            sched.observe(s, v, a, 2.0, se, 1.0)
        return sched.alpha

    a1, a2 = run(), run()
    assert a1.alpha_p == a2.alpha_p
    assert a1.alpha_a == a2.alpha_a
