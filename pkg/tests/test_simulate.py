import csv

import numpy as np
import pytest

from augpdgd.lmi import DecisionVars
from augpdgd.simulate import (CONVERGED, DIVERGED, OSCILLATING, DelaySignal, Diverged, Unsupported,
                              classify_stability, evaluate_lkf, integrate, lkf_decrease, parse_delay, summary,
                              summary_json)
from augpdgd.structure import GainMatrix, build_error_system

from conftest import two_agent


@pytest.fixture(scope="module")
def sys10(p10):
    return build_error_system(p10, (0.5, 0.1))


@pytest.fixture(scope="module")
def z_star10(sys10, kkt10):
    return sys10.layout.pack(kkt10.x_star, kkt10.lambda_star)


def block_gain(layout, rng, scale=0.3):
    return GainMatrix.from_dense(layout, rng.normal(size=(layout.r, layout.r)) * scale).matrix


def test_parse_delay():
    assert parse_delay("const:0.2") == DelaySignal.constant(0.2)
    assert parse_delay("sin:h=1.0,d=0.1") == DelaySignal.sinusoid(1.0, 0.1)
    assert parse_delay("saw:h=0.5,period=2") == DelaySignal.sawtooth(0.5, 2.0)
    assert parse_delay("rand:h=0.5,dwell=0.2,seed=3") == DelaySignal.piecewise_random(0.5, 0.2, 3)
    with pytest.raises(ValueError, match="misses h"):
        parse_delay("sin:d=0.1")
    with pytest.raises(ValueError):
        parse_delay("spline:h=1")


def test_delay_signals_respect_bounds():
    t = np.linspace(0, 50, 50001)
    for sig in (DelaySignal.sinusoid(1.02, 0.1), DelaySignal.sawtooth(0.7, 0.3),
                DelaySignal.piecewise_random(0.9, 0.25, seed=4), DelaySignal.constant(0.3)):
        tau = sig(t)
        assert tau.min() >= 0 and tau.max() <= sig.h + 1e-15
    tau = DelaySignal.sinusoid(1.02, 0.1)(t)
    assert np.abs(np.diff(tau) / np.diff(t)).max() <= 0.1 + 1e-9
    assert DelaySignal.sinusoid(0.0, 0.1)(t).max() == 0.0
    r1, r2 = DelaySignal.piecewise_random(0.9, 0.25, 4), DelaySignal.piecewise_random(0.9, 0.25, 4)
    assert np.array_equal(r1(t), r2(t))


def test_backends_agree(sys10, z_star10):
    rng = np.random.default_rng(0)
    K = block_gain(sys10.layout, rng)
    z0 = z_star10 + rng.normal(size=19)
    u0 = z_star10 + rng.normal(size=19)
    kw = dict(T=2.0, dt=0.01, gain=K, save_dt=0.05)
    a = integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z0, u0, backend="numba", **kw)
    b = integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z0, u0, backend="numpy", **kw)
    assert np.abs(a.z - b.z).max() < 1e-11 and np.abs(a.u - b.u).max() < 1e-11
    assert np.abs(a.dz - b.dz).max() < 1e-10


def test_zero_gain_matches_standard_dynamics(sys10, z_star10):
    rng = np.random.default_rng(1)
    z0 = z_star10 + rng.normal(size=19)
    std = integrate(sys10, DelaySignal.constant(0.0), z0, T=3.0, dt=0.01)
    aug = integrate(sys10, DelaySignal.constant(0.0), z0, z0 + 5.0, T=3.0, dt=0.01, gain=np.zeros((19, 19)))
    assert aug.augmented and not std.augmented
    assert np.abs(aug.z - std.z).max() < 1e-9


def test_equilibrium_is_kept(sys10, z_star10):
    # a damping gain; an unstable one would amplify the solver's 1e-13 residual
    K = -np.eye(19)
    tr = integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z_star10, T=10.0, dt=0.01, gain=K, z_star=z_star10)
    assert np.abs(tr.z_err()).max() < 1e-10 and np.abs(tr.u_err()).max() < 1e-10


def test_second_order_in_dt(sys10, z_star10):
    z0 = z_star10 + np.random.default_rng(3).normal(size=19)
    ends = [integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z0, T=4.0, dt=dt, save_dt=0.1).z[-1]
            for dt in (0.02, 0.01, 0.005)]
    e1, e2 = np.abs(ends[0] - ends[1]).max(), np.abs(ends[1] - ends[2]).max()
    assert e1 / e2 > 3.0


def test_integer_delay_history_is_exact():
    # with tau a multiple of dt and constant history, the first step sees exactly z0
    p = two_agent()
    sys = build_error_system(p, (0.2, 0.0))
    z0 = np.array([1.0, -2.0, 0.5])
    tr = integrate(sys, DelaySignal.constant(0.2), z0, T=0.2, dt=0.01)
    x, lam = sys.layout.unpack(z0)
    # agent 2 reads lam1 through the delay, agent 1 reads x2: both frozen at z0 for t < 0.2
    dz0 = tr.dz[0, :, 0]
    ref = np.array([-p.costs[0].gradient(x[:1])[0] - lam[0], x[0] - x[1], -p.costs[1].gradient(x[1:])[0] + lam[0]])
    assert np.abs(dz0 - ref).max() < 1e-13


def test_runs_are_deterministic(sys10, z_star10):
    rng = np.random.default_rng(4)
    z0 = z_star10[:, None] + rng.normal(size=(19, 3))
    sig = DelaySignal.piecewise_random(0.5, 0.2, seed=9)
    a = integrate(sys10, sig, z0, T=2.0, dt=0.01)
    b = integrate(sys10, sig, z0, T=2.0, dt=0.01)
    assert a.z.tobytes() == b.z.tobytes()
    assert a.z.shape == (201, 19, 3)


def test_batch_columns_are_independent(sys10, z_star10):
    rng = np.random.default_rng(5)
    z0 = z_star10[:, None] + rng.normal(size=(19, 2))
    both = integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z0, T=1.0, dt=0.01)
    one = integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z0[:, 1], T=1.0, dt=0.01)
    assert np.abs(both.z[:, :, 1] - one.z[:, :, 0]).max() < 1e-13


def test_divergence_is_marked(sys10, z_star10):
    K = 5.0 * np.eye(19)
    z0 = z_star10 + 1.0
    tr = integrate(sys10, DelaySignal.constant(0.1), z0, z_star10, T=50.0, dt=0.01, gain=K, blowup=1e6)
    assert tr.diverged and tr.diverged_at < 50.0
    assert classify_stability(tr)[0]["label"] == DIVERGED
    with pytest.raises(Diverged):
        integrate(sys10, DelaySignal.constant(0.1), z0, z_star10, T=50.0, dt=0.01, gain=K, blowup=1e6,
                  raise_on_divergence=True)


def test_argument_checks(sys10, z_star10):
    with pytest.raises(ValueError):
        integrate(sys10, DelaySignal.constant(0.1), z_star10, T=1.0, dt=0.0)
    with pytest.raises(ValueError):
        integrate(sys10, [DelaySignal.constant(0.1)] * 2, z_star10, T=1.0)
    with pytest.raises(ValueError):
        integrate(sys10, DelaySignal.constant(0.1), z_star10, T=1.0, backend="fortran")


def test_standard_pdgd_converges_under_small_delay(sys10, z_star10):
    z0 = z_star10 + np.random.default_rng(6).normal(size=19)
    tr = integrate(sys10, DelaySignal.constant(0.2), z0, T=300.0, dt=0.01, save_dt=0.5, z_star=z_star10)
    lab = classify_stability(tr)[0]
    assert lab["label"] == CONVERGED and lab["final"] < 1e-3 * lab["initial"]


def test_classification_labels(sys10, z_star10):
    z0 = z_star10 + np.random.default_rng(7).normal(size=19)
    tr = integrate(sys10, DelaySignal.constant(0.2), z0, T=5.0, dt=0.01, z_star=z_star10)
    assert classify_stability(tr)[0]["label"] == OSCILLATING  # not settled within 5 s
    s = summary(tr, classify_stability(tr), {"seed": 7})
    assert s["label"] == OSCILLATING and s["seed"] == 7
    assert summary_json(s) == summary_json(dict(s))


def test_lkf_zero_at_equilibrium(sys10, z_star10):
    v = DecisionVars.zeros(19, 1)
    rng = np.random.default_rng(8)
    for f in ("Y11", "Y22"):
        G = rng.normal(size=(19, 19))
        setattr(v, f, G @ G.T)
    v.R = [np.eye(19)]
    v.S = [np.eye(19)]
    v.Q = [np.eye(19)]
    tr = integrate(sys10, DelaySignal.sinusoid(0.5, 0.1), z_star10, T=2.0, dt=0.01, gain=np.zeros((19, 19)),
                   z_star=z_star10)
    V = evaluate_lkf(tr, v, 0.5)
    assert np.all(np.isnan(V[:50])) and np.abs(V[50:]).max() < 1e-18


def test_lkf_needs_augmented_trajectory(sys10, z_star10):
    tr = integrate(sys10, DelaySignal.constant(0.1), z_star10, T=1.0, dt=0.01)
    with pytest.raises(Unsupported):
        evaluate_lkf(tr, DecisionVars.zeros(19, 1), 0.5)
    tr = integrate(sys10, DelaySignal.constant(0.1), z_star10, T=0.2, dt=0.01, gain=np.zeros((19, 19)))
    with pytest.raises(Unsupported):
        evaluate_lkf(tr, DecisionVars.zeros(19, 1), 0.5)


def test_lkf_quadrature_of_constant_state(sys10, z_star10):
    # a frozen error e: V2 = h e'Se, V3 = tau e'Qe, V4 = 0 (no motion); V1 from Y
    K = np.zeros((19, 19))
    tr = integrate(sys10, DelaySignal.constant(0.3), z_star10, T=1.0, dt=0.01, gain=K, z_star=z_star10)
    e = np.random.default_rng(9).normal(size=19)
    tr.z = tr.z + e[None, :, None]
    tr.u = tr.u + e[None, :, None]
    tr.dz = np.zeros_like(tr.dz)
    v = DecisionVars.zeros(19, 1)
    v.Y11 = np.eye(19)
    v.S, v.Q, v.R = [2 * np.eye(19)], [3 * np.eye(19)], [np.eye(19)]
    V = evaluate_lkf(tr, v, 0.5)
    ee = e @ e
    assert V[-1] == pytest.approx(ee + 0.5 * 2 * ee + 0.3 * 3 * ee, rel=1e-12)


def test_lkf_decrease_reports_increase():
    V = np.array([np.nan, 1.0, 0.9, 0.95, 0.5])
    out = lkf_decrease(V, slack=1e-3)
    assert not out["ok"] and out["max_increase"] == pytest.approx(0.05)
    assert lkf_decrease(V, slack=0.1)["ok"]


def test_trajectory_csv(tmp_path, sys10, z_star10):
    tr = integrate(sys10, DelaySignal.constant(0.1), z_star10 + 0.1, T=0.5, dt=0.01, save_dt=0.1,
                   gain=np.zeros((19, 19)), z_star=z_star10)
    f = tmp_path / "t.csv"
    tr.write_csv(f, sys10.layout)
    rows = list(csv.reader(open(f)))
    assert rows[0][:2] == ["t", "x1"] and rows[0][-2:] == ["V", "err_norm"]
    assert len(rows) == 1 + len(tr.t) and len(rows[1]) == len(rows[0])
    assert float(rows[1][1]) == pytest.approx(tr.z[0, 0, 0])
