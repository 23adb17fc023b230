import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from augpdgd.lmi import AffineMatrix, assemble_vertex_program, decision_vars_from, evaluate_phi_at, phi_matrix
from augpdgd.problem import paper10
from augpdgd.sdp import check_certificate
from augpdgd.simulate import DelaySignal, parse_delay
from augpdgd.structure import build_error_system
from augpdgd.synthesis import Certificate, rebuild_sdp, synthesize

from conftest import two_agent

P10 = paper10()
SYS10 = build_error_system(P10, (0.5, 0.1))
SDP10 = assemble_vertex_program(SYS10, eps=1.0)

coord = st.floats(-10.0, 10.0, allow_nan=False)
agent = st.integers(0, 9)
cfg = settings(max_examples=60, deadline=None)


@cfg
@given(agent, coord, coord)
def test_gradient_monotonicity_bounds(i, a, b):
    c = P10.costs[i]
    x, y = np.array([a]), np.array([b])
    inner = float((c.gradient(x) - c.gradient(y)) @ (x - y))
    sq = (a - b) ** 2
    assert c.mu * sq - 1e-9 * (1 + sq) <= inner <= c.ell * sq + 1e-9 * (1 + sq)


@cfg
@given(agent, coord)
def test_hessian_in_curvature_interval(i, a):
    c = P10.costs[i]
    ev = np.linalg.eigvalsh(c.hessian(np.array([a])))
    assert c.mu - 1e-9 <= ev[0] and ev[-1] <= c.ell + 1e-9
    if c.kind == "polytopic":
        vs = [v[0, 0] for v in c.vertices]
        assert min(vs) - 1e-8 <= ev[0] <= max(vs) + 1e-8


@cfg
@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31))
def test_block_affinity(theta, seed):
    rng = np.random.default_rng(seed)
    y1, y2 = rng.normal(size=SDP10.nv), rng.normal(size=SDP10.nv)
    for b in SDP10.blocks[:8:3] + SDP10.blocks[8:]:
        F = b(theta * y1 + (1 - theta) * y2)
        G = theta * b(y1) + (1 - theta) * b(y2)
        assert np.abs(F - G).max() <= 1e-13 * max(1.0, np.abs(F).max())
        assert np.array_equal(F, F.T)


@cfg
@given(st.floats(0.0, 3.0), st.floats(0.0, 1.0), st.floats(0.0, 500.0))
def test_sinusoid_delay_bounds(h, d, t0):
    sig = DelaySignal.sinusoid(h, d)
    t = t0 + np.linspace(0.0, 5.0, 501)
    tau = sig(t)
    assert np.all(tau >= 0) and np.all(tau <= h + 1e-15)
    assert np.all(np.abs(np.diff(tau)) <= d * np.diff(t) + 1e-12)


@cfg
@given(st.floats(0.01, 3.0), st.floats(0.05, 2.0), st.integers(0, 1000))
def test_fast_delay_bounds(h, period, seed):
    t = np.linspace(0.0, 20.0, 2001)
    for sig in (DelaySignal.sawtooth(h, period), DelaySignal.piecewise_random(h, period, seed)):
        tau = sig(t)
        assert sig.fast_varying and np.all(tau >= 0) and np.all(tau <= h)


@cfg
@given(st.floats(0.0, 5.0), st.floats(0.0, 1.0))
def test_parse_delay_round_trip(h, d):
    assert parse_delay(f"sin:h={h!r},d={d!r}") == DelaySignal.sinusoid(h, d)


@pytest.fixture(scope="module")
def two_cert():
    sys = build_error_system(two_agent(), (2.0, 0.1))
    return sys, synthesize(sys, eps=1.0)


@settings(max_examples=15, deadline=None)
@given(h=st.floats(0.0, 2.0))
def test_smaller_delay_keeps_certificate(two_cert, h):
    sys, cert = two_cert
    sdp = assemble_vertex_program(sys, h=h, eps=cert.eps, delta=cert.delta)
    for m, b in zip(check_certificate(sdp, cert.y), sdp.blocks):
        assert m >= sdp.margin_of(b) - 1e-8


def test_certificate_round_trip_margins(two_cert):
    sys, cert = two_cert
    back = Certificate.from_dict(cert.to_dict())
    assert np.allclose(check_certificate(rebuild_sdp(sys, back), back.y), cert.margins, atol=1e-9, rtol=0)


@cfg
@given(st.sampled_from([np.pi, -np.pi]), st.lists(coord, min_size=10, max_size=10), st.integers(0, 2 ** 31))
def test_vertex_consistency(x9, xs, seed):
    # agent 9 (index 8) sits exactly on a vertex: its rows of Phi match that vertex's Phi
    v = decision_vars_from(SDP10, np.random.default_rng(seed).normal(size=SDP10.nv))
    x = np.array(xs)
    x[8] = x9
    j = 0 if x9 > 0 else 1  # sin curvature is 0.75 at +pi, 1.25 at -pi
    A = SYS10.a_of(x)
    At = A.copy()
    s = SYS10.layout.z_slice(8)
    At[s, s] = SYS10.local_vertices(8)[j]
    Phi, Phv = evaluate_phi_at(SYS10, v, x), phi_matrix(SYS10, v, At)
    r = SYS10.r
    rows = np.concatenate([np.arange(s.start, s.stop) + k * r for k in range(5)])
    assert np.abs(Phi[rows] - Phv[rows]).max() <= 1e-10 * max(1.0, np.abs(Phi).max())


@cfg
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_affine_matrix_algebra(p, q, seed):
    rng = np.random.default_rng(seed)
    nv = 3
    A = AffineMatrix((p, q), rng.normal(size=(p, q)), rng.normal(size=(p * q, nv)))
    C, D = rng.normal(size=(2, p)), rng.normal(size=(q, 2))
    y = rng.normal(size=nv)

    def ev(M):
        return M.const + (M.coef @ y).reshape(M.shape)

    Ay = ev(A)
    assert np.allclose(ev(A.T), Ay.T, atol=1e-13)
    assert np.allclose(ev(A.lmul(C)), C @ Ay, atol=1e-12)
    assert np.allclose(ev(A.rmul(D)), Ay @ D, atol=1e-12)
    assert np.allclose(ev(A + A), 2 * Ay, atol=1e-13)
    assert np.allclose(ev(-A), -Ay, atol=1e-13)
