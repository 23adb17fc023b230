import numpy as np
import pytest

from augpdgd.problem import Problem, QuadraticForm, make_cost, solve_kkt
from augpdgd.structure import (EmptyCoupling, GainMatrix, MissingHistory, build_error_system, coupling_block,
                               dump_matrices_csv, enumerate_pairs, layout_of, local_matrix, rhs_augmented,
                               rhs_error_compact, rhs_standard)

from conftest import two_agent


def diag_problem():
    """Two agents each constrained only by their own block."""
    c2 = make_cost(QuadraticForm(np.diag([1.0, 2.0]), [0.5, -1.0]))
    c1 = make_cost(QuadraticForm([[1.5]], [0.2]))
    A = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return Problem([2, 1], [1, 1], A, [1.0, 2.0], [c2, c1], name="diag")


def standard_rhs_dense(p, x, lam):
    return -p.gradient(x) - p.A.T @ lam, p.A @ x - p.b


def test_layout_contiguous(p10):
    L = layout_of(p10)
    assert L.r == 19 and L.offsets[0] == 0 and L.offsets[-1] == 19
    covered = np.concatenate([np.arange(s.start, s.stop) for s in map(L.z_slice, range(10))])
    assert np.array_equal(covered, np.arange(19))
    assert sorted(np.concatenate([L.x_index, L.l_index])) == list(range(19))
    x, lam = np.arange(10.0), -np.arange(9.0)
    assert np.array_equal(L.unpack(L.pack(x, lam))[0], x)


def test_paper10_collapsed_edge(p10):
    sys = build_error_system(p10, (0.5, 0.1))
    full = build_error_system(p10, (0.5, 0.1), collapse=False)
    assert sys.rho == 1 and sys.collapsed
    assert full.rho == len(enumerate_pairs(p10)) == 18
    assert np.array_equal(sys.edges[0].T, full.coupling_sum())
    assert sys.vertex_count() == 8 and len(sys.vertices()) == 8


def test_paper10_classes_partition(p10):
    sys = build_error_system(p10, (0.5, 0.1))
    assert sys.classes == {1: [0, 1, 2, 3, 4, 5, 6], 2: [7, 8, 9], 3: []}


def test_two_agent_heterogeneous_edges():
    p = two_agent()
    sys = build_error_system(p, {(0, 1): (0.3, 0.1), (1, 0): (0.2, 0.5)})
    assert sys.rho == 2
    pairs = [e.pairs[0] for e in sys.edges]
    assert pairs == [(0, 1), (1, 0)]
    # (0, 1): agent 1's dual reads agent 2's primal; (1, 0): agent 2's primal reads agent 1's dual
    T01, T10 = sys.edges[0].T, sys.edges[1].T
    expect01 = np.zeros((3, 3))
    expect01[1, 2] = -1.0  # A_12 = -1 in the dual row of agent 1
    expect10 = np.zeros((3, 3))
    expect10[2, 1] = 1.0  # -A_12' in the primal row of agent 2
    assert np.array_equal(T01, expect01) and np.array_equal(T10, expect10)
    assert (sys.edges[0].h, sys.edges[1].d) == (0.3, 0.5)


def test_coupling_block_form(p10):
    for i, j in enumerate_pairs(p10):
        T = coupling_block(p10, i, j)
        ni, nj = p10.n_dims[i], p10.n_dims[j]
        assert np.all(T[:ni, :nj] == 0)
        if p10.m_dims[i] and p10.m_dims[j]:
            assert np.all(T[ni:, nj:] == 0)


def test_diagonal_constraints_have_no_edges():
    p = diag_problem()
    sys = build_error_system(p, (1.0, 0.1))
    assert sys.rho == 0
    rng = np.random.default_rng(0)
    x, lam = rng.normal(size=3), rng.normal(size=2)
    delayed = [rng.normal(size=3)]
    a = rhs_standard(sys, x, lam, delayed)
    b = rhs_standard(sys, x, lam, None)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_empty_coupling_raises(monkeypatch):
    import augpdgd.structure as st

    c = make_cost(QuadraticForm([[1.0]]))
    p = Problem([1, 1], [1, 0], [[0.0, 0.0]], [0.0], [c, c])
    # the rank check would reject this problem first; skip it to reach the coupling check
    monkeypatch.setattr(st, "validate_problem", lambda q: [])
    with pytest.raises(EmptyCoupling):
        st.build_error_system(p)


@pytest.mark.parametrize("bad", [(-1.0, 0.1), (1.0, 1.5), (np.inf, 0.0)])
def test_invalid_delays_rejected(p10, bad):
    with pytest.raises(ValueError):
        build_error_system(p10, bad)


def test_standard_rhs_matches_dense_formula(p10):
    sys = build_error_system(p10, (0.0, 0.0))
    L = sys.layout
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, lam = rng.normal(size=10) * 3, rng.normal(size=9) * 3
        dx, dl = rhs_standard(sys, x, lam)
        ex, el = standard_rhs_dense(p10, x, lam)
        assert np.abs(dx - ex).max() < 1e-12 and np.abs(dl - el).max() < 1e-12
        zero = GainMatrix.zero(L)
        out = rhs_augmented(sys.with_gain(zero), (x, lam, x + 1, lam - 1))
        assert np.abs(out[0] - ex).max() < 1e-12 and np.abs(out[1] - el).max() < 1e-12


def test_kkt_point_is_equilibrium(p10, kkt10):
    sys = build_error_system(p10, (0.5, 0.1))
    rng = np.random.default_rng(2)
    K = GainMatrix.from_dense(sys.layout, rng.normal(size=(19, 19)))
    xs, ls = kkt10.x_star, kkt10.lambda_star
    zs = sys.layout.pack(xs, ls)
    out = rhs_augmented(sys.with_gain(K), (xs, ls, xs, ls), [zs])
    assert max(np.abs(v).max() for v in out) < 1e-9


def test_augmented_minus_standard_is_gain_and_filter():
    p = two_agent()
    sys = build_error_system(p, (0.0, 0.0))
    L = sys.layout
    rng = np.random.default_rng(4)
    Kd = np.zeros((3, 3))
    Kd[:2, :2] = rng.normal(size=(2, 2))
    Kd[2, 2] = rng.normal()
    x, lam, u1, u2 = rng.normal(size=2), rng.normal(size=1), rng.normal(size=2), rng.normal(size=1)
    aug = rhs_augmented(sys.with_gain(Kd), (x, lam, u1, u2))
    std = rhs_standard(sys, x, lam)
    diff = L.pack(aug[0] - std[0], aug[1] - std[1])
    assert np.abs(diff - Kd @ (L.pack(x, lam) - L.pack(u1, u2))).max() < 1e-14
    assert np.array_equal(aug[2], x - u1) and np.array_equal(aug[3], lam - u2)


def test_gain_blocks_must_match_layout(p10):
    L = layout_of(p10)
    with pytest.raises(ValueError):
        GainMatrix(L, [np.eye(3)] * 10)
    K = GainMatrix.from_dense(L, np.ones((19, 19)))
    M = K.matrix
    mask = np.zeros((19, 19), bool)
    for i in range(10):
        s = L.z_slice(i)
        mask[s, s] = True
    assert np.all(M[~mask] == 0) and np.all(M[mask] == 1)


def test_missing_history(p10):
    sys = build_error_system(p10, (0.5, 0.1))
    x, lam = np.zeros(10), np.zeros(9)
    with pytest.raises(MissingHistory):
        rhs_standard(sys, x, lam, lambda k: None)
    with pytest.raises(MissingHistory):
        rhs_standard(sys, x, lam, [])


@pytest.mark.parametrize("which", ["two", "paper10"])
def test_compact_error_dynamics_matches_shifted(which, p10):
    p = two_agent() if which == "two" else p10
    sys_h = build_error_system(p, (0.4, 0.1), collapse=False)
    L = sys_h.layout
    kk = solve_kkt(p)
    zs = L.pack(kk.x_star, kk.lambda_star)
    rng = np.random.default_rng(5)
    K = np.zeros((L.r, L.r))
    for i in range(p.N):
        s = L.z_slice(i)
        K[s, s] = rng.normal(size=(s.stop - s.start,) * 2)
    sys_h = sys_h.with_gain(K)
    for _ in range(100):
        z = zs + rng.normal(size=L.r) * 2
        u = zs + rng.normal(size=L.r) * 2
        lags = [zs + rng.normal(size=L.r) * 2 for _ in sys_h.edges]
        x, lam = L.unpack(z)
        u1, u2 = L.unpack(u)
        out = rhs_augmented(sys_h, (x, lam, u1, u2), lags)
        dz_ref, du_ref = L.pack(out[0], out[1]), L.pack(out[2], out[3])
        dz, du = rhs_error_compact(sys_h, z - zs, u - zs, [v - zs for v in lags], kk.x_star)
        assert np.abs(dz - dz_ref).max() < 1e-10 and np.abs(du - du_ref).max() < 1e-10


def test_compact_without_edges_single_block():
    p = diag_problem()
    sys = build_error_system(p, (0.0, 0.0))
    L = sys.layout
    rng = np.random.default_rng(6)
    K = GainMatrix(L, [rng.normal(size=(3, 3)), rng.normal(size=(2, 2))])
    sys = sys.with_gain(K)
    z, u = rng.normal(size=5), rng.normal(size=5)
    dz, du = rhs_error_compact(sys, z, u, [], np.zeros(3))
    A = sys.a_of(np.zeros(3))
    assert np.abs(dz - ((A + K.matrix) @ z - K.matrix @ u)).max() < 1e-13
    assert np.array_equal(du, z - u)


def test_equilibrium_of_compact_dynamics(p10, kkt10):
    sys = build_error_system(p10, (0.5, 0.1)).with_gain(np.eye(19))
    dz, du = rhs_error_compact(sys, np.zeros(19), np.zeros(19), [np.zeros(19)], kkt10.x_star)
    assert not np.any(dz) and not np.any(du)


def test_a_of_uses_local_blocks(p10):
    sys = build_error_system(p10, (0.5, 0.1))
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.uniform(-10, 10, 10)
        A = sys.a_of(x)
        for i in range(10):
            s = sys.layout.z_slice(i)
            B = p10.costs[i].hessian(x[p10.xs(i)])
            assert np.array_equal(A[s, s], local_matrix(p10, i, B))
            c = p10.costs[i]
            ev = np.linalg.eigvalsh(B)
            assert c.mu - 1e-9 <= ev[0] and ev[-1] <= c.ell + 1e-9
            if i in sys.classes[2]:
                vs = [v[0, 0] for v in c.vertices]
                assert min(vs) <= B[0, 0] <= max(vs)


def test_mean_value_curvature_reproduces_gradient_difference(p10):
    sys = build_error_system(p10, (0.5, 0.1))
    rng = np.random.default_rng(8)
    for i in (7, 8, 9):
        a, b = rng.uniform(-8, 8, 2)
        B = sys.curvature_at(i, np.array([a]), np.array([b]))
        g = p10.costs[i].gradient
        assert abs(B[0, 0] * (a - b) - (g(np.array([a])) - g(np.array([b])))[0]) < 1e-8


def test_dump_matrices(tmp_path, p10):
    sys = build_error_system(p10, (0.5, 0.1)).with_gain(np.eye(19))
    files = dump_matrices_csv(sys, tmp_path)
    assert len(files) == 8 + 1 + 1
    K = np.loadtxt(tmp_path / "K.csv", delimiter=",")
    assert np.array_equal(K, np.eye(19))
