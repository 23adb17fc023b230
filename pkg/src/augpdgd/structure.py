"""Block objects of the shifted (error) dynamics of the augmented PDGD.

State ordering is agent-major: ``z = col_i(x_i, lambda_i)`` with ``r_i = n_i + m_i``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .problem import Problem, validate_problem


class EmptyCoupling(ValueError):
    pass


class MissingHistory(LookupError):
    pass


@dataclass(frozen=True)
class StateLayout:
    n_dims: tuple
    m_dims: tuple

    @property
    def r_dims(self):
        return tuple(n + m for n, m in zip(self.n_dims, self.m_dims))

    @property
    def offsets(self):
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.r_dims)]))

    @property
    def r(self) -> int:
        return int(sum(self.r_dims))

    def z_slice(self, i) -> slice:
        o = self.offsets
        return slice(o[i], o[i + 1])

    def x_slice(self, i) -> slice:
        o = self.offsets[i]
        return slice(o, o + self.n_dims[i])

    def l_slice(self, i) -> slice:
        o = self.offsets[i] + self.n_dims[i]
        return slice(o, o + self.m_dims[i])

    @property
    def x_index(self) -> np.ndarray:
        """Positions of the stacked primal vector inside z."""
        return np.concatenate([np.arange(s.start, s.stop) for s in map(self.x_slice, range(len(self.n_dims)))])

    @property
    def l_index(self) -> np.ndarray:
        parts = [np.arange(s.start, s.stop) for s in map(self.l_slice, range(len(self.n_dims)))]
        return np.concatenate(parts).astype(int) if parts else np.zeros(0, int)

    def pack(self, x, lam) -> np.ndarray:
        x, lam = np.asarray(x, dtype=float), np.asarray(lam, dtype=float)
        z = np.zeros((self.r,) + x.shape[1:])
        z[self.x_index] = x
        z[self.l_index] = lam
        return z

    def unpack(self, z):
        z = np.asarray(z)
        return z[self.x_index], z[self.l_index]


def layout_of(p: Problem) -> StateLayout:
    return StateLayout(tuple(p.n_dims), tuple(p.m_dims))


@dataclass
class DelayEdge:
    """One delayed channel. ``pairs`` lists the (target, source) agent pairs it carries."""

    k: int
    pairs: tuple
    T: np.ndarray
    h: float
    d: float

    @property
    def target(self):
        return self.pairs[0][0] if len(self.pairs) == 1 else None

    @property
    def source(self):
        return self.pairs[0][1] if len(self.pairs) == 1 else None


@dataclass
class GainMatrix:
    layout: StateLayout
    blocks: list

    def __post_init__(self):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks]
        for i, (b, ri) in enumerate(zip(self.blocks, self.layout.r_dims)):
            if b.shape != (ri, ri):
                raise ValueError(f"gain block {i} has shape {b.shape}, expected {(ri, ri)}")

    @classmethod
    def zero(cls, layout):
        return cls(layout, [np.zeros((ri, ri)) for ri in layout.r_dims])

    @classmethod
    def from_dense(cls, layout, K):
        K = np.asarray(K, dtype=float)
        return cls(layout, [K[layout.z_slice(i), layout.z_slice(i)] for i in range(len(layout.r_dims))])

    @property
    def matrix(self) -> np.ndarray:
        K = np.zeros((self.layout.r, self.layout.r))
        for i, b in enumerate(self.blocks):
            s = self.layout.z_slice(i)
            K[s, s] = b
        return K


def local_matrix(p: Problem, i: int, hess) -> np.ndarray:
    """``[-B, -A_ii'; A_ii, 0]`` for agent i with curvature block ``B``."""
    n_i, m_i = p.n_dims[i], p.m_dims[i]
    out = np.zeros((n_i + m_i, n_i + m_i))
    out[:n_i, :n_i] = -np.asarray(hess, dtype=float).reshape(n_i, n_i)
    if m_i:
        Aii = p.block(i, i)
        out[:n_i, n_i:] = -Aii.T
        out[n_i:, :n_i] = Aii
    return out


def coupling_block(p: Problem, i: int, j: int) -> np.ndarray:
    """``T_ij = [0, -A_ji'; A_ij, 0]`` (shape r_i x r_j)."""
    n_i, m_i, n_j, m_j = p.n_dims[i], p.m_dims[i], p.n_dims[j], p.m_dims[j]
    T = np.zeros((n_i + m_i, n_j + m_j))
    if m_j:
        T[:n_i, n_j:] = -p.block(j, i).T
    if m_i:
        T[n_i:, :n_j] = p.block(i, j)
    return T


def _gauss_legendre_secant(cost, x_hat, x_ref, nodes=16):
    s, w = np.polynomial.legendre.leggauss(nodes)
    s, w = 0.5 * (s + 1.0), 0.5 * w
    d = x_hat - x_ref
    return sum(wk * cost.hessian(x_ref + sk * d) for sk, wk in zip(s, w))


@dataclass
class ErrorSystem:
    problem: Problem
    layout: StateLayout
    edges: list
    classes: dict
    gain: GainMatrix | None = None
    collapsed: bool = False
    vertex_cap: int = 256
    _vertex_locals: dict = field(default_factory=dict, repr=False)

    @property
    def rho(self) -> int:
        return len(self.edges)

    @property
    def r(self) -> int:
        return self.layout.r

    def agent_class(self, i) -> int:
        for c, members in self.classes.items():
            if i in members:
                return c
        raise KeyError(i)

    def curvature_at(self, i, x_i, x_ref=None):
        cost = self.problem.costs[i]
        if x_ref is None:
            return cost.hessian(x_i)
        x_i, x_ref = np.asarray(x_i, dtype=float), np.asarray(x_ref, dtype=float)
        return _gauss_legendre_secant(cost, x_i, x_ref)

    def a_of(self, x_hat, x_ref=None) -> np.ndarray:
        """``blkdiag(A_i(x_i))`` with the pointwise Hessian, or the mean-value
        Hessian between ``x_ref`` and ``x_hat`` when a reference is given."""
        p = self.problem
        out = np.zeros((self.r, self.r))
        for i in range(p.N):
            xi = x_hat[p.xs(i)]
            ref = None if x_ref is None else x_ref[p.xs(i)]
            s = self.layout.z_slice(i)
            out[s, s] = local_matrix(p, i, self.curvature_at(i, xi, ref))
        return out

    def local_vertices(self, i) -> list:
        """Constant local matrices used for agent i in the vertex LMIs."""
        p = self.problem
        c = self.agent_class(i)
        cost = p.costs[i]
        if c == 1:
            return [local_matrix(p, i, cost.form.H)]
        if c == 2:
            return [local_matrix(p, i, V) for V in cost.vertices]
        return [local_matrix(p, i, np.zeros((p.n_dims[i], p.n_dims[i])))]

    def vertex_count(self) -> int:
        return int(np.prod([len(self.problem.costs[i].vertices) for i in self.classes[2]])) if self.classes[2] else 1

    def vertices(self):
        """``[(j, A_tilde_j)]`` over the product of the polytopic agents' vertices."""
        p = self.problem
        base = np.zeros((self.r, self.r))
        for i in range(p.N):
            if i not in self.classes[2]:
                s = self.layout.z_slice(i)
                base[s, s] = self.local_vertices(i)[0]
        n2 = list(self.classes[2])
        choices = [range(len(p.costs[i].vertices)) for i in n2]
        out = []
        for j in itertools.product(*choices):
            At = base.copy()
            for i, ji in zip(n2, j):
                s = self.layout.z_slice(i)
                At[s, s] = self.local_vertices(i)[ji]
            out.append((tuple(j), At))
        return out

    def coupling_sum(self) -> np.ndarray:
        return sum((e.T for e in self.edges), np.zeros((self.r, self.r)))

    def with_gain(self, gain) -> "ErrorSystem":
        if gain is not None and not isinstance(gain, GainMatrix):
            gain = GainMatrix.from_dense(self.layout, gain)
        return ErrorSystem(self.problem, self.layout, self.edges, self.classes, gain, self.collapsed,
                           self.vertex_cap)

    def with_delays(self, h, d) -> "ErrorSystem":
        hs = np.broadcast_to(np.asarray(h, dtype=float), (self.rho,))
        ds = np.broadcast_to(np.asarray(d, dtype=float), (self.rho,))
        edges = [DelayEdge(e.k, e.pairs, e.T, float(hk), float(dk)) for e, hk, dk in zip(self.edges, hs, ds)]
        return ErrorSystem(self.problem, self.layout, edges, self.classes, self.gain, self.collapsed,
                           self.vertex_cap)


def _check_delay(h, d):
    if not np.isfinite(h) or h < 0:
        raise ValueError(f"delay bound must be >= 0, got {h}")
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"delay-rate bound must lie in [0, 1], got {d}")


def enumerate_pairs(p: Problem) -> list:
    """``(i, j)``, j != i, with a nonzero coupling block, in row-major order."""
    return [(i, j) for i in range(p.N) for j in range(p.N)
            if i != j and np.any(coupling_block(p, i, j))]


def build_error_system(p: Problem, delays=(0.0, 0.0), collapse: bool = True, vertex_cap: int = 256) -> ErrorSystem:
    """Assemble the compact error system.

    ``delays`` is either one ``(h, d)`` pair shared by every channel, or a mapping
    ``{(i, j): (h, d)}`` over the coupled pairs (0-based agent indices). Shared
    delays are merged into a single channel unless ``collapse`` is False.
    """
    problems = validate_problem(p)
    if problems:
        raise ValueError("invalid problem: " + "; ".join(problems))
    layout = layout_of(p)
    pairs = enumerate_pairs(p)
    has_diag = any(p.m_dims[i] and np.any(p.block(i, i)) for i in range(p.N))
    if not pairs and not has_diag:
        raise EmptyCoupling("no coupling between or within agents")

    def embedded(i, j):
        T = np.zeros((layout.r, layout.r))
        T[layout.z_slice(i), layout.z_slice(j)] = coupling_block(p, i, j)
        return T

    homogeneous = not isinstance(delays, dict)
    if homogeneous:
        h, d = map(float, delays)
        _check_delay(h, d)
        per_pair = {pr: (h, d) for pr in pairs}
    else:
        per_pair = {}
        for pr in pairs:
            if pr not in delays:
                raise ValueError(f"no delay bound given for coupled pair {pr}")
            hk, dk = map(float, delays[pr])
            _check_delay(hk, dk)
            per_pair[pr] = (hk, dk)
    if homogeneous and collapse and pairs:
        T = sum(embedded(i, j) for i, j in pairs)
        edges = [DelayEdge(1, tuple(pairs), T, h, d)]
    else:
        edges = [DelayEdge(k + 1, (pr,), embedded(*pr), *per_pair[pr]) for k, pr in enumerate(pairs)]
    classes = {1: [], 2: [], 3: []}
    for i, c in enumerate(p.costs):
        classes[{"quadratic": 1, "polytopic": 2, "general": 3}[c.kind]].append(i)
    return ErrorSystem(p, layout, edges, classes, None, homogeneous and collapse and bool(pairs), vertex_cap)


# ---------------------------------------------------------------------------
# right-hand sides


def _edge_of_pair(sys: ErrorSystem):
    return {pr: e for e in sys.edges for pr in e.pairs}


def rhs_augmented(sys: ErrorSystem, state, delayed: Callable | Sequence | None = None, gain=True):
    """Time derivative of ``(x, lam, u1, u2)`` for the augmented PDGD, written
    agent by agent.

    ``delayed(k)`` (or ``delayed[k-1]``) returns the full state vector z at
    ``t - tau_k`` for edge ``k``; with ``None`` every delayed lookup returns the
    current state. Own-block terms always use the undelayed state.
    """
    p = sys.problem
    L = sys.layout
    x, lam, u1, u2 = (np.asarray(v, dtype=float) for v in state)
    z_now = L.pack(x, lam)

    def lookup(edge):
        if delayed is None:
            return z_now
        try:
            v = delayed(edge.k) if callable(delayed) else delayed[edge.k - 1]
        except (IndexError, KeyError):
            raise MissingHistory(f"no delayed state for edge {edge.k}") from None
        if v is None:
            raise MissingHistory(f"no delayed state for edge {edge.k}")
        return np.asarray(v, dtype=float)

    edge_of = _edge_of_pair(sys)
    K = sys.gain if (gain and sys.gain is not None) else None
    dx = np.zeros_like(x)
    dl = np.zeros_like(lam)
    for i in range(p.N):
        xi = x[p.xs(i)]
        acc = -p.costs[i].gradient(xi)
        if p.m_dims[i]:
            acc = acc - p.block(i, i).T @ lam[p.ls(i)]
        for j in range(p.N):
            if j == i or not p.m_dims[j]:
                continue
            Aji = p.block(j, i)
            if not np.any(Aji):
                continue
            zj = lookup(edge_of[(i, j)])
            acc = acc - Aji.T @ zj[L.l_slice(j)]
        dx[p.xs(i)] = acc
    for i in range(p.N):
        if not p.m_dims[i]:
            continue
        acc = p.block(i, i) @ x[p.xs(i)] - p.b_block(i)
        for j in range(p.N):
            if j == i:
                continue
            Aij = p.block(i, j)
            if not np.any(Aij):
                continue
            zj = lookup(edge_of[(i, j)])
            acc = acc + Aij @ zj[L.x_slice(j)]
        dl[p.ls(i)] = acc
    if K is not None:
        for i in range(p.N):
            n_i = p.n_dims[i]
            Ki = K.blocks[i]
            ex = x[p.xs(i)] - u1[p.xs(i)]
            el = lam[p.ls(i)] - u2[p.ls(i)]
            dx[p.xs(i)] += Ki[:n_i, :n_i] @ ex + Ki[:n_i, n_i:] @ el
            if p.m_dims[i]:
                dl[p.ls(i)] += Ki[n_i:, :n_i] @ ex + Ki[n_i:, n_i:] @ el
    return dx, dl, x - u1, lam - u2


def rhs_standard(sys: ErrorSystem, x, lam, delayed=None):
    """Delayed standard PDGD (no controller states)."""
    dx, dl, _, _ = rhs_augmented(sys, (x, lam, x, lam), delayed, gain=False)
    return dx, dl


def rhs_error_compact(sys: ErrorSystem, z_err, u_err, delayed_err: Sequence, x_bar):
    """``(A(x)+K) z - K u + sum_k T_k z_tau_k`` and ``z - u`` in error coordinates.

    The curvature term is the exact secant ``grad f(x_bar + x_err) - grad f(x_bar)``.
    """
    p = sys.problem
    L = sys.layout
    K = sys.gain.matrix if sys.gain is not None else np.zeros((sys.r, sys.r))
    z_err = np.asarray(z_err, dtype=float)
    u_err = np.asarray(u_err, dtype=float)
    A0 = np.zeros((sys.r, sys.r))
    for i in range(p.N):
        s = L.z_slice(i)
        A0[s, s] = local_matrix(p, i, np.zeros((p.n_dims[i], p.n_dims[i])))
    x_err = z_err[L.x_index]
    x_bar = np.asarray(x_bar, dtype=float)
    curv = np.zeros(sys.r)
    curv[L.x_index] = -(p.gradient(x_bar + x_err) - p.gradient(x_bar))
    dz = A0 @ z_err + curv + K @ (z_err - u_err)
    for e, zd in zip(sys.edges, delayed_err):
        dz = dz + e.T @ np.asarray(zd, dtype=float)
    return dz, z_err - u_err


def dump_matrices_csv(sys: ErrorSystem, outdir) -> list:
    """Write vertex matrices, coupling matrices and the gain as dense CSV files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for j, At in sys.vertices():
        tag = "-".join(str(v + 1) for v in j) or "0"
        f = outdir / f"A_vertex_{tag}.csv"
        np.savetxt(f, At, delimiter=",", fmt="%.17g")
        written.append(f)
    for e in sys.edges:
        f = outdir / f"T_{e.k}.csv"
        np.savetxt(f, e.T, delimiter=",", fmt="%.17g")
        written.append(f)
    if sys.gain is not None:
        f = outdir / "K.csv"
        np.savetxt(f, sys.gain.matrix, delimiter=",", fmt="%.17g")
        written.append(f)
    return written
