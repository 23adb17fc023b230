"""Matrix-inequality assembly for delay-robust gain synthesis.

Two independent routes build the same objects:

* ``assemble_vertex_program`` / ``add_gain_size_blocks`` produce affine PSD blocks
  ``F(y) = F0 + sum_a y_a F_a`` over a flat decision vector (used by the solver);
* ``phi_matrix`` / ``xi_matrix`` / ``evaluate_phi_at`` build the dense matrices
  directly from numeric decision matrices (used for checks).

Every PSD block is stored as the matrix that must be positive (semi)definite, so
a negative-definite condition ``Xi < 0`` is stored as ``-Xi``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .structure import ErrorSystem

SPARSE_FORMAT = "blocksdp-sparse"
SPARSE_VERSION = 1


class DimensionMismatch(ValueError):
    pass


class VertexExplosion(ValueError):
    pass


# ---------------------------------------------------------------------------
# affine matrices


def _csr(a, nv):
    a = sp.csr_matrix(a)
    if a.shape[1] < nv:
        a = sp.csr_matrix((a.data, a.indices, a.indptr), shape=(a.shape[0], nv))
    return a


class AffineMatrix:
    """``const + sum_a y_a * coef[:, a].reshape(shape)`` with row-major vec."""

    __slots__ = ("shape", "const", "coef")

    def __init__(self, shape, const=None, coef=None, nv=0):
        self.shape = tuple(int(s) for s in shape)
        p, q = self.shape
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, dtype=float).reshape(self.shape)
        self.coef = sp.csr_matrix((p * q, nv)) if coef is None else sp.csr_matrix(coef)
        if self.coef.shape[0] != p * q:
            raise DimensionMismatch(f"coefficient rows {self.coef.shape[0]} != {p}*{q}")

    @property
    def nv(self):
        return self.coef.shape[1]

    @classmethod
    def constant(cls, M, nv=0):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M.shape, M, None, nv)

    @classmethod
    def zeros(cls, p, q, nv=0):
        return cls((p, q), None, None, nv)

    def _aligned(self, other):
        if not isinstance(other, AffineMatrix):
            other = AffineMatrix.constant(other, self.nv)
        if other.shape != self.shape:
            raise DimensionMismatch(f"shape {self.shape} vs {other.shape}")
        nv = max(self.nv, other.nv)
        return _csr(self.coef, nv), _csr(other.coef, nv), other

    def __add__(self, other):
        a, b, other = self._aligned(other)
        return AffineMatrix(self.shape, self.const + other.const, a + b)

    __radd__ = __add__

    def __neg__(self):
        return AffineMatrix(self.shape, -self.const, -self.coef)

    def __sub__(self, other):
        return self + (-other if isinstance(other, AffineMatrix) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, s):
        s = float(s)
        return AffineMatrix(self.shape, s * self.const, s * self.coef)

    __rmul__ = __mul__

    @property
    def T(self):
        p, q = self.shape
        perm = np.arange(p * q).reshape(p, q).T.ravel()
        return AffineMatrix((q, p), self.const.T, self.coef[perm])

    def lmul(self, C):
        """``C @ self`` for a constant matrix ``C``."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        p, q = self.shape
        if C.shape[1] != p:
            raise DimensionMismatch(f"cannot multiply {C.shape} by {self.shape}")
        K = sp.kron(sp.csr_matrix(C), sp.identity(q, format="csr"), format="csr")
        return AffineMatrix((C.shape[0], q), C @ self.const, K @ self.coef)

    def rmul(self, D):
        """``self @ D`` for a constant matrix ``D``."""
        D = np.atleast_2d(np.asarray(D, dtype=float))
        p, q = self.shape
        if D.shape[0] != q:
            raise DimensionMismatch(f"cannot multiply {self.shape} by {D.shape}")
        K = sp.kron(sp.identity(p, format="csr"), sp.csr_matrix(D.T), format="csr")
        return AffineMatrix((p, D.shape[1]), self.const @ D, K @ self.coef)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        coef = self.coef
        if coef.shape[1] > len(y):
            raise DimensionMismatch(f"need {coef.shape[1]} variables, got {len(y)}")
        return self.const + (coef @ y[: coef.shape[1]]).reshape(self.shape)

    def widen(self, nv):
        return AffineMatrix(self.shape, self.const, _csr(self.coef, nv))


def bmat(rows):
    """Block matrix of AffineMatrix/ndarray/None (None = zeros, sizes inferred)."""
    nr, nc = len(rows), len(rows[0])
    hs, ws = [None] * nr, [None] * nc
    nv = 0
    for i, row in enumerate(rows):
        if len(row) != nc:
            raise DimensionMismatch("ragged block rows")
        for j, blk in enumerate(row):
            if blk is None:
                continue
            shp = blk.shape
            if hs[i] is None:
                hs[i] = shp[0]
            if ws[j] is None:
                ws[j] = shp[1]
            if (hs[i], ws[j]) != tuple(shp):
                raise DimensionMismatch(f"block ({i},{j}) has shape {shp}, expected {(hs[i], ws[j])}")
            if isinstance(blk, AffineMatrix):
                nv = max(nv, blk.nv)
    if None in hs or None in ws:
        raise DimensionMismatch("a block row or column is entirely empty")
    ro = np.concatenate([[0], np.cumsum(hs)])
    co = np.concatenate([[0], np.cumsum(ws)])
    P, Q = int(ro[-1]), int(co[-1])
    const = np.zeros((P, Q))
    rows_i, cols_i, vals = [], [], []
    for i, row in enumerate(rows):
        for j, blk in enumerate(row):
            if blk is None:
                continue
            if not isinstance(blk, AffineMatrix):
                blk = AffineMatrix.constant(blk)
            p, q = blk.shape
            const[ro[i]:ro[i] + p, co[j]:co[j] + q] = blk.const
            c = blk.coef.tocoo()
            if c.nnz:
                r_loc, c_loc = np.divmod(c.row, q)
                rows_i.append((ro[i] + r_loc) * Q + co[j] + c_loc)
                cols_i.append(c.col)
                vals.append(c.data)
    if rows_i:
        coef = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows_i), np.concatenate(cols_i))), shape=(P * Q, nv))
    else:
        coef = sp.csr_matrix((P * Q, nv))
    return AffineMatrix((P, Q), const, coef)


def sym_bmat(upper):
    """Symmetric block matrix from its upper triangle (lower entries ignored)."""
    n = len(upper)
    full = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            blk = upper[i][j]
            full[i][j] = blk
            if j > i and blk is not None:
                full[j][i] = blk.T
    return bmat(full)


def blkdiag(blocks):
    n = len(blocks)
    return bmat([[blocks[i] if i == j else _zero_like(blocks[i], blocks[j]) for j in range(n)] for i in range(n)])


def _zero_like(a, b):
    return np.zeros((a.shape[0], b.shape[1]))


# ---------------------------------------------------------------------------
# decision variables


class VarRegistry:
    """Allocates scalar decision variables behind structured matrices.

    Each entry records an index map (``-1`` marks a structural zero) so the
    solved vector can be turned back into matrices.
    """

    def __init__(self):
        self.nv = 0
        self.maps: dict[str, np.ndarray] = {}

    def _new(self, k):
        ids = np.arange(self.nv, self.nv + k)
        self.nv += k
        return ids

    def _register(self, name, idx):
        if name in self.maps:
            raise KeyError(f"variable {name!r} already registered")
        self.maps[name] = idx
        return self.affine(name)

    def affine(self, name) -> AffineMatrix:
        idx = self.maps[name]
        p, q = idx.shape
        flat = idx.ravel()
        keep = np.nonzero(flat >= 0)[0]
        coef = sp.csr_matrix((np.ones(len(keep)), (keep, flat[keep])), shape=(p * q, self.nv))
        return AffineMatrix((p, q), None, coef)

    def sym(self, name, k):
        idx = -np.ones((k, k), dtype=int)
        iu = np.triu_indices(k)
        ids = self._new(len(iu[0]))
        idx[iu] = ids
        idx[(iu[1], iu[0])] = ids
        return self._register(name, idx)

    def full(self, name, p, q):
        return self._register(name, self._new(p * q).reshape(p, q))

    def scalar(self, name):
        return self._register(name, self._new(1).reshape(1, 1))

    def pattern(self, name, idx):
        """Register a matrix whose entries point at already-allocated ids (or -1)."""
        return self._register(name, np.asarray(idx, dtype=int))

    def extract(self, y) -> dict:
        y = np.asarray(y, dtype=float)
        out = {}
        for name, idx in self.maps.items():
            M = np.zeros(idx.shape)
            mask = idx >= 0
            M[mask] = y[idx[mask]]
            out[name] = M
        return out


@dataclass
class DecisionVars:
    """Numeric values of the synthesis variables (full r x r matrices)."""

    eps: float
    Y11: np.ndarray
    Y12: np.ndarray
    Y22: np.ndarray
    R: list
    S: list
    S12: list
    Q: list | None
    P2: np.ndarray
    X: np.ndarray
    Omega1: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    Omega2: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    Omega3: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    kappa_X: float | None = None
    kappa_P: float | None = None

    MATRIX_FIELDS = ("Y11", "Y12", "Y22", "P2", "X", "Omega1", "Omega2", "Omega3")
    LIST_FIELDS = ("R", "S", "S12", "Q")

    @classmethod
    def zeros(cls, r, rho, eps=1.0, with_q=True):
        Z = lambda: np.zeros((r, r))  # noqa: E731
        return cls(eps, Z(), Z(), Z(), [Z() for _ in range(rho)], [Z() for _ in range(rho)],
                   [Z() for _ in range(rho)], [Z() for _ in range(rho)] if with_q else None, Z(), Z())

    def to_dict(self) -> dict:
        d = {"eps": float(self.eps), "kappa_X": self.kappa_X, "kappa_P": self.kappa_P}
        for f in self.MATRIX_FIELDS:
            d[f] = np.asarray(getattr(self, f)).tolist()
        for f in self.LIST_FIELDS:
            v = getattr(self, f)
            d[f] = None if v is None else [np.asarray(m).tolist() for m in v]
        return d

    @classmethod
    def from_dict(cls, d) -> "DecisionVars":
        kw = {"eps": float(d["eps"]), "kappa_X": d.get("kappa_X"), "kappa_P": d.get("kappa_P")}
        for f in cls.MATRIX_FIELDS:
            kw[f] = np.array(d[f], dtype=float).reshape(np.shape(d[f]) if np.size(d[f]) else (0, 0))
        for f in cls.LIST_FIELDS:
            v = d.get(f)
            kw[f] = None if v is None else [np.array(m, dtype=float) for m in v]
        return cls(**kw)


# ---------------------------------------------------------------------------
# block SDP container


@dataclass
class PsdBlock:
    name: str
    F0: np.ndarray
    coef: sp.csr_matrix  # (dim*dim, nv), row-major vec, already scaled
    scale: float
    strict: bool

    @property
    def dim(self) -> int:
        return self.F0.shape[0]

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.F0 + (self.coef @ y[: self.coef.shape[1]]).reshape(self.dim, self.dim)


@dataclass
class BlockSdp:
    """``F_j(y) >= margin_j * I`` for every block; minimize ``c @ y`` (feasibility if ``c`` is zero)."""

    nv: int
    blocks: list
    c: np.ndarray
    registry: VarRegistry
    delta: float = 1e-6
    meta: dict = field(default_factory=dict)

    def margin_of(self, blk: PsdBlock) -> float:
        return self.delta if blk.strict else 0.0

    @property
    def is_feasibility(self) -> bool:
        return not np.any(self.c)

    def add_block(self, name, F: AffineMatrix, strict=True, symmetrize=True):
        if F.shape[0] != F.shape[1]:
            raise DimensionMismatch(f"block {name!r} is not square: {F.shape}")
        n = F.shape[0]
        F = F.widen(self.nv)
        coef = F.coef.tocsr()
        const = F.const
        if symmetrize:
            Ft = F.T
            coef = (0.5 * (coef + Ft.coef)).tocsr()
            const = 0.5 * (const + Ft.const)
        coef.eliminate_zeros()
        big = max(np.abs(const).max(initial=0.0), np.abs(coef.data).max(initial=0.0))
        scale = 1.0 / big if big > 0 else 1.0
        self.blocks.append(PsdBlock(name, const * scale, (coef * scale).tocsr(), scale, strict))
        if self.blocks[-1].dim != n:
            raise DimensionMismatch(name)

    def widen(self, nv):
        self.nv = nv
        self.c = np.concatenate([self.c, np.zeros(nv - len(self.c))])
        for b in self.blocks:
            b.coef = _csr(b.coef, nv)

    def evaluate(self, y) -> list:
        return [b(y) for b in self.blocks]

    def to_sparse_text(self) -> str:
        """One record per line: ``block var row col value`` (1-based, upper triangle,
        var 0 is the constant term). Header lines start with ``#``."""
        out = io.StringIO()
        out.write(f"# {SPARSE_FORMAT} {SPARSE_VERSION}\n")
        out.write(f"# nvars {self.nv} nblocks {len(self.blocks)} delta {self.delta!r}\n")
        out.write("# dims " + " ".join(str(b.dim) for b in self.blocks) + "\n")
        out.write("# strict " + " ".join(str(int(b.strict)) for b in self.blocks) + "\n")
        out.write("# scale " + " ".join(repr(float(b.scale)) for b in self.blocks) + "\n")
        out.write("# names " + " ".join(b.name for b in self.blocks) + "\n")
        nz = np.nonzero(self.c)[0]
        for a in nz:
            out.write(f"0 {a + 1} 0 0 {float(self.c[a])!r}\n")
        for j, b in enumerate(self.blocks, start=1):
            n = b.dim
            iu = np.triu_indices(n)
            for r_, c_ in zip(*iu):
                v = b.F0[r_, c_]
                if v != 0.0:
                    out.write(f"{j} 0 {r_ + 1} {c_ + 1} {float(v)!r}\n")
            coo = b.coef.tocoo()
            r_, c_ = np.divmod(coo.row, n)
            keep = r_ <= c_
            order = np.lexsort((c_[keep], r_[keep], coo.col[keep]))
            for a, rr, cc, v in zip(coo.col[keep][order], r_[keep][order], c_[keep][order], coo.data[keep][order]):
                out.write(f"{j} {a + 1} {rr + 1} {cc + 1} {float(v)!r}\n")
        return out.getvalue()

    @classmethod
    def from_sparse_text(cls, text: str) -> "BlockSdp":
        header = {}
        records = []
        for line in text.splitlines():
            if line.startswith("#"):
                parts = line[1:].split()
                if parts:
                    header[parts[0]] = parts[1:]
            elif line.strip():
                records.append(line.split())
        if header.get(SPARSE_FORMAT) != [str(SPARSE_VERSION)]:
            raise ValueError("not a blocksdp-sparse v1 document")
        meta = header["nvars"]
        nv, nb, delta = int(meta[0]), int(meta[2]), float(meta[4])
        dims = [int(v) for v in header["dims"]]
        strict = [bool(int(v)) for v in header["strict"]]
        scale = [float(v) for v in header["scale"]]
        names = header["names"]
        c = np.zeros(nv)
        F0 = [np.zeros((n, n)) for n in dims]
        trip = [([], [], []) for _ in range(nb)]
        for rec in records:
            j, a, rr, cc, v = int(rec[0]), int(rec[1]), int(rec[2]), int(rec[3]), float(rec[4])
            if j == 0:
                c[a - 1] = v
                continue
            n = dims[j - 1]
            for r_, c_ in {(rr - 1, cc - 1), (cc - 1, rr - 1)}:
                if a == 0:
                    F0[j - 1][r_, c_] = v
                else:
                    trip[j - 1][0].append(r_ * n + c_)
                    trip[j - 1][1].append(a - 1)
                    trip[j - 1][2].append(v)
        blocks = []
        for j in range(nb):
            n = dims[j]
            rows, cols, vals = trip[j]
            coef = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, nv))
            blocks.append(PsdBlock(names[j], F0[j], coef, scale[j], strict[j]))
        return cls(nv, blocks, c, VarRegistry(), delta)


# ---------------------------------------------------------------------------
# dense (numeric) route


def _psi_blocks(sys: ErrorSystem, v: DecisionVars):
    """Numeric Psi_1, Psi_2 and the Theta row block (z-rows only)."""
    p = sys.problem
    L = sys.layout
    r = sys.r
    n3 = sys.classes[3]
    psi1 = np.zeros((r, r))
    psi2 = np.zeros((r, r))
    vs = sum(p.m_dims[i] for i in n3)
    sg = sum(p.n_dims[i] for i in n3)
    theta = np.zeros((r, 2 * vs + sg))
    o1 = o2 = 0
    for i in n3:
        n_i, m_i = p.n_dims[i], p.m_dims[i]
        mu, ell = p.costs[i].mu, p.costs[i].ell
        xs, ls = L.x_slice(i), L.l_slice(i)
        P2i = v.P2[L.z_slice(i), L.z_slice(i)]
        w11 = P2i[0, 0]
        W12 = P2i[:n_i, n_i:]
        psi1[xs, xs] = -2.0 * mu * w11 * np.eye(n_i)
        psi1[ls, ls] = v.Omega1[o1:o1 + m_i, o1:o1 + m_i]
        psi2[xs, xs] = v.Omega2[o2:o2 + n_i, o2:o2 + n_i]
        psi2[ls, ls] = v.Omega3[o1:o1 + m_i, o1:o1 + m_i]
        theta[xs, o1:o1 + m_i] = ell * W12
        theta[xs, vs + o2:vs + o2 + n_i] = v.eps * ell * w11 * np.eye(n_i)
        theta[xs, vs + sg + o1:vs + sg + o1 + m_i] = v.eps * ell * W12
        o1 += m_i
        o2 += n_i
    return psi1, psi2, theta


def phi_matrix(sys: ErrorSystem, v: DecisionVars, A_mat, psi1=None, psi2=None) -> np.ndarray:
    """Dense Phi with a given system matrix in place of A(x_hat)."""
    r, rho, eps = sys.r, sys.rho, v.eps
    P2, X = v.P2, v.X
    Z = np.zeros((r, r))
    hs = [e.h for e in sys.edges]
    ds = [e.d for e in sys.edges]
    Qs = v.Q if v.Q is not None else [Z] * rho
    sumSQR = sum((v.S[k] + Qs[k] - v.R[k] for k in range(rho)), Z)
    PA = P2.T @ A_mat
    p22 = v.Y12 + v.Y12.T + PA + PA.T + X + X.T + sumSQR
    p23 = v.Y11 - P2.T + eps * A_mat.T @ P2 + eps * X.T
    p33 = -eps * (P2 + P2.T) + sum((hs[k] ** 2 * v.R[k] for k in range(rho)), Z)
    if psi1 is not None:
        p22 = p22 + psi1
    if psi2 is not None:
        p33 = p33 + psi2
    n = (3 + 2 * rho) * r
    Phi = np.zeros((n, n))

    def put(bi, bj, M):
        Phi[bi * r:(bi + 1) * r, bj * r:(bj + 1) * r] = M
        if bi != bj:
            Phi[bj * r:(bj + 1) * r, bi * r:(bi + 1) * r] = M.T

    put(0, 0, -2 * v.Y22)
    put(0, 1, -v.Y12.T + v.Y22 - X.T)
    put(0, 2, v.Y12.T - eps * X.T)
    put(1, 1, p22)
    put(1, 2, p23)
    put(2, 2, p33)
    for k, e in enumerate(sys.edges):
        hk, tk = 3 + k, 3 + rho + k
        put(1, hk, v.S12[k])
        put(1, tk, v.R[k] - v.S12[k] + P2.T @ e.T)
        put(2, tk, eps * P2.T @ e.T)
        put(hk, hk, -v.S[k] - v.R[k])
        put(hk, tk, v.R[k] - v.S12[k].T)
        put(tk, tk, -2 * v.R[k] + v.S12[k] + v.S12[k].T - (1 - ds[k]) * Qs[k])
    return Phi


def evaluate_phi_at(sys: ErrorSystem, v: DecisionVars, x_hat) -> np.ndarray:
    """Phi(x_hat) using the true Hessians of the costs."""
    return phi_matrix(sys, v, sys.a_of(np.asarray(x_hat, dtype=float)))


def xi_matrix(sys: ErrorSystem, v: DecisionVars, A_tilde) -> np.ndarray:
    """Dense vertex matrix (must be negative definite)."""
    psi1, psi2, theta = _psi_blocks(sys, v)
    Phi = phi_matrix(sys, v, A_tilde, psi1, psi2)
    if theta.shape[1] == 0:
        return Phi
    r = sys.r
    Th = np.zeros((Phi.shape[0], theta.shape[1]))
    Th[r:2 * r] = theta
    Om = _omega_diag(v)
    return np.block([[Phi, Th], [Th.T, -Om]])


def _omega_diag(v: DecisionVars):
    blocks = [v.Omega1, v.Omega2, v.Omega3]
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    o = 0
    for b in blocks:
        k = b.shape[0]
        out[o:o + k, o:o + k] = b
        o += k
    return out


def jensen_blocks(v: DecisionVars):
    """Dense ``[R S12; * R]`` and ``[Y11 Y12; * Y22]``."""
    rho = len(v.R)
    r = v.Y11.shape[0]
    Rb = np.zeros((rho * r, rho * r))
    Sb = np.zeros((rho * r, rho * r))
    for k in range(rho):
        Rb[k * r:(k + 1) * r, k * r:(k + 1) * r] = v.R[k]
        Sb[k * r:(k + 1) * r, k * r:(k + 1) * r] = v.S12[k]
    return np.block([[Rb, Sb], [Sb.T, Rb]]), np.block([[v.Y11, v.Y12], [v.Y12.T, v.Y22]])


# ---------------------------------------------------------------------------
# affine (solver) route


@dataclass
class SynthesisVars:
    """Affine handles of the structured decision variables."""

    Y11: AffineMatrix
    Y12: AffineMatrix
    Y22: AffineMatrix
    R: list
    S: list
    S12: list
    Q: list | None
    P2: AffineMatrix
    X: AffineMatrix
    Omega: list  # [Omega1, Omega2, Omega3] or []


def _block_pattern(reg: VarRegistry, sizes, structured=None):
    """Index map of a block-diagonal matrix with free blocks; ``structured[i]`` gives
    ``n_i`` for blocks of the form ``[w I, W12; W21, W22]``."""
    structured = structured or {}
    r = sum(sizes)
    idx = -np.ones((r, r), dtype=int)
    o = 0
    for i, k in enumerate(sizes):
        if i in structured:
            n_i = structured[i]
            ids = reg._new(k * k - n_i * n_i + 1).tolist()
            w = ids.pop(0)
            for a in range(k):
                for b in range(k):
                    if a < n_i and b < n_i:
                        idx[o + a, o + b] = w if a == b else -1
                    else:
                        idx[o + a, o + b] = ids.pop(0)
        else:
            idx[o:o + k, o:o + k] = reg._new(k * k).reshape(k, k)
        o += k
    return idx


def _sym_blockdiag_pattern(reg: VarRegistry, sizes):
    n = sum(sizes)
    idx = -np.ones((n, n), dtype=int)
    o = 0
    for k in sizes:
        iu = np.triu_indices(k)
        ids = reg._new(len(iu[0]))
        sub = -np.ones((k, k), dtype=int)
        sub[iu] = ids
        sub[(iu[1], iu[0])] = ids
        idx[o:o + k, o:o + k] = sub
        o += k
    return idx


def assemble_vertex_program(sys: ErrorSystem, h=None, d=None, eps=1.0, tie=False, delta=1e-6,
                        vertex_cap=None) -> BlockSdp:
    """Vertex LMIs, Jensen/ordering blocks and positivity blocks as a BlockSdp.

    ``h``/``d`` override the per-edge bounds stored on ``sys`` (scalars broadcast).
    ``tie`` shares R, Q, S, S12 across edges.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if h is not None or d is not None:
        sys = sys.with_delays(
            [e.h for e in sys.edges] if h is None else h,
            [e.d for e in sys.edges] if d is None else d,
        )
    for e in sys.edges:
        if e.h < 0 or not 0 <= e.d <= 1:
            raise ValueError(f"invalid delay bounds on edge {e.k}: h={e.h}, d={e.d}")
    cap = sys.vertex_cap if vertex_cap is None else vertex_cap
    nvert = sys.vertex_count()
    if nvert > cap:
        raise VertexExplosion(f"{nvert} vertices exceed the cap of {cap}")
    p = sys.problem
    L = sys.layout
    r, rho = sys.r, sys.rho
    reg = VarRegistry()
    Y11 = reg.sym("Y11", r)
    Y12 = reg.full("Y12", r, r)
    Y22 = reg.sym("Y22", r)
    R, S, S12, Q = [], [], [], []
    for k, e in enumerate(sys.edges):
        if tie and k > 0:
            R.append(R[0])
            S.append(S[0])
            S12.append(S12[0])
        else:
            R.append(reg.sym(f"R{k + 1}", r))
            S.append(reg.sym(f"S{k + 1}", r))
            S12.append(reg.full(f"S12_{k + 1}", r, r))
        # fast-varying channels (d = 1) carry no Q at all
        if e.d >= 1.0:
            Q.append(None)
        elif tie:
            Q.append(reg.affine("Q1") if "Q1" in reg.maps else reg.sym("Q1", r))
        else:
            Q.append(reg.sym(f"Q{k + 1}", r))
    if all(q is None for q in Q):
        Q = None
    n3 = list(sys.classes[3])
    structured = {i: p.n_dims[i] for i in n3}
    P2 = reg.pattern("P2", _block_pattern(reg, L.r_dims, structured))
    X = reg.pattern("X", _block_pattern(reg, L.r_dims))
    Omega = []
    if n3:
        Omega = [reg.pattern("Omega1", _sym_blockdiag_pattern(reg, [p.m_dims[i] for i in n3])) if any(p.m_dims[i] for i in n3) else None,
                 reg.pattern("Omega2", _sym_blockdiag_pattern(reg, [p.n_dims[i] for i in n3])),
                 reg.pattern("Omega3", _sym_blockdiag_pattern(reg, [p.m_dims[i] for i in n3])) if any(p.m_dims[i] for i in n3) else None]
    nv = reg.nv
    V = SynthesisVars(Y11, Y12, Y22, R, S, S12, Q, P2, X, Omega)
    widen = lambda M: M.widen(nv)  # noqa: E731
    Y11, Y12, Y22, P2, X = map(widen, (Y11, Y12, Y22, P2, X))
    R = [widen(m) for m in R]
    S = [widen(m) for m in S]
    S12 = [widen(m) for m in S12]
    Qw = [None if m is None else widen(m) for m in Q] if Q is not None else None

    sdp = BlockSdp(nv, [], np.zeros(nv), reg, delta,
                   meta={"eps": float(eps), "h": [e.h for e in sys.edges], "d": [e.d for e in sys.edges],
                         "tie": bool(tie), "rho": rho, "r": r, "vertices": nvert})
    sdp.vars = V  # type: ignore[attr-defined]

    zero = AffineMatrix.zeros(r, r, nv)
    sumSQR = zero
    for k in range(rho):
        sumSQR = sumSQR + S[k] - R[k]
        if Qw is not None and Qw[k] is not None:
            sumSQR = sumSQR + Qw[k]
    psi1, psi2, theta = _psi_affine(sys, P2, Omega, eps, nv)
    XT = X.T
    P2T = P2.T
    base22 = Y12 + Y12.T + X + XT + sumSQR + psi1
    base23 = Y11 - P2T + eps * XT
    p33 = -eps * (P2 + P2T) + psi2
    for k, e in enumerate(sys.edges):
        p33 = p33 + (e.h ** 2) * R[k]
    p11 = -2.0 * Y22
    p12 = -Y12.T + Y22 - XT
    p13 = Y12.T - eps * XT
    cross = []
    for k, e in enumerate(sys.edges):
        PT = P2T.rmul(e.T)
        q55 = -2.0 * R[k] + S12[k] + S12[k].T
        if Qw is not None and Qw[k] is not None:
            q55 = q55 - (1.0 - e.d) * Qw[k]
        cross.append(dict(p24=S12[k], p25=R[k] - S12[k] + PT, p35=eps * PT, p44=-S[k] - R[k],
                          p45=R[k] - S12[k].T, p55=q55))
    nb = 3 + 2 * rho
    n_theta = theta.shape[1] if theta is not None else 0
    for jtag, At in sys.vertices():
        PA = P2T.rmul(At)
        upper = [[None] * (nb + (1 if n_theta else 0)) for _ in range(nb + (1 if n_theta else 0))]
        upper[0][0], upper[0][1], upper[0][2] = p11, p12, p13
        upper[1][1] = base22 + PA + PA.T
        upper[1][2] = base23 + eps * PA.T
        upper[2][2] = p33
        for k in range(rho):
            hk, tk = 3 + k, 3 + rho + k
            c = cross[k]
            upper[1][hk] = c["p24"]
            upper[1][tk] = c["p25"]
            upper[2][tk] = c["p35"]
            upper[hk][hk] = c["p44"]
            upper[hk][tk] = c["p45"]
            upper[tk][tk] = c["p55"]
        if n_theta:
            upper[1][nb] = theta
            upper[nb][nb] = -_omega_affine(Omega, nv)
        # fill explicit zeros so every block row/column has a known size
        sizes = [r] * nb + ([n_theta] if n_theta else [])
        for a in range(len(sizes)):
            for b in range(a, len(sizes)):
                if upper[a][b] is None:
                    upper[a][b] = np.zeros((sizes[a], sizes[b]))
        Xi = sym_bmat(upper)
        tag = "-".join(str(t + 1) for t in jtag) or "0"
        sdp.add_block(f"vertex[{tag}]", -Xi, strict=True)
    # ordering / Jensen constraints
    nk = 1 if tie else rho
    for k in range(nk):
        sdp.add_block(f"jensen_R_S12[{k + 1}]", sym_bmat([[R[k], S12[k]], [None, R[k]]]), strict=False)
        sdp.add_block(f"R[{k + 1}]", R[k], strict=True)
        sdp.add_block(f"S[{k + 1}]", S[k], strict=True)
    if Qw is not None:
        for k in ([next(i for i, q in enumerate(Qw) if q is not None)] if tie else range(rho)):
            if Qw[k] is not None:
                sdp.add_block(f"Q[{k + 1}]", Qw[k], strict=True)
    sdp.add_block("Y", sym_bmat([[Y11, Y12], [None, Y22]]), strict=True)
    for i in range(p.N):
        s = L.z_slice(i)
        sel = np.eye(r)[s]
        Pi = P2.lmul(sel).rmul(sel.T)
        sdp.add_block(f"P2_sym[{i + 1}]", Pi + Pi.T, strict=True)
    for name, Om in zip(("Omega1", "Omega2", "Omega3"), Omega):
        if Om is not None:
            sdp.add_block(name, Om.widen(nv), strict=True)
    return sdp


def _psi_affine(sys: ErrorSystem, P2: AffineMatrix, Omega, eps, nv):
    r = sys.r
    zero = AffineMatrix.zeros(r, r, nv)
    n3 = sys.classes[3]
    if not n3:
        return zero, zero, None
    p = sys.problem
    L = sys.layout
    Om1, Om2, Om3 = Omega
    psi1 = zero
    psi2 = zero
    vs = sum(p.m_dims[i] for i in n3)
    sg = sum(p.n_dims[i] for i in n3)
    Er = np.eye(r)
    cols = []
    o1 = o2 = 0
    th_vs1 = AffineMatrix.zeros(r, vs, nv)
    th_sg = AffineMatrix.zeros(r, sg, nv)
    th_vs2 = AffineMatrix.zeros(r, vs, nv)
    for i in n3:
        n_i, m_i = p.n_dims[i], p.m_dims[i]
        mu, ell = p.costs[i].mu, p.costs[i].ell
        Sx = Er[L.x_slice(i)]  # n_i x r selector
        Sl = Er[L.l_slice(i)]
        w11 = P2.lmul(Sx[:1]).rmul(Sx[:1].T)  # 1x1
        # -2 mu w11 I on the x block
        psi1 = psi1 + (-2.0 * mu) * _scalar_times(w11, Sx.T @ Sx, nv)
        E2 = np.eye(sg)[o2:o2 + n_i]
        psi2 = psi2 + Om2.widen(nv).lmul(Sx.T @ E2).rmul(E2.T @ Sx)
        th_sg = th_sg + (eps * ell) * _scalar_times(w11, Sx.T @ E2, nv)
        if m_i:
            E1 = np.eye(vs)[o1:o1 + m_i]
            psi1 = psi1 + Om1.widen(nv).lmul(Sl.T @ E1).rmul(E1.T @ Sl)
            psi2 = psi2 + Om3.widen(nv).lmul(Sl.T @ E1).rmul(E1.T @ Sl)
            W12 = P2.lmul(Sx).rmul(Sl.T)  # n_i x m_i
            th_vs1 = th_vs1 + ell * W12.lmul(Sx.T).rmul(E1)
            th_vs2 = th_vs2 + (eps * ell) * W12.lmul(Sx.T).rmul(E1)
        o1 += m_i
        o2 += n_i
    del cols
    theta = bmat([[th_vs1, th_sg, th_vs2]]) if vs else th_sg
    return psi1, psi2, theta


def _scalar_times(s: AffineMatrix, M, nv):
    """Affine scalar ``s`` (1x1) times constant matrix ``M``."""
    M = np.asarray(M, dtype=float)
    s = s.widen(nv)
    v = M.ravel()
    coef = sp.csr_matrix(v[:, None]) @ s.coef
    return AffineMatrix(M.shape, s.const[0, 0] * M, coef)


def _omega_affine(Omega, nv):
    present = [O.widen(nv) for O in Omega if O is not None]
    return blkdiag(present)


def add_gain_size_blocks(base: BlockSdp, a1=1.0, a2=1.0) -> BlockSdp:
    """Adds kappa_X, kappa_P, the two gain-size Schur blocks and the objective."""
    import copy

    if a1 < 0 or a2 < 0 or a1 + a2 == 0:
        raise ValueError("alpha weights must be nonnegative and not both zero")
    reg = copy.deepcopy(base.registry)
    kX = reg.scalar("kappa_X")
    kP = reg.scalar("kappa_P")
    nv = reg.nv
    sdp = BlockSdp(base.nv, [copy.copy(b) for b in base.blocks], base.c.copy(), reg, base.delta, dict(base.meta))
    sdp.widen(nv)
    r = base.meta["r"]
    P2 = reg.affine("P2").widen(nv)
    X = reg.affine("X").widen(nv)
    I = np.eye(r)
    kPI = _scalar_times(kP, I, nv)
    kXI = _scalar_times(kX, I, nv)
    sdp.add_block("gain_P", sym_bmat([[0.5 * (P2 + P2.T), I], [None, kPI]]), strict=True)
    sdp.add_block("gain_X", sym_bmat([[kXI, -X.T], [None, I]]), strict=True)
    c = np.zeros(nv)
    c[reg.maps["kappa_X"][0, 0]] = a1
    c[reg.maps["kappa_P"][0, 0]] = a2
    sdp.c = c
    sdp.meta.update({"alpha": [float(a1), float(a2)]})
    if hasattr(base, "vars"):
        sdp.vars = base.vars  # type: ignore[attr-defined]
    return sdp


def decision_vars_from(sdp: BlockSdp, y) -> DecisionVars:
    """Structured numeric matrices from a solved vector."""
    m = sdp.registry.extract(y)
    rho, tie = sdp.meta["rho"], sdp.meta["tie"]
    pick = lambda stem, k: m[f"{stem}{1 if tie else k + 1}"]  # noqa: E731
    R = [pick("R", k) for k in range(rho)]
    S = [pick("S", k) for k in range(rho)]
    S12 = [pick("S12_", k) for k in range(rho)]
    r = sdp.meta["r"]
    qs = [m.get(f"Q{1 if tie else k + 1}") if d_k < 1.0 else None for k, d_k in enumerate(sdp.meta["d"])]
    Q = None if all(q is None for q in qs) else [np.zeros((r, r)) if q is None else q for q in qs]
    empty = np.zeros((0, 0))
    return DecisionVars(
        eps=sdp.meta["eps"], Y11=m["Y11"], Y12=m["Y12"], Y22=m["Y22"], R=R, S=S, S12=S12, Q=Q,
        P2=m["P2"], X=m["X"], Omega1=m.get("Omega1", empty), Omega2=m.get("Omega2", empty),
        Omega3=m.get("Omega3", empty),
        kappa_X=float(m["kappa_X"][0, 0]) if "kappa_X" in m else None,
        kappa_P=float(m["kappa_P"][0, 0]) if "kappa_P" in m else None,
    )


# operation names used by the published interface
assemble_corollary1 = assemble_vertex_program
assemble_remark2 = add_gain_size_blocks
