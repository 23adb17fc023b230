"""Dense primal-dual interior-point solver for block SDPs.

Problem form (``BlockSdp``)::

    minimize  c @ y   s.t.  F_j(y) = F0_j + sum_a y_a F_ja  >=  margin_j * I

Feasibility programs (``c == 0``) are solved as the slack maximization
``max t  s.t.  F_j(y) >= t I,  |y_a| <= var_bound`` and reported Feasible iff
``t* >= delta``. The box fixes the scale of homogeneous programs.

The method is an infeasible-start path-following scheme with Nesterov-Todd
scaling and Mehrotra predictor-corrector steps. The Schur complement is
assembled block by block from the sparse coefficient entries.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from numba import njit

from .lmi import BlockSdp

OPTIMAL, FEASIBLE, INFEASIBLE, MAXITER, NUMERICAL = "Optimal", "Feasible", "Infeasible", "MaxIter", "NumericalFailure"
STATUSES = (OPTIMAL, FEASIBLE, INFEASIBLE, MAXITER, NUMERICAL)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class SolverOptions:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-9
    slack_tol: float = 1e-9
    max_iter: int = 200
    step: float = 0.98
    var_bound: float = 1.0
    check_tol: float = 1e-8
    accept_gap: float = 1e-5  # stalled objective solves are accepted below this relative gap
    stop_when_decided: bool = False
    verbose: bool = False

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SdpSolution:
    y: np.ndarray
    objective: float
    status: str
    margins: list
    iterations: int
    wall_time: float
    slack: float | None = None
    infeasibility_bound: float | None = None
    names: list = field(default_factory=list)
    rel_gap: float | None = None

    @property
    def min_margin(self) -> float:
        return float(min(self.margins)) if self.margins else np.inf

    def to_dict(self, timing=True) -> dict:
        d = {
            "status": self.status,
            "objective": float(self.objective),
            "slack": None if self.slack is None else float(self.slack),
            "infeasibility_bound": None if self.infeasibility_bound is None else float(self.infeasibility_bound),
            "iterations": int(self.iterations),
            "margins": [float(m) for m in self.margins],
            "blocks": list(self.names),
            "y": [float(v) for v in self.y],
            "rel_gap": None if self.rel_gap is None else float(self.rel_gap),
        }
        if timing:
            d["wall_time"] = float(self.wall_time)
        return d

    def to_json(self, timing=True) -> str:
        return json.dumps(self.to_dict(timing), indent=1)

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["y"], dtype=float), d["objective"], d["status"], list(d["margins"]),
                   d["iterations"], d.get("wall_time", 0.0), d.get("slack"), d.get("infeasibility_bound"),
                   list(d.get("blocks", [])), d.get("rel_gap"))


def check_certificate(sdp: BlockSdp, y) -> list:
    """Smallest eigenvalue of every (scaled) block at ``y``, recomputed densely."""
    y = np.asarray(y, dtype=float)
    if len(y) != sdp.nv:
        raise ValueError(f"y has {len(y)} entries, the program has {sdp.nv} variables")
    out = []
    for b in sdp.blocks:
        F = b(y)
        F = 0.5 * (F + F.T)
        out.append(float(np.linalg.eigvalsh(F)[0]))
    return out


# ---------------------------------------------------------------------------
# internal data


class _Block:
    """Coefficient layout of one PSD block for fast Schur assembly."""

    def __init__(self, F0, coef: sp.csr_matrix):
        self.n = n = F0.shape[0]
        self.F0 = F0
        csc = coef.tocsc()
        csc.eliminate_zeros()
        counts = np.diff(csc.indptr)
        self.vars = np.nonzero(counts)[0]
        self.C = csc[:, self.vars].tocsr()  # n^2 x k
        self.CT = self.C.T.tocsr()
        sub = csc[:, self.vars]
        # per-variable upper-triangle entries (diagonal halved) for the kernel
        rows, cols = sub.indices, np.repeat(np.arange(sub.shape[1]), np.diff(sub.indptr))
        p_, q_ = np.divmod(rows, n)
        up = p_ <= q_
        self.ent_ptr = np.concatenate([[0], np.cumsum(np.bincount(cols[up], minlength=sub.shape[1]))]).astype(np.int64)
        self.ent_p = p_[up].astype(np.int64)
        self.ent_q = q_[up].astype(np.int64)
        self.ent_v = np.where(p_[up] == q_[up], 0.5, 1.0) * sub.data[up]

    def apply(self, y_local):
        return self.F0 + (self.C @ y_local).reshape(self.n, self.n)

    def adjoint(self, M):
        return self.CT @ M.ravel()

    def schur(self, Winv):
        """``H[a, b] = tr(F_a Winv F_b Winv)`` for the block's variables."""
        H = np.zeros((len(self.vars), len(self.vars)))
        _schur_kernel(np.ascontiguousarray(Winv), self.ent_ptr, self.ent_p, self.ent_q, self.ent_v, H)
        return H


@njit(cache=True, fastmath=True)
def _schur_kernel(W, ent_ptr, ent_p, ent_q, ent_v, H):
    # F_a = sum_e v_e (E_pq + E_qp) over upper entries e of variable a (diagonal
    # values halved). Then W F_a W = X_a + X_a' with X_a = sum_e v_e W[:, p] W[q, :]
    # and tr(F_a W F_b W) = 2 sum_{f in b} v_f (X_a[p_f, q_f] + X_a[q_f, p_f]).
    n = W.shape[0]
    k = len(ent_ptr) - 1
    X = np.empty((n, n))
    for a in range(k):
        X[:, :] = 0.0
        for e in range(ent_ptr[a], ent_ptr[a + 1]):
            v = ent_v[e]
            wq = W[ent_q[e]]
            p = ent_p[e]
            for i in range(n):
                wi = v * W[i, p]
                Xi = X[i]
                for j in range(n):
                    Xi[j] += wi * wq[j]
        for b in range(a, k):
            acc = 0.0
            for f in range(ent_ptr[b], ent_ptr[b + 1]):
                acc += ent_v[f] * (X[ent_p[f], ent_q[f]] + X[ent_q[f], ent_p[f]])
            H[a, b] = 2.0 * acc
            H[b, a] = 2.0 * acc


def _lmin(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def _max_step(L, D):
    """Largest alpha with ``L L' + alpha D >= 0`` (inf if unbounded)."""
    Li = la.solve_triangular(L, D, lower=True)
    Li = la.solve_triangular(L, Li.T, lower=True)
    lam = np.linalg.eigvalsh(0.5 * (Li + Li.T))[0]
    return np.inf if lam >= 0 else -1.0 / lam


def _factor(H):
    """Cholesky of the Schur matrix, with a growing diagonal shift if needed."""
    dmax = max(np.abs(np.diag(H)).max(), 1e-300)
    shift = 0.0
    for _ in range(12):
        try:
            Hs = H if shift == 0 else H + shift * np.eye(len(H))
            cf = la.cho_factor(Hs, lower=True, check_finite=False)
            if np.all(np.isfinite(np.diag(cf[0]))):
                return cf
        except la.LinAlgError:
            pass
        shift = dmax * 1e-14 if shift == 0 else shift * 100
    return None


def _chol(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


# ---------------------------------------------------------------------------
# solver


def solve(sdp: BlockSdp, opts: SolverOptions | None = None) -> SdpSolution:
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    feas = sdp.is_feasibility
    nv = sdp.nv
    nvar = nv + 1 if feas else nv
    blocks = []
    for b in sdp.blocks:
        coef = b.coef
        F0 = b.F0.copy()
        if feas:
            eye = sp.csr_matrix((-np.ones(b.dim), (np.arange(b.dim) * (b.dim + 1), np.zeros(b.dim, int))),
                                shape=(b.dim * b.dim, 1))
            coef = sp.hstack([coef, eye], format="csr")
        else:
            F0 = F0 - sdp.margin_of(b) * np.eye(b.dim)
        blocks.append(_Block(F0, coef))
    c = np.zeros(nvar)
    if feas:
        c[nv] = -1.0
    else:
        c[:] = sdp.c
    # linear part: h + G y >= 0 (box on the original variables in feasibility mode)
    if feas:
        rows = np.arange(2 * nv)
        G = sp.csr_matrix((np.concatenate([-np.ones(nv), np.ones(nv)]),
                           (rows, np.concatenate([np.arange(nv), np.arange(nv)]))), shape=(2 * nv, nvar))
        h = np.full(2 * nv, opts.var_bound)
    else:
        G = sp.csr_matrix((0, nvar))
        h = np.zeros(0)
    GT = G.T.tocsr()
    n_lp = len(h)
    n_sd = sum(b.n for b in blocks)
    nu = n_sd + n_lp

    # starting point
    y = np.zeros(nvar)
    if feas:
        t0 = min(_lmin(b.F0) for b in blocks) - 1.0
        y[nv] = t0
        S = [b.apply(y[b.vars]) for b in blocks]
        s = h + G @ y
    else:
        S = [np.eye(b.n) for b in blocks]
        s = np.ones(n_lp)
    Z = [np.eye(b.n) for b in blocks]
    z = np.ones(n_lp)

    status = MAXITER
    it = 0
    best_bound = None
    prev_pobj = np.inf
    normF0 = 1.0 + max((np.abs(b.F0).max() for b in blocks), default=0.0)
    normc = 1.0 + np.abs(c).max(initial=0.0)
    best = None  # (relgap, y) of the best primal-feasible iterate, objective mode
    stall = 0

    def residuals(y, S, s, Z, z):
        rp = [b.apply(y[b.vars]) - Sj for b, Sj in zip(blocks, S)]
        rpl = h + G @ y - s
        rd = c.copy()
        for b, Zj in zip(blocks, Z):
            rd[b.vars] -= b.adjoint(Zj)
        if n_lp:
            rd -= GT @ z
        return rp, rpl, rd

    for it in range(1, opts.max_iter + 1):
        rp, rpl, rd = residuals(y, S, s, Z, z)
        gap = sum(float(np.vdot(Sj, Zj)) for Sj, Zj in zip(S, Z)) + float(s @ z)
        mu = gap / nu
        pobj = float(c @ y)
        dobj = -sum(float(np.vdot(b.F0, Zj)) for b, Zj in zip(blocks, Z)) - float(h @ z)
        pinf = max((np.abs(r).max() for r in rp), default=0.0)
        if n_lp:
            pinf = max(pinf, np.abs(rpl).max())
        pinf /= normF0
        dinf = np.abs(rd).max(initial=0.0) / normc
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        if opts.verbose:
            print(f"{it:3d} p={pobj:+.6e} d={dobj:+.6e} gap={relgap:.1e} pinf={pinf:.1e} dinf={dinf:.1e} mu={mu:.1e}")
        if feas and opts.stop_when_decided:
            # margins of F(y) itself, without the slack column
            marg = [_lmin(b.apply(np.where(b.vars == nv, 0.0, y[b.vars]))) for b in blocks]
            if min(marg) >= sdp.delta:
                status = FEASIBLE
                break
            bound = _infeasibility_bound(blocks, Z, nv, opts.var_bound)
            if bound is not None:
                best_bound = bound if best_bound is None else min(best_bound, bound)
                if bound < sdp.delta:
                    status = INFEASIBLE
                    break
        if relgap < opts.gap_tol and pinf < opts.feas_tol and dinf < opts.feas_tol:
            status = OPTIMAL
            break
        if feas and it > 5 and abs(pobj - prev_pobj) < opts.slack_tol and relgap < 1e-6 and pinf < 1e-7:
            status = OPTIMAL
            break
        prev_pobj = pobj
        if not feas and pinf < opts.feas_tol:
            if best is None or relgap < 0.5 * best[0]:
                best, stall = (relgap, y.copy()), 0
            else:
                stall += 1
                if relgap < best[0]:
                    best = (relgap, y.copy())
            if stall >= 5 and best[0] < opts.accept_gap and dinf < 1e-6:
                break
            if stall >= 12:
                break
        if not feas and _dual_diverging(dobj, pinf, y):
            status = INFEASIBLE
            break

        # scaling
        scl = []
        for Sj, Zj in zip(S, Z):
            Ls = _chol(Sj)
            Lz = _chol(Zj)
            if Ls is None or Lz is None:
                status = NUMERICAL
                break
            U, lam, Vt = la.svd(Lz.T @ Ls)
            Rm = Ls @ Vt.T / np.sqrt(lam)[None, :]
            Rinv = la.solve_triangular(Ls, np.eye(len(lam)), lower=True)
            Rinv = (np.sqrt(lam)[:, None] * Vt) @ Rinv  # R^{-1} = Lambda^{1/2} V' Ls^{-1}
            Winv = Rinv.T @ Rinv
            scl.append((Rm, Rinv, lam, Winv, Ls, Lz))
        if status == NUMERICAL:
            break
        H = np.zeros((nvar, nvar))
        for b, (_, _, _, Winv, _, _) in zip(blocks, scl):
            if len(b.vars) == nvar:
                H += b.schur(Winv)
            else:
                H[np.ix_(b.vars, b.vars)] += b.schur(Winv)
        D = z / s if n_lp else np.zeros(0)
        if n_lp:
            GDG = (GT @ sp.diags(D) @ G).tocoo()
            np.add.at(H, (GDG.row, GDG.col), GDG.data)
        cf = _factor(H)
        if cf is None:
            status = NUMERICAL
            break

        def direction(sigma, corr):
            rhs = -rd.copy()
            Rz_all = []
            for b, (Rm, Rinv, lam, Winv, _, _), rpj, cj in zip(blocks, scl, rp, corr[0]):
                n = b.n
                Umat = -cj if cj is not None else np.zeros((n, n))
                Umat = Umat + np.diag(2 * sigma * mu - 2 * lam ** 2)
                Umat = Umat / (lam[:, None] + lam[None, :])
                Rz = Rinv.T @ Umat @ Rinv
                Rz_all.append(Rz)
                rhs[b.vars] += b.adjoint(Rz - Winv @ rpj @ Winv)
            if n_lp:
                cl = corr[1] if corr[1] is not None else 0.0
                rzl = (sigma * mu - s * z - cl) / s
                rhs += GT @ (rzl - D * rpl)
            dy = la.cho_solve(cf, rhs, check_finite=False)
            dS, dZ = [], []
            for b, (Rm, Rinv, lam, Winv, _, _), rpj, Rz in zip(blocks, scl, rp, Rz_all):
                dSj = rpj + (b.C @ dy[b.vars]).reshape(b.n, b.n)
                dSj = 0.5 * (dSj + dSj.T)
                dZj = Rz - Winv @ dSj @ Winv
                dZ.append(0.5 * (dZj + dZj.T))
                dS.append(dSj)
            if n_lp:
                ds = rpl + G @ dy
                dz = rzl - D * ds
            else:
                ds = dz = np.zeros(0)
            return dy, dS, dZ, ds, dz

        def steps(dS, dZ, ds, dz):
            ap = ad = np.inf
            for (_, _, _, _, Ls, Lz), dSj, dZj in zip(scl, dS, dZ):
                ap = min(ap, _max_step(Ls, dSj))
                ad = min(ad, _max_step(Lz, dZj))
            if n_lp:
                neg = ds < 0
                if neg.any():
                    ap = min(ap, np.min(-s[neg] / ds[neg]))
                neg = dz < 0
                if neg.any():
                    ad = min(ad, np.min(-z[neg] / dz[neg]))
            return min(1.0, ap), min(1.0, ad)

        # predictor
        none_corr = ([None] * len(blocks), None)
        dy, dS, dZ, ds, dz = direction(0.0, none_corr)
        ap, ad = steps(dS, dZ, ds, dz)
        gap_aff = sum(float(np.vdot(Sj + ap * dSj, Zj + ad * dZj)) for Sj, dSj, Zj, dZj in zip(S, dS, Z, dZ))
        if n_lp:
            gap_aff += float((s + ap * ds) @ (z + ad * dz))
        sigma = min(1.0, max(0.0, gap_aff / gap)) ** 3
        corr_sd = []
        for (Rm, Rinv, lam, Winv, _, _), dSj, dZj in zip(scl, dS, dZ):
            dSt = Rinv @ dSj @ Rinv.T
            dZt = Rm.T @ dZj @ Rm
            corr_sd.append(dSt @ dZt + dZt @ dSt)
        corr_lp = ds * dz if n_lp else None
        dy, dS, dZ, ds, dz = direction(sigma, (corr_sd, corr_lp))
        ap, ad = steps(dS, dZ, ds, dz)
        ap, ad = min(1.0, opts.step * ap), min(1.0, opts.step * ad)
        y = y + ap * dy
        S = [Sj + ap * dSj for Sj, dSj in zip(S, dS)]
        Z = [Zj + ad * dZj for Zj, dZj in zip(Z, dZ)]
        if n_lp:
            s = s + ap * ds
            z = z + ad * dz
        if not np.all(np.isfinite(y)):
            status = NUMERICAL
            break
    else:
        status = MAXITER

    rel_gap = None
    if not feas and status in (NUMERICAL, MAXITER) and best is not None:
        # a stalled run still carries a primal-feasible point; the caller decides
        y, rel_gap = best[1], best[0]
        if rel_gap < opts.accept_gap:
            status = OPTIMAL
    elif not feas and status == OPTIMAL:
        rel_gap = relgap
    y_out = y[:nv].copy()
    margins = check_certificate(sdp, y_out)
    slack = float(y[nv]) if feas else None
    if feas:
        t_check = min(margins) if margins else np.inf
        if status in (OPTIMAL, FEASIBLE, MAXITER):
            if t_check >= sdp.delta:
                status = FEASIBLE
            elif status in (OPTIMAL, FEASIBLE):
                status = INFEASIBLE
        if status == INFEASIBLE and best_bound is None:
            best_bound = _infeasibility_bound(blocks, Z, nv, opts.var_bound)
        slack = max(slack, t_check) if slack is not None else t_check
    elif status == OPTIMAL:
        ok = all(m >= sdp.margin_of(b) - opts.check_tol for m, b in zip(margins, sdp.blocks))
        if not ok:
            status = NUMERICAL
    obj = float(sdp.c @ y_out)
    return SdpSolution(y_out, obj, status, margins, it, time.perf_counter() - t_start, slack,
                       best_bound if feas else None, [b.name for b in sdp.blocks], rel_gap)


def _infeasibility_bound(blocks, Z, nv, R):
    """Upper bound on the max slack within the box ``|y| <= R`` from a dual point."""
    tr = sum(float(np.trace(Zj)) for Zj in Z)
    if tr <= 0:
        return None
    g = np.zeros(nv + 1)
    base = 0.0
    for b, Zj in zip(blocks, Z):
        g[b.vars] += b.adjoint(Zj)
        base += float(np.vdot(b.F0, Zj))
    # the slack column contributes -tr(Z); drop it, it is the quantity bounded
    return (base + R * np.abs(g[:nv]).sum()) / tr


def _dual_diverging(dobj, pinf, y):
    return (dobj > 1e10 and pinf > 1e-6) or not np.isfinite(dobj)


def lyapunov_sdp(A, delta=1e-6) -> BlockSdp:
    """``P > 0`` and ``-(A'P + PA) > 0`` as a feasibility BlockSdp."""
    from .lmi import VarRegistry, BlockSdp as _B

    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    reg = VarRegistry()
    P = reg.sym("P", n)
    sdp = _B(reg.nv, [], np.zeros(reg.nv), reg, delta)
    sdp.add_block("P", P)
    sdp.add_block("lyap", -(P.rmul(A) + P.rmul(A).T))
    return sdp
