"""Delay-differential simulation of the standard and augmented PDGD, delay
signals, Lyapunov-Krasovskii functional evaluation and stability labels.

Integration is fixed-step RK4. Delayed states come from a ring buffer of past
grid values with linear interpolation; inside the current step the delayed
value is interpolated between the step's start and the stage state, so a zero
delay reproduces undelayed RK4. The history before t = 0 is the initial state.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .problem import FORMAT_VERSION, LogSumExpForm, QuadraticForm, SinForm, SqrtRatioForm
from .structure import ErrorSystem, GainMatrix, MissingHistory, local_matrix, rhs_augmented

BLOWUP = 1e9
CONVERGED, OSCILLATING, DIVERGED = "Converged", "Oscillating", "Diverged"


class Diverged(RuntimeError):
    def __init__(self, t):
        self.t = t
        super().__init__(f"state norm exceeded {BLOWUP:g} at t={t:g}")


class Unsupported(ValueError):
    pass


# ---------------------------------------------------------------------------
# delay signals


@dataclass(frozen=True)
class DelaySignal:
    """``kind`` is one of constant, sinusoid, sawtooth, random."""

    kind: str
    h: float
    d: float = 0.0
    period: float = 1.0
    dwell: float = 0.5
    seed: int = 0
    tau0: float = 0.0

    @classmethod
    def constant(cls, tau0):
        return cls("constant", float(tau0), tau0=float(tau0))

    @classmethod
    def sinusoid(cls, h, d):
        return cls("sinusoid", float(h), d=float(d))

    @classmethod
    def sawtooth(cls, h, period):
        return cls("sawtooth", float(h), d=1.0, period=float(period))

    @classmethod
    def piecewise_random(cls, h, dwell, seed=0):
        return cls("random", float(h), d=1.0, dwell=float(dwell), seed=int(seed))

    @property
    def fast_varying(self) -> bool:
        return self.kind in ("sawtooth", "random")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.tau0)
        if self.kind == "sinusoid":
            omega = 2.0 * self.d / self.h if self.h > 0 else np.inf
            if not np.isfinite(omega):  # h == 0 or subnormal: the delay is zero
                return np.zeros_like(t)
            return 0.5 * self.h * (1.0 + np.sin(omega * t))
        if self.kind == "sawtooth":
            return self.h * np.mod(t, self.period) / self.period
        if self.kind == "random":
            idx = np.floor(np.maximum(t, 0.0) / self.dwell).astype(np.int64)
            n = int(idx.max(initial=0)) + 1
            vals = np.random.default_rng(self.seed).uniform(0.0, self.h, size=n)
            return vals[idx]
        raise ValueError(f"unknown delay kind {self.kind!r}")

    def describe(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def parse_delay(spec: str) -> DelaySignal:
    """``const:0.2``, ``sin:h=1.0,d=0.1``, ``saw:h=0.5,period=1``, ``rand:h=0.5,dwell=0.2,seed=3``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind in ("const", "constant"):
        return DelaySignal.constant(float(rest))
    kw = {}
    for part in filter(None, rest.split(",")):
        k, _, v = part.partition("=")
        kw[k.strip()] = float(v)
    try:
        if kind in ("sin", "sinusoid"):
            return DelaySignal.sinusoid(kw["h"], kw["d"])
        if kind in ("saw", "sawtooth"):
            return DelaySignal.sawtooth(kw["h"], kw.get("period", 1.0))
        if kind in ("rand", "random"):
            return DelaySignal.piecewise_random(kw["h"], kw.get("dwell", 0.5), int(kw.get("seed", 0)))
    except KeyError as exc:
        raise ValueError(f"delay spec {spec!r} misses {exc.args[0]}") from None
    raise ValueError(f"unknown delay spec {spec!r}")


# ---------------------------------------------------------------------------
# trajectory


@dataclass
class Trajectory:
    t: np.ndarray  # (S,)
    z: np.ndarray  # (S, r, B)
    u: np.ndarray | None  # (S, r, B) for the augmented dynamics
    dz: np.ndarray  # (S, r, B) right-hand side at the samples
    tau: np.ndarray  # (S, rho)
    dt: float
    augmented: bool
    diverged_at: float | None = None
    z_star: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def z_err(self) -> np.ndarray:
        zs = 0.0 if self.z_star is None else self.z_star[None, :, None]
        return self.z - zs

    def u_err(self):
        if self.u is None:
            return None
        zs = 0.0 if self.z_star is None else self.z_star[None, :, None]
        return self.u - zs

    def err_norm(self) -> np.ndarray:
        """``||z~||`` per sample and column, shape (S, B)."""
        return np.linalg.norm(self.z_err(), axis=1)

    def write_csv(self, path, layout, column=0, V=None):
        xi, li = layout.x_index, layout.l_index
        head = ["t"] + [f"x{k + 1}" for k in range(len(xi))] + [f"lambda{k + 1}" for k in range(len(li))]
        if self.u is not None:
            head += [f"u1_{k + 1}" for k in range(len(xi))] + [f"u2_{k + 1}" for k in range(len(li))]
        head += [f"tau{k + 1}" for k in range(self.tau.shape[1])] + ["V", "err_norm"]
        en = self.err_norm()[:, column]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(head)
            for s in range(len(self.t)):
                z = self.z[s, :, column]
                row = [self.t[s]] + list(z[xi]) + list(z[li])
                if self.u is not None:
                    uu = self.u[s, :, column]
                    row += list(uu[xi]) + list(uu[li])
                row += list(self.tau[s]) + ["" if V is None or not np.isfinite(V[s]) else V[s], en[s]]
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    return v if isinstance(v, str) else f"{float(v):.12g}"


# ---------------------------------------------------------------------------
# compiled kernel

_NL_LSE, _NL_SIN, _NL_SQRT = 1, 2, 3


@njit(cache=True)
def _nl_grad(kind, p0, p1, p2, x):
    if kind == 1:
        w = p1 - p0
        v = w * x
        if v >= 0:
            s = 1.0 / (1.0 + math.exp(-v))
        else:
            ev = math.exp(v)
            s = ev / (1.0 + ev)
        return p0 + w * s + 2.0 * p2 * x
    if kind == 2:
        return p0 * p1 * math.cos(p1 * x) + 2.0 * p2 * x
    s = x * x + p0
    return (x * x * x + 2.0 * p0 * x) / (s * math.sqrt(s)) + 2.0 * p1 * x


@njit(cache=True, fastmath=True)
def _rhs(Lm, Km, cvec, T, nl_pos, nl_kind, nl_par, z, u, zd, aug, dz, du):
    r, B = z.shape
    for i in range(r):
        for b in range(B):
            acc = cvec[i]
            for j in range(r):
                acc += Lm[i, j] * z[j, b]
            if aug:
                for j in range(r):
                    acc -= Km[i, j] * u[j, b]
            dz[i, b] = acc
    for k in range(T.shape[0]):
        for i in range(r):
            for j in range(r):
                tij = T[k, i, j]
                if tij != 0.0:
                    for b in range(B):
                        dz[i, b] += tij * zd[k, j, b]
    for q in range(len(nl_pos)):
        i = nl_pos[q]
        for b in range(B):
            dz[i, b] -= _nl_grad(nl_kind[q], nl_par[q, 0], nl_par[q, 1], nl_par[q, 2], z[i, b])
    if aug:
        for i in range(r):
            for b in range(B):
                du[i, b] = z[i, b] - u[i, b]


@njit(cache=True)
def _delayed(buf, D, n, zn, Y, c, tau, z0, out):
    # state at (n + c) dt - tau; positions are in units of dt
    r, B = out.shape
    pos = n + c - tau
    rp = round(pos)
    if abs(pos - rp) < 1e-9:
        pos = rp
    if pos <= 0.0:
        out[:, :] = z0
        return 0
    if pos >= n:
        if c == 0.0:
            out[:, :] = zn
        else:
            f = (pos - n) / c
            for i in range(r):
                for b in range(B):
                    out[i, b] = zn[i, b] + f * (Y[i, b] - zn[i, b])
        return 0
    i0 = int(math.floor(pos))
    if i0 < n - D + 2:
        return 1
    f = pos - i0
    lo = buf[i0 % D]
    if f == 0.0:
        out[:, :] = lo
    else:
        hi = buf[(i0 + 1) % D]
        for i in range(r):
            for b in range(B):
                out[i, b] = (1.0 - f) * lo[i, b] + f * hi[i, b]
    return 0


@njit(cache=True)
def _axpy(out, x, a, y):
    r, B = out.shape
    for i in range(r):
        for b in range(B):
            out[i, b] = x[i, b] + a * y[i, b]


@njit(cache=True)
def _integrate(Lm, Km, cvec, T, nl_pos, nl_kind, nl_par, z0, u0, aug, tau_half, dt, nsteps, save_every,
               D, blowup, Zs, Us, DZs):
    r, B = z0.shape
    rho = T.shape[0]
    buf = np.empty((D, r, B))
    z = z0.copy()
    u = u0.copy()
    buf[0] = z
    zd = np.empty((rho, r, B))
    dz1 = np.empty((r, B)); du1 = np.zeros((r, B))
    dz2 = np.empty((r, B)); du2 = np.zeros((r, B))
    dz3 = np.empty((r, B)); du3 = np.zeros((r, B))
    dz4 = np.empty((r, B)); du4 = np.zeros((r, B))
    Y = np.empty((r, B)); V = np.empty((r, B))
    isave = 0
    h6 = dt / 6.0
    for n in range(nsteps + 1):
        # stage 1 (also the saved right-hand side)
        for k in range(rho):
            if _delayed(buf, D, n, z, z, 0.0, tau_half[2 * n, k] / dt, z0, zd[k]):
                return -2, n
        _rhs(Lm, Km, cvec, T, nl_pos, nl_kind, nl_par, z, u, zd, aug, dz1, du1)
        if n % save_every == 0:
            Zs[isave] = z
            Us[isave] = u
            DZs[isave] = dz1
            isave += 1
        if n == nsteps:
            break
        _axpy(Y, z, 0.5 * dt, dz1)
        _axpy(V, u, 0.5 * dt, du1)
        for k in range(rho):
            if _delayed(buf, D, n, z, Y, 0.5, tau_half[2 * n + 1, k] / dt, z0, zd[k]):
                return -2, n
        _rhs(Lm, Km, cvec, T, nl_pos, nl_kind, nl_par, Y, V, zd, aug, dz2, du2)
        _axpy(Y, z, 0.5 * dt, dz2)
        _axpy(V, u, 0.5 * dt, du2)
        for k in range(rho):
            if _delayed(buf, D, n, z, Y, 0.5, tau_half[2 * n + 1, k] / dt, z0, zd[k]):
                return -2, n
        _rhs(Lm, Km, cvec, T, nl_pos, nl_kind, nl_par, Y, V, zd, aug, dz3, du3)
        _axpy(Y, z, dt, dz3)
        _axpy(V, u, dt, du3)
        for k in range(rho):
            if _delayed(buf, D, n, z, Y, 1.0, tau_half[2 * n + 2, k] / dt, z0, zd[k]):
                return -2, n
        _rhs(Lm, Km, cvec, T, nl_pos, nl_kind, nl_par, Y, V, zd, aug, dz4, du4)
        big = 0.0
        nb = buf[(n + 1) % D]
        for i in range(r):
            for b in range(B):
                z[i, b] += h6 * (dz1[i, b] + 2.0 * dz2[i, b] + 2.0 * dz3[i, b] + dz4[i, b])
                if aug:
                    u[i, b] += h6 * (du1[i, b] + 2.0 * du2[i, b] + 2.0 * du3[i, b] + du4[i, b])
                nb[i, b] = z[i, b]
                a = abs(z[i, b])
                if not a < blowup:
                    big = np.inf
                elif a > big:
                    big = a
        if big >= blowup:
            return -1, n + 1
    return 0, isave


_KIND = {LogSumExpForm: _NL_LSE, SinForm: _NL_SIN, SqrtRatioForm: _NL_SQRT}


def _compile_model(sys: ErrorSystem, gain: np.ndarray | None):
    """Split the dynamics into ``L z + c + sum_k T_k z_tau - g_nl(x) - K u``."""
    p = sys.problem
    L = sys.layout
    r = sys.r
    Lm = np.zeros((r, r))
    cvec = np.zeros(r)
    nl_pos, nl_kind, nl_par = [], [], []
    for i in range(p.N):
        s = L.z_slice(i)
        form = p.costs[i].form
        if isinstance(form, QuadraticForm):
            Lm[s, s] = local_matrix(p, i, form.H)
            cvec[L.x_slice(i)] = -form.g
        elif type(form) in _KIND:
            Lm[s, s] = local_matrix(p, i, np.zeros((1, 1)))
            nl_pos.append(L.x_slice(i).start)
            nl_kind.append(_KIND[type(form)])
            prm = form.params()
            if isinstance(form, LogSumExpForm):
                nl_par.append([prm["a"], prm["b"], prm["q"]])
            elif isinstance(form, SinForm):
                nl_par.append([prm["amp"], prm["freq"], prm["q"]])
            else:
                nl_par.append([prm["c"], prm["q"], 0.0])
        else:
            raise Unsupported(f"no compiled gradient for form {form.name!r}")
        if p.m_dims[i]:
            cvec[L.l_slice(i)] = -p.b_block(i)
    K = np.zeros((r, r)) if gain is None else np.asarray(gain, dtype=float)
    T = np.array([e.T for e in sys.edges]) if sys.edges else np.zeros((0, r, r))
    return (Lm + K, K, cvec, T, np.array(nl_pos, dtype=np.int64), np.array(nl_kind, dtype=np.int64),
            np.array(nl_par, dtype=float).reshape(-1, 3))


def _as_gain(gain):
    if gain is None:
        return None
    if isinstance(gain, GainMatrix):
        return gain.matrix
    return np.asarray(gain, dtype=float)


def integrate(sys: ErrorSystem, delays, z0, u0=None, T=10.0, dt=1e-3, gain=None, augmented=None,
              save_dt=None, z_star=None, backend="numba", blowup=BLOWUP, raise_on_divergence=False) -> Trajectory:
    """RK4 integration of the delayed (augmented) PDGD.

    ``z0`` (and ``u0``) are agent-major states ``col(x_i, lambda_i)``, shape (r,)
    or (r, B) for a batch. ``delays`` holds one DelaySignal per edge of ``sys``
    (a single signal is broadcast). ``augmented`` defaults to ``gain is not None``.
    """
    if dt <= 0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    gain = _as_gain(gain)
    if augmented is None:
        augmented = gain is not None
    if isinstance(delays, DelaySignal):
        delays = [delays] * sys.rho
    delays = list(delays)
    if len(delays) != sys.rho:
        raise ValueError(f"{len(delays)} delay signals for {sys.rho} edges")
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 1
    z0 = z0.reshape(sys.r, -1).copy()
    u0 = z0.copy() if u0 is None else np.asarray(u0, dtype=float).reshape(sys.r, -1).copy()
    nsteps = int(round(T / dt))
    save_dt = dt if save_dt is None else save_dt
    save_every = max(1, int(round(save_dt / dt)))
    t_half = 0.5 * dt * np.arange(2 * nsteps + 3)
    tau_half = np.stack([sig(t_half) for sig in delays], axis=1) if delays else np.zeros((len(t_half), 0))
    hmax = max((float(np.max(tau_half[:, k])) for k in range(sys.rho)), default=0.0)
    D = int(math.ceil(hmax / dt)) + 4
    nsave = nsteps // save_every + 1
    r, B = z0.shape
    Zs = np.full((nsave, r, B), np.nan)
    Us = np.full((nsave, r, B), np.nan)
    DZs = np.full((nsave, r, B), np.nan)
    if backend == "numba":
        model = _compile_model(sys, gain if augmented else None)
        code, last = _integrate(*model, z0, u0, bool(augmented), tau_half, float(dt), nsteps, save_every, D,
                                float(blowup), Zs, Us, DZs)
    elif backend == "numpy":
        code, last = _integrate_numpy(sys, gain if augmented else None, bool(augmented), z0, u0, tau_half, dt,
                                      nsteps, save_every, D, blowup, Zs, Us, DZs)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if code == -2:
        raise MissingHistory(f"history buffer too short at step {last}")
    t = dt * save_every * np.arange(nsave)
    diverged_at = None
    if code == -1:
        diverged_at = last * dt
        keep = int(np.sum(t <= diverged_at + 1e-12))
        keep = max(1, min(keep, int(np.sum(np.all(np.isfinite(Zs), axis=(1, 2))))))
        t, Zs, Us, DZs = t[:keep], Zs[:keep], Us[:keep], DZs[:keep]
        if raise_on_divergence:
            raise Diverged(diverged_at)
    tau_s = tau_half[::2][: len(t) * save_every: save_every][: len(t)]
    traj = Trajectory(t, Zs, Us if augmented else None, DZs, tau_s, dt, bool(augmented), diverged_at,
                      None if z_star is None else np.asarray(z_star, dtype=float),
                      meta={"delays": [s.describe() for s in delays], "T": float(T), "dt": float(dt),
                            "batch": B, "single": single})
    return traj


def _integrate_numpy(sys, gain, aug, z0, u0, tau_half, dt, nsteps, save_every, D, blowup, Zs, Us, DZs):
    """Reference path: the same scheme with the per-agent right-hand side."""
    L = sys.layout
    s2 = sys.with_gain(gain) if gain is not None else sys.with_gain(None)
    r, B = z0.shape
    buf = np.empty((D, r, B))
    z, u = z0.copy(), u0.copy()
    buf[0] = z

    def delayed(n, Y, c, tau):
        pos = n + c - tau / dt
        rp = round(pos)
        if abs(pos - rp) < 1e-9:
            pos = rp
        if pos <= 0:
            return z0
        if pos >= n:
            return z if c == 0 else z + (pos - n) / c * (Y - z)
        i0 = int(math.floor(pos))
        if i0 < n - D + 2:
            raise MissingHistory(f"history buffer too short at step {n}")
        f = pos - i0
        return buf[i0 % D] if f == 0 else (1 - f) * buf[i0 % D] + f * buf[(i0 + 1) % D]

    def f(Y, V, zd):
        dz = np.empty((r, B))
        du = np.empty((r, B))
        for b in range(B):
            x, lam = L.unpack(Y[:, b])
            ux, ul = L.unpack(V[:, b])
            dl = [zd_k[:, b] for zd_k in zd]
            out = rhs_augmented(s2, (x, lam, ux, ul), dl, gain=aug)
            dz[:, b] = L.pack(out[0], out[1])
            du[:, b] = L.pack(out[2], out[3])
        return dz, du

    isave = 0
    rho = sys.rho
    for n in range(nsteps + 1):
        zd = [delayed(n, z, 0.0, tau_half[2 * n, k]) for k in range(rho)]
        k1 = f(z, u, zd)
        if n % save_every == 0:
            Zs[isave], Us[isave], DZs[isave] = z, u, k1[0]
            isave += 1
        if n == nsteps:
            break
        Y, V = z + 0.5 * dt * k1[0], u + 0.5 * dt * k1[1]
        k2 = f(Y, V, [delayed(n, Y, 0.5, tau_half[2 * n + 1, k]) for k in range(rho)])
        Y, V = z + 0.5 * dt * k2[0], u + 0.5 * dt * k2[1]
        k3 = f(Y, V, [delayed(n, Y, 0.5, tau_half[2 * n + 1, k]) for k in range(rho)])
        Y, V = z + dt * k3[0], u + dt * k3[1]
        k4 = f(Y, V, [delayed(n, Y, 1.0, tau_half[2 * n + 2, k]) for k in range(rho)])
        z = z + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        if aug:
            u = u + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        buf[(n + 1) % D] = z
        if not np.all(np.abs(z) < blowup):
            return -1, n + 1
    return 0, isave


# ---------------------------------------------------------------------------
# Lyapunov-Krasovskii functional


def _trapz_w(n):
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def evaluate_lkf(traj: Trajectory, v, h, column=0, tau=None) -> np.ndarray:
    """V(t) at every sample with ``t >= max h``; earlier samples are NaN.

    ``V1 = [z; u]' Y [z; u]``, ``V2 = int_{t-h}^t z'Sz``, ``V3 = int_{t-tau(t)}^t z'Qz``
    and ``V4 = h int_{t-h}^t (s - t + h) zdot' R zdot ds`` (the double integral
    rewritten as a single one), all by trapezoidal quadrature on the samples.
    """
    if traj.u is None:
        raise Unsupported("the functional is defined for the augmented dynamics")
    hs = np.broadcast_to(np.asarray(h, dtype=float), (len(v.R),))
    t = traj.t
    dts = t[1] - t[0] if len(t) > 1 else traj.dt
    z = traj.z_err()[:, :, column]
    u = traj.u_err()[:, :, column]
    zd = traj.dz[:, :, column]
    Y = np.block([[v.Y11, v.Y12], [v.Y12.T, v.Y22]])
    w = np.concatenate([z, u], axis=1)
    V1 = np.einsum("si,ij,sj->s", w, Y, w)
    out = np.full(len(t), np.nan)
    hmax = float(hs.max(initial=0.0))
    start = int(math.ceil(hmax / dts - 1e-9))
    if start >= len(t):
        raise Unsupported(f"trajectory shorter than the history horizon {hmax}")
    out[start:] = V1[start:]
    taus = traj.tau if tau is None else tau
    for k in range(len(v.R)):
        nk = int(round(hs[k] / dts))
        qS = np.einsum("si,ij,sj->s", z, v.S[k], z)
        qR = np.einsum("si,ij,sj->s", zd, v.R[k], zd)
        qQ = np.einsum("si,ij,sj->s", z, v.Q[k], z) if v.Q is not None else None
        csS = np.concatenate([[0.0], np.cumsum(0.5 * (qS[1:] + qS[:-1]) * dts)])
        if qQ is not None:
            csQ = np.concatenate([[0.0], np.cumsum(0.5 * (qQ[1:] + qQ[:-1]) * dts)])
        wR = _trapz_w(nk + 1) * dts
        ramp = dts * np.arange(nk + 1)  # s - t + h on the window
        for s in range(start, len(t)):
            V2 = csS[s] - csS[s - nk]
            V4 = hs[k] * float(np.sum(wR * ramp * qR[s - nk:s + 1]))
            V3 = 0.0
            if qQ is not None:
                tq = float(taus[s, k]) if taus.shape[1] > k else 0.0
                pos = s - tq / dts
                i0 = int(math.floor(pos))
                f = pos - i0
                if i0 < s:
                    qa = qQ[i0] + f * (qQ[min(i0 + 1, s)] - qQ[i0])
                    V3 = (csQ[s] - csQ[min(i0 + 1, s)]) + 0.5 * (qa + qQ[min(i0 + 1, s)]) * (1 - f) * dts
            out[s] += V2 + V3 + V4
    return out


def lkf_decrease(V, slack=1e-3) -> dict:
    """Largest increase between consecutive samples relative to ``V(t0)``."""
    Vf = V[np.isfinite(V)]
    if len(Vf) < 2:
        return {"ok": True, "max_increase": 0.0, "V0": float(Vf[0]) if len(Vf) else 0.0}
    inc = np.diff(Vf)
    worst = float(inc.max())
    V0 = float(Vf[0])
    return {"ok": bool(worst <= slack * V0), "max_increase": worst, "V0": V0, "min_V": float(Vf.min())}


# ---------------------------------------------------------------------------
# classification


def classify_stability(traj: Trajectory, window=0.2, tol=1e-3, relative=True) -> list:
    """One label per batch column with tail metrics."""
    en = traj.err_norm()
    n = en.shape[0]
    tail = en[max(0, int(math.floor((1 - window) * n))):]
    out = []
    for b in range(en.shape[1]):
        scale = max(en[0, b], 1e-300) if relative else 1.0
        info = {"tail_max": float(np.max(tail[:, b])) if tail.size else float("nan"),
                "tail_ptp": float(np.ptp(tail[:, b])) if tail.size else float("nan"),
                "initial": float(en[0, b]), "final": float(en[-1, b])}
        if traj.diverged or not np.all(np.isfinite(en[:, b])):
            label = DIVERGED
        elif info["tail_max"] < tol * scale:
            label = CONVERGED
        else:
            label = OSCILLATING
        info["label"] = label
        out.append(info)
    return out


def summary(traj: Trajectory, labels, extra=None) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "kind": "simulation",
        "augmented": traj.augmented,
        "T": traj.meta.get("T"),
        "dt": traj.dt,
        "delays": traj.meta.get("delays"),
        "diverged_at": traj.diverged_at,
        "labels": [x["label"] for x in labels],
        "label": _worst([x["label"] for x in labels]),
        "metrics": labels,
    }
    if extra:
        d.update(extra)
    return d


def _worst(labels):
    for lab in (DIVERGED, OSCILLATING, CONVERGED):
        if lab in labels:
            return lab
    return CONVERGED


def summary_json(d) -> str:
    return json.dumps(d, indent=1, sort_keys=True)
