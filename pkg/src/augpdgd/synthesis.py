"""Gain synthesis, gain recovery and maximum-delay bisection."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lmi
from .lmi import DecisionVars
from .problem import FORMAT_VERSION, Problem
from .sdp import FEASIBLE, OPTIMAL, SdpSolution, SolverOptions, check_certificate, solve
from .structure import ErrorSystem, GainMatrix, build_error_system


class Infeasible(Exception):
    """The conditions could not be certified for these parameters (not a fault)."""

    def __init__(self, h, eps, solution: SdpSolution | None = None):
        self.h, self.eps, self.solution = h, eps, solution
        status = solution.status if solution else "unsolved"
        super().__init__(f"no certificate for h={h}, eps={eps} (solver status {status})")


class SingularP2(RuntimeError):
    pass


class NotBracketed(ValueError):
    def __init__(self, message, suggestion=None):
        self.suggestion = suggestion
        super().__init__(message if suggestion is None else f"{message}; try {suggestion}")


SUBOPTIMAL = "Suboptimal"


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Certificate:
    eps: float
    h: list
    d: list
    tie: bool
    vars: DecisionVars
    gain: np.ndarray
    margins: list
    block_names: list
    y: np.ndarray
    delta: float
    problem_hash: str
    solver: dict
    status: str
    slack: float | None = None
    objective: float | None = None
    alpha: list | None = None
    vertex_scale: float = 1.0
    notes: list = field(default_factory=list)

    @property
    def min_margin(self) -> float:
        return float(min(self.margins))

    def gain_matrix(self, layout) -> GainMatrix:
        return GainMatrix.from_dense(layout, self.gain)

    def to_dict(self) -> dict:
        d = {
            "format_version": FORMAT_VERSION,
            "kind": "certificate",
            "eps": float(self.eps),
            "h": [float(v) for v in self.h],
            "d": [float(v) for v in self.d],
            "tie": bool(self.tie),
            "alpha": self.alpha,
            "status": self.status,
            "delta": float(self.delta),
            "slack": self.slack,
            "objective": self.objective,
            "vertex_scale": float(self.vertex_scale),
            "margins": [float(m) for m in self.margins],
            "blocks": list(self.block_names),
            "gain": np.asarray(self.gain).tolist(),
            "vars": self.vars.to_dict(),
            "y": [float(v) for v in self.y],
            "notes": list(self.notes),
            "provenance": {"problem_hash": self.problem_hash, "solver": self.solver},
        }
        d["provenance"]["content_hash"] = _hash({k: v for k, v in d.items() if k != "provenance"})
        return d

    @classmethod
    def from_dict(cls, d) -> "Certificate":
        if d.get("kind") != "certificate":
            raise ValueError("document is not a certificate")
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported certificate format_version {d.get('format_version')}")
        prov = d["provenance"]
        return cls(d["eps"], list(d["h"]), list(d["d"]), d["tie"], DecisionVars.from_dict(d["vars"]),
                   np.array(d["gain"], dtype=float), list(d["margins"]), list(d["blocks"]),
                   np.array(d["y"], dtype=float), d["delta"], prov["problem_hash"], prov["solver"],
                   d["status"], d.get("slack"), d.get("objective"), d.get("alpha"),
                   d.get("vertex_scale", 1.0), list(d.get("notes", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Certificate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def recover_gain(v: DecisionVars, layout) -> np.ndarray:
    """``K = (P2')^{-1} X`` block by block."""
    K = np.zeros((layout.r, layout.r))
    for i in range(len(layout.r_dims)):
        s = layout.z_slice(i)
        K[s, s] = np.linalg.solve(v.P2[s, s].T, v.X[s, s])
    return K


def rebuild_sdp(sys: ErrorSystem, cert: Certificate) -> lmi.BlockSdp:
    """The program a certificate claims to satisfy."""
    sdp = lmi.assemble_vertex_program(sys, h=cert.h, d=cert.d, eps=cert.eps, tie=cert.tie, delta=cert.delta)
    if cert.alpha is not None:
        sdp = lmi.add_gain_size_blocks(sdp, *cert.alpha)
    return sdp


def system_for(p: Problem, h, d, collapse=True) -> ErrorSystem:
    return build_error_system(p, (float(h), float(d)), collapse=collapse)


def synthesize(sys: ErrorSystem, h=None, d=None, eps=1.5, minimize_gain=None, tie=False,
               opts: SolverOptions | None = None, delta=1e-6) -> Certificate:
    """Solve the vertex conditions (optionally the gain-size program) and recover the gain.

    Raises Infeasible when no certificate with margin ``delta`` is found.
    """
    opts = opts or SolverOptions()
    sdp = lmi.assemble_vertex_program(sys, h=h, d=d, eps=eps, tie=tie, delta=delta)
    if minimize_gain is not None:
        sdp = lmi.add_gain_size_blocks(sdp, *minimize_gain)
    sol = solve(sdp, opts)
    hs = sdp.meta["h"]
    notes = []
    if sol.status not in (FEASIBLE, OPTIMAL):
        if minimize_gain is None or sol.rel_gap is None or not _margins_pass(sdp, sol, opts):
            raise Infeasible(hs, eps, sol)
        # the iterate satisfies every block; only the gain-size objective is inexact
        notes.append(f"gain-size objective stalled at relative gap {sol.rel_gap:.1e}; certificate is feasible")
        sol.status = SUBOPTIMAL
    cert = _certificate(sys, sdp, sol, eps, tie, minimize_gain, opts)
    cert.notes.extend(notes)
    return cert


def _margins_pass(sdp, sol, opts) -> bool:
    return all(m >= sdp.margin_of(b) - opts.check_tol for m, b in zip(sol.margins, sdp.blocks))


def _certificate(sys, sdp, sol, eps, tie, alpha, opts) -> Certificate:
    v = lmi.decision_vars_from(sdp, sol.y)
    L = sys.layout
    for i, name in enumerate(sol.names):
        if name.startswith("P2_sym") and sol.margins[i] < sdp.delta - opts.check_tol:
            raise SingularP2(f"{name} margin {sol.margins[i]:.3e} below {sdp.delta:.1e}")
    K = recover_gain(v, L)
    vscale = max(b.scale for b in sdp.blocks if b.name.startswith("vertex"))
    return Certificate(
        eps=float(eps), h=list(sdp.meta["h"]), d=list(sdp.meta["d"]), tie=bool(tie), vars=v, gain=K,
        margins=list(sol.margins), block_names=list(sol.names), y=sol.y, delta=sdp.delta,
        problem_hash=sys.problem.fingerprint(), solver=opts.to_dict(), status=sol.status,
        slack=sol.slack, objective=sol.objective if alpha is not None else None,
        alpha=None if alpha is None else [float(a) for a in alpha], vertex_scale=float(vscale),
    )


@dataclass
class TraceEntry:
    h: float
    feasible: bool
    status: str
    slack: float | None
    bound: float | None
    iterations: int


@dataclass
class MadubResult:
    h_bar: float
    certificate: Certificate
    trace: list
    tol: float
    eps: float
    d: float
    notes: list = field(default_factory=list)

    def monotone(self) -> bool:
        feas = [t.h for t in self.trace if t.feasible]
        infeas = [t.h for t in self.trace if not t.feasible]
        return not feas or not infeas or max(feas) < min(infeas)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "madub",
            "eps": float(self.eps),
            "d": float(self.d),
            "tol": float(self.tol),
            "h_bar": float(self.h_bar),
            "monotone": self.monotone(),
            "trace": [t.__dict__ for t in self.trace],
            "notes": list(self.notes),
        }

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["h", "status", "feasible", "slack", "bound", "iterations"])
            for t in self.trace:
                w.writerow([f"{t.h:.6f}", t.status, int(t.feasible), "" if t.slack is None else repr(t.slack),
                            "" if t.bound is None else repr(t.bound), t.iterations])


def _probe(sys, h, d, eps, tie, opts, delta):
    sdp = lmi.assemble_vertex_program(sys, h=h, d=d, eps=eps, tie=tie, delta=delta)
    sol = solve(sdp, opts)
    ok = sol.status in (FEASIBLE, OPTIMAL)
    entry = TraceEntry(float(h), ok, sol.status, sol.slack, sol.infeasibility_bound, sol.iterations)
    return entry, sdp, sol


def madub(sys: ErrorSystem, d=0.1, eps=1.5, h_lo=0.0, h_hi=2.0, tol=1e-3, tie=False,
          minimize_gain=(1.0, 1.0), opts: SolverOptions | None = None, delta=1e-6) -> MadubResult:
    """Largest certified unified delay bound by bisection on the grid ``tol * k``.

    The gain-size program is solved only once, at the final bound; if it fails
    the feasibility certificate is kept and a note is recorded.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 <= h_lo < h_hi:
        raise ValueError("need 0 <= h_lo < h_hi")
    opts = opts or SolverOptions(stop_when_decided=True)
    lo_k = math.ceil(round(h_lo / tol, 9))
    hi_k = math.floor(round(h_hi / tol, 9))
    if hi_k <= lo_k:
        raise ValueError("bracket narrower than the tolerance")
    trace = []
    e_lo, sdp_lo, sol_lo = _probe(sys, lo_k * tol, d, eps, tie, opts, delta)
    trace.append(e_lo)
    if not e_lo.feasible:
        raise NotBracketed(f"not certified at h_lo={lo_k * tol:g}", f"h_lo={lo_k * tol / 2:g}")
    e_hi, _, _ = _probe(sys, hi_k * tol, d, eps, tie, opts, delta)
    trace.append(e_hi)
    if e_hi.feasible:
        raise NotBracketed(f"still certified at h_hi={hi_k * tol:g}", f"h_hi={2 * hi_k * tol:g}")
    best = (sdp_lo, sol_lo)
    while hi_k - lo_k > 1:
        mid = (lo_k + hi_k) // 2
        e, sdp_m, sol_m = _probe(sys, mid * tol, d, eps, tie, opts, delta)
        trace.append(e)
        if e.feasible:
            lo_k, best = mid, (sdp_m, sol_m)
        else:
            hi_k = mid
    h_bar = round(lo_k * tol, 12)
    notes = []
    cert = _certificate(sys, best[0], best[1], eps, tie, None, opts)
    if minimize_gain is not None:
        try:
            cert = synthesize(sys, h=h_bar, d=d, eps=eps, minimize_gain=minimize_gain, tie=tie,
                              opts=SolverOptions(**{**opts.to_dict(), "stop_when_decided": False}), delta=delta)
        except Infeasible as exc:
            notes.append(f"gain-size program failed at h_bar ({exc}); feasibility certificate kept")
    res = MadubResult(h_bar, cert, trace, tol, float(eps), float(d), notes)
    if not res.monotone():
        res.notes.append("bisection trace is not monotone")
    return res


def verify_certificate(sys: ErrorSystem, cert: Certificate, check_tol=1e-8) -> dict:
    """Recheck margins and gain recovery for a certificate against ``sys``."""
    out = {}
    out["provenance"] = cert.problem_hash == sys.problem.fingerprint()
    sdp = rebuild_sdp(sys, cert)
    margins = check_certificate(sdp, cert.y)
    need = [sdp.margin_of(b) - check_tol for b in sdp.blocks]
    out["margins_ok"] = all(m >= n for m, n in zip(margins, need))
    out["min_margin"] = float(min(margins))
    out["margins_match"] = bool(np.allclose(margins, cert.margins, atol=1e-9, rtol=0))
    v = lmi.decision_vars_from(sdp, cert.y)
    out["vars_match"] = bool(np.allclose(v.X, cert.vars.X, atol=1e-12) and np.allclose(v.P2, cert.vars.P2, atol=1e-12))
    resid = np.abs(cert.vars.P2.T @ cert.gain - cert.vars.X).max()
    out["gain_residual"] = float(resid)
    out["gain_ok"] = bool(resid <= 1e-9)
    return out
