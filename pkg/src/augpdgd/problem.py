"""Separable equality-constrained convex programs and their KKT ground truth.

A problem is ``min sum_i f_i(x_i)  s.t.  A x = b`` where the agents own the
column blocks of ``A`` and the first ``M`` agents additionally own one block
row (and therefore a dual variable) each.
"""

from __future__ import annotations

import json
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

FORMAT_VERSION = 1


class NonConvergence(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"Newton did not converge after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class EvaluatorFailure(RuntimeError):
    pass


class ProblemFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cost catalog


class Form:
    """Smooth cost form on R^dim with value, gradient and Hessian."""

    name = "form"
    dim = 1

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def curvature_bounds(self):
        """Global (lo, hi) on the Hessian spectrum, or None if unknown."""
        return None

    def params(self) -> dict:
        raise NotImplementedError


class QuadraticForm(Form):
    """``0.5 x'Hx + g'x + c``."""

    name = "quadratic"

    def __init__(self, H, g=None, c=0.0):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        self.H = 0.5 * (H + H.T)
        self.dim = self.H.shape[0]
        self.g = np.zeros(self.dim) if g is None else np.asarray(g, dtype=float).reshape(self.dim)
        self.c = float(c)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x + self.c)

    def gradient(self, x):
        return self.H @ np.asarray(x, dtype=float) + self.g

    def hessian(self, x):
        return self.H.copy()

    def curvature_bounds(self):
        ev = np.linalg.eigvalsh(self.H)
        return float(ev[0]), float(ev[-1])

    def params(self):
        return {"H": self.H.tolist(), "g": self.g.tolist(), "c": self.c}


class _ScalarForm(Form):
    dim = 1

    def _d2(self, x):
        raise NotImplementedError

    def hessian(self, x):
        return np.array([[float(self._d2(np.asarray(x, dtype=float).reshape(1)[0]))]])


class LogSumExpForm(_ScalarForm):
    """``ln(exp(a x) + exp(b x)) + q x^2``."""

    name = "logsumexp_quadratic"

    def __init__(self, a, b, q):
        self.a, self.b, self.q = float(a), float(b), float(q)

    def value(self, x):
        x = float(np.asarray(x).reshape(-1)[0])
        return float(np.logaddexp(self.a * x, self.b * x) + self.q * x * x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float).reshape(1)
        w = self.b - self.a
        return self.a + w * expit(w * x) + 2.0 * self.q * x

    def _d2(self, x):
        w = self.b - self.a
        s = expit(w * x)
        return w * w * s * (1.0 - s) + 2.0 * self.q

    def curvature_bounds(self):
        w = self.b - self.a
        return 2.0 * self.q, 2.0 * self.q + 0.25 * w * w

    def params(self):
        return {"a": self.a, "b": self.b, "q": self.q}


class SinForm(_ScalarForm):
    """``amp * sin(freq * x) + q x^2``."""

    name = "sin_quadratic"

    def __init__(self, amp, freq, q):
        self.amp, self.freq, self.q = float(amp), float(freq), float(q)

    def value(self, x):
        x = float(np.asarray(x).reshape(-1)[0])
        return float(self.amp * np.sin(self.freq * x) + self.q * x * x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float).reshape(1)
        return self.amp * self.freq * np.cos(self.freq * x) + 2.0 * self.q * x

    def _d2(self, x):
        return -self.amp * self.freq**2 * np.sin(self.freq * x) + 2.0 * self.q

    def curvature_bounds(self):
        k = abs(self.amp) * self.freq**2
        return 2.0 * self.q - k, 2.0 * self.q + k

    def params(self):
        return {"amp": self.amp, "freq": self.freq, "q": self.q}


class SqrtRatioForm(_ScalarForm):
    """``x^2 / sqrt(x^2 + c) + q x^2`` with ``c > 0``."""

    name = "sqrt_ratio_quadratic"

    def __init__(self, c, q):
        self.c, self.q = float(c), float(q)
        if self.c <= 0:
            raise ValueError("sqrt_ratio_quadratic needs c > 0")

    def value(self, x):
        x = float(np.asarray(x).reshape(-1)[0])
        return float(x * x / np.sqrt(x * x + self.c) + self.q * x * x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float).reshape(1)
        s = x * x + self.c
        return (x**3 + 2.0 * self.c * x) / s**1.5 + 2.0 * self.q * x

    def _d2(self, x):
        s = x * x + self.c
        return self.c * (2.0 * self.c - x * x) / s**2.5 + 2.0 * self.q

    def curvature_bounds(self):
        # extremes of c(2c - u)/(u + c)^{5/2} over u = x^2 >= 0 sit at u = 0 and u = 4c
        rc = np.sqrt(self.c)
        return 2.0 * self.q - 2.0 / (5.0**2.5 * rc), 2.0 * self.q + 2.0 / rc

    def params(self):
        return {"c": self.c, "q": self.q}


CATALOG = {
    QuadraticForm.name: QuadraticForm,
    LogSumExpForm.name: LogSumExpForm,
    SinForm.name: SinForm,
    SqrtRatioForm.name: SqrtRatioForm,
}

KINDS = ("quadratic", "polytopic", "general")


@dataclass
class CostModel:
    """A catalog form plus the curvature metadata the LMIs consume.

    ``kind`` selects how the synthesis treats the agent: ``quadratic`` (constant
    Hessian), ``polytopic`` (Hessian in the convex hull of ``vertices``) or
    ``general`` (only the bounds ``mu``/``ell`` are used).
    """

    form: Form
    kind: str
    mu: float
    ell: float
    vertices: list = field(default_factory=list)
    curvature_source: str = "analytic"  # analytic | user | estimated
    box: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.form.dim

    def value(self, x):
        return self.form.value(x)

    def gradient(self, x):
        g = np.asarray(self.form.gradient(x), dtype=float).reshape(self.dim)
        if not np.all(np.isfinite(g)):
            raise EvaluatorFailure(f"non-finite gradient for {self.form.name} at {x}")
        return g

    def hessian(self, x):
        H = np.asarray(self.form.hessian(x), dtype=float).reshape(self.dim, self.dim)
        if not np.all(np.isfinite(H)):
            raise EvaluatorFailure(f"non-finite Hessian for {self.form.name} at {x}")
        return H


def make_cost(form: Form, kind: str | None = None, mu=None, ell=None, vertices=None, box=None) -> CostModel:
    """Wrap a form, filling curvature data from the form's closed-form bounds.

    Explicit ``mu``/``ell`` override the analytic values. Without analytic bounds
    a ``box`` is required and the bounds are estimated by :func:`hessian_range`.
    """
    if kind is None:
        kind = "quadratic" if isinstance(form, QuadraticForm) else "polytopic"
    if kind not in KINDS:
        raise ValueError(f"unknown cost kind {kind!r}")
    source = "analytic"
    bounds = form.curvature_bounds()
    if mu is not None or ell is not None:
        if mu is None or ell is None:
            raise ValueError("mu and ell must be overridden together")
        bounds, source = (float(mu), float(ell)), "user"
    elif bounds is None:
        if box is None:
            raise ValueError(f"{form.name}: no analytic curvature bounds, a box is required")
        lo, hi = hessian_range(form, box)
        bounds = (float(np.linalg.eigvalsh(lo)[0]), float(np.linalg.eigvalsh(hi)[-1]))
        source = "estimated"
    mu_, ell_ = bounds
    if kind == "polytopic" and not vertices:
        if form.dim != 1:
            raise ValueError("polytopic costs with dim > 1 need explicit vertex Hessians")
        vertices = [np.array([[mu_]]), np.array([[ell_]])]
    vertices = [np.atleast_2d(np.asarray(v, dtype=float)) for v in (vertices or [])]
    return CostModel(form, kind, float(mu_), float(ell_), vertices, source,
                     None if box is None else np.asarray(box, dtype=float))


# ---------------------------------------------------------------------------
# problem


@dataclass
class Problem:
    n_dims: list[int]
    m_dims: list[int]
    A: np.ndarray
    b: np.ndarray
    costs: list[CostModel]
    name: str = "problem"

    def __post_init__(self):
        self.n_dims = [int(v) for v in self.n_dims]
        self.m_dims = [int(v) for v in self.m_dims]
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.x_off = np.concatenate([[0], np.cumsum(self.n_dims)]).astype(int)
        self.l_off = np.concatenate([[0], np.cumsum(self.m_dims)]).astype(int)

    @property
    def N(self) -> int:
        return len(self.n_dims)

    @property
    def M(self) -> int:
        return sum(1 for m in self.m_dims if m > 0)

    @property
    def n(self) -> int:
        return int(sum(self.n_dims))

    @property
    def m(self) -> int:
        return int(sum(self.m_dims))

    def xs(self, i: int) -> slice:
        return slice(self.x_off[i], self.x_off[i + 1])

    def ls(self, i: int) -> slice:
        return slice(self.l_off[i], self.l_off[i + 1])

    def block(self, i: int, j: int) -> np.ndarray:
        """A_ij: rows of agent i's dual block, columns of agent j's primal block."""
        return self.A[self.ls(i), self.xs(j)]

    def b_block(self, i: int) -> np.ndarray:
        return self.b[self.ls(i)]

    def value(self, x) -> float:
        return sum(c.value(x[self.xs(i)]) for i, c in enumerate(self.costs))

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([c.gradient(x[self.xs(i)]) for i, c in enumerate(self.costs)])

    def hessian(self, x) -> np.ndarray:
        H = np.zeros((self.n, self.n))
        for i, c in enumerate(self.costs):
            s = self.xs(i)
            H[s, s] = c.hessian(x[s])
        return H

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(problem_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


def validate_problem(p: Problem) -> list[str]:
    """Every violated structural or curvature assumption, as readable text."""
    out = []
    N = len(p.n_dims)
    if N < 2:
        out.append(f"need at least 2 agents, got {N}")
    if len(p.m_dims) != N:
        out.append(f"m_dims has length {len(p.m_dims)}, expected {N}")
        return out
    if len(p.costs) != N:
        out.append(f"{len(p.costs)} cost models for {N} agents")
    if any(v < 1 for v in p.n_dims):
        out.append("every agent needs a primal dimension >= 1")
    if any(v < 0 for v in p.m_dims):
        out.append("dual dimensions must be non-negative")
    M = p.M
    if M < 1:
        out.append("at least one agent must hold a dual block")
    if any(v > 0 for v in p.m_dims[M:]):
        out.append("dual blocks must belong to the first M agents")
    n, m = p.n, p.m
    if p.A.shape != (m, n):
        out.append(f"A has shape {p.A.shape}, block dimensions require {(m, n)}")
        return out
    if p.b.shape != (m,):
        out.append(f"b has length {p.b.size}, expected {m}")
    if not m < n:
        out.append(f"need m < n, got m={m}, n={n}")
    if m and np.linalg.matrix_rank(p.A) < m:
        out.append(f"A is rank deficient (rank {np.linalg.matrix_rank(p.A)} < m={m})")
    for i, c in enumerate(p.costs):
        tag = f"agent {i + 1}"
        if c.dim != p.n_dims[i]:
            out.append(f"{tag}: cost dimension {c.dim} != n_i {p.n_dims[i]}")
            continue
        if not c.mu > 0:
            out.append(f"{tag}: mu must be positive (got {c.mu})")
        if c.ell < c.mu:
            out.append(f"{tag}: ell {c.ell} < mu {c.mu}")
        tol = 1e-9 * max(1.0, abs(c.ell))
        if c.kind == "quadratic":
            if not isinstance(c.form, QuadraticForm):
                out.append(f"{tag}: kind quadratic needs a quadratic form")
            else:
                ev = np.linalg.eigvalsh(c.form.H)
                if ev[0] < c.mu - tol or ev[-1] > c.ell + tol:
                    out.append(f"{tag}: Hessian spectrum [{ev[0]:.6g}, {ev[-1]:.6g}] outside [mu, ell]")
        if c.kind == "polytopic":
            if len(c.vertices) < 2:
                out.append(f"{tag}: polytopic cost needs at least 2 vertex Hessians")
            for v in c.vertices:
                ev = np.linalg.eigvalsh(0.5 * (v + v.T))
                if ev[0] < c.mu - tol or ev[-1] > c.ell + tol:
                    out.append(f"{tag}: vertex Hessian spectrum outside [mu, ell]")
    return out


def problem_violations_raise(p: Problem):
    v = validate_problem(p)
    if v:
        raise ProblemFormatError("; ".join(v))


# ---------------------------------------------------------------------------
# KKT oracle


@dataclass
class KktPoint:
    x_star: np.ndarray
    lambda_star: np.ndarray
    stationarity_residual: float
    feasibility_residual: float
    iterations: int = 0


def kkt_residual(p: Problem, x, lam):
    return np.concatenate([p.gradient(x) + p.A.T @ lam, p.A @ x - p.b])


def solve_kkt(p: Problem, tol: float = 1e-10, max_iter: int = 50, x0=None, lam0=None) -> KktPoint:
    """Damped Newton on the KKT system with Armijo backtracking on ||r||^2."""
    n, m = p.n, p.m
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=float)
    r = kkt_residual(p, x, lam)
    it = 0
    while np.linalg.norm(r[:n]) > tol or np.linalg.norm(r[n:]) > tol:
        if it >= max_iter:
            raise NonConvergence(it, float(np.linalg.norm(r)))
        it += 1
        J = np.block([[p.hessian(x), p.A.T], [p.A, np.zeros((m, m))]])
        step = np.linalg.solve(J, -r)
        phi0 = r @ r
        alpha = 1.0
        while True:
            xn, ln = x + alpha * step[:n], lam + alpha * step[n:]
            rn = kkt_residual(p, xn, ln)
            if rn @ rn <= (1.0 - 1e-4 * alpha) * phi0 or alpha < 1e-10:
                break
            alpha *= 0.5
        x, lam, r = xn, ln, rn
    return KktPoint(x, lam, float(np.linalg.norm(r[:n])), float(np.linalg.norm(r[n:])), it)


# ---------------------------------------------------------------------------
# curvature estimation


def _grid(box, samples):
    box = np.atleast_2d(np.asarray(box, dtype=float))
    dim = box.shape[0]
    if dim <= 3:
        axes = [np.linspace(lo, hi, samples) for lo, hi in box]
        return np.array(list(itertools.product(*axes)))
    rng = np.random.default_rng(0)
    pts = rng.uniform(box[:, 0], box[:, 1], size=(samples**2, dim))
    return np.vstack([box[:, 0], box[:, 1], pts])


def hessian_range_from(form, box, samples: int = 2001):
    lo = hi = None
    for pt in _grid(box, samples):
        H = np.asarray(form.hessian(pt), dtype=float)
        if not np.all(np.isfinite(H)):
            raise EvaluatorFailure(f"non-finite Hessian at {pt}")
        lo = H if lo is None else np.minimum(lo, H)
        hi = H if hi is None else np.maximum(hi, H)
    return lo, hi


def hessian_range(cost, box, samples: int = 2001, widen: float = 0.05):
    """Entry-wise Hessian min/max over a sample grid of ``box``.

    The range is pushed outwards by ``widen`` times its width on each side,
    which leaves constant Hessians untouched.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    form = cost.form if isinstance(cost, CostModel) else cost
    lo, hi = hessian_range_from(form, box, samples)
    pad = widen * (hi - lo)
    return lo - pad, hi + pad


# ---------------------------------------------------------------------------
# JSON


_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["agents", "A", "b"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "A": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "b": {"type": "array", "items": {"type": "number"}},
        "agents": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["n", "m", "cost"],
                "properties": {
                    "n": {"type": "integer", "minimum": 1},
                    "m": {"type": "integer", "minimum": 0},
                    "mu": {"type": "number"},
                    "ell": {"type": "number"},
                    "box": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                      "minItems": 2, "maxItems": 2}},
                    "vertices": {"type": "array"},
                    "cost": {
                        "type": "object",
                        "required": ["form"],
                        "properties": {
                            "form": {"enum": sorted(CATALOG)},
                            "class": {"enum": list(KINDS)},
                        },
                    },
                },
            },
        },
    },
}


def problem_from_dict(doc: dict) -> Problem:
    import jsonschema

    try:
        jsonschema.validate(doc, _SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(s) for s in e.absolute_path) or "<root>"
        raise ProblemFormatError(f"schema error at {where}: {e.message}") from None
    costs = []
    for k, ag in enumerate(doc["agents"]):
        spec = dict(ag["cost"])
        form_name = spec.pop("form")
        kind = spec.pop("class", None)
        try:
            form = CATALOG[form_name](**spec)
        except TypeError as e:
            raise ProblemFormatError(f"agents/{k}/cost: {e}") from None
        if form.dim != ag["n"]:
            raise ProblemFormatError(f"agents/{k}: cost dimension {form.dim} != n {ag['n']}")
        costs.append(make_cost(form, kind, ag.get("mu"), ag.get("ell"), ag.get("vertices"), ag.get("box")))
    A = np.array(doc["A"], dtype=float)
    return Problem([a["n"] for a in doc["agents"]], [a["m"] for a in doc["agents"]],
                   A.reshape(len(doc["A"]), -1) if A.size else np.zeros((0, 0)), doc["b"], costs,
                   doc.get("name", "problem"))


def problem_to_dict(p: Problem) -> dict:
    agents = []
    for i, c in enumerate(p.costs):
        ag = {"n": p.n_dims[i], "m": p.m_dims[i],
              "cost": {"form": c.form.name, "class": c.kind, **c.form.params()}}
        if c.curvature_source == "user":
            ag["mu"], ag["ell"] = c.mu, c.ell
        if c.kind == "polytopic" and c.dim > 1:
            ag["vertices"] = [v.tolist() for v in c.vertices]
        if c.box is not None:
            ag["box"] = c.box.tolist()
        agents.append(ag)
    return {"format_version": FORMAT_VERSION, "name": p.name, "agents": agents,
            "A": p.A.tolist(), "b": p.b.tolist()}


def load_problem(path) -> Problem:
    """Read a problem JSON document. ``paper10`` names the bundled example."""
    path = Path(path)
    if str(path) == "paper10" or (not path.exists() and path.name == "paper10.json"):
        path = Path(__file__).parent / "data" / "paper10.json"
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProblemFormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return problem_from_dict(doc)


def chain_problem(costs: Sequence[CostModel], name="chain") -> Problem:
    """Consensus along a path: x_i - x_{i+1} = 0, the last agent without a dual."""
    N = len(costs)
    A = np.zeros((N - 1, N))
    for i in range(N - 1):
        A[i, i], A[i, i + 1] = 1.0, -1.0
    return Problem([1] * N, [1] * (N - 1) + [0], A, np.zeros(N - 1), list(costs), name)


def paper10() -> Problem:
    return load_problem("paper10")


def sampling_box(p: Problem, x_star, radius: float = 10.0) -> np.ndarray:
    """Per-coordinate (lo, hi): the declared agent boxes, else ``x* +- radius``."""
    x_star = np.asarray(x_star, dtype=float)
    box = np.column_stack([x_star - radius, x_star + radius])
    for i, c in enumerate(p.costs):
        if c.box is not None:
            box[p.xs(i)] = np.atleast_2d(c.box)
    return box
