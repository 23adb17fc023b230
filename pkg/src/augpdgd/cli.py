"""Command-line entry point: ``augpdgd {synthesize,madub,simulate,verify}``.

Every run writes into one output directory: ``config.json`` (the resolved
arguments), the result files and ``run.log``. JSON and CSV results carry no
timestamps or wall times, so identical runs give identical bytes; timing goes
to the log only.

Exit codes: 0 success or feasible, 2 certified negative, 1 fault.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, lmi
from .problem import FORMAT_VERSION, ProblemFormatError, load_problem, sampling_box, solve_kkt, validate_problem
from .simulate import (DelaySignal, Unsupported, classify_stability, evaluate_lkf, integrate, lkf_decrease,
                       parse_delay, summary, summary_json)
from .structure import layout_of
from .synthesis import Certificate, Infeasible, NotBracketed, SingularP2, madub, synthesize, system_for, \
    verify_certificate

OK, FAULT, NEGATIVE = 0, 1, 2
log = logging.getLogger("augpdgd")


class ConfigError(ValueError):
    pass


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _positive(name):
    def conv(s):
        v = float(s)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {s}")
        return v
    return conv


def _nonneg(name):
    def conv(s):
        v = float(s)
        if not v >= 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {s}")
        return v
    return conv


def _rate(s):
    v = float(s)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"d must lie in [0, 1], got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="augpdgd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("problem", help="problem JSON (or 'paper10' for the bundled example)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default runs/<command>-<hash>)")
        p.add_argument("--quiet", action="store_true")

    s = sub.add_parser("synthesize", help="solve the vertex conditions for one delay bound")
    common(s)
    s.add_argument("--eps", type=_positive("eps"), default=1.5)
    s.add_argument("--h", type=_nonneg("h"), required=True)
    s.add_argument("--d", type=_rate, default=0.1)
    s.add_argument("--alpha", type=_nonneg("alpha"), nargs=2, default=None, metavar=("A1", "A2"),
                   help="also minimize a1*kappa_X + a2*kappa_P")
    s.add_argument("--tie", action="store_true", help="share R, S, S12, Q across delay edges")
    s.add_argument("--delta", type=_positive("delta"), default=1e-6)

    m = sub.add_parser("madub", help="largest certified unified delay bound by bisection")
    common(m)
    g = m.add_mutually_exclusive_group()
    g.add_argument("--eps", type=_positive("eps"), default=None)
    g.add_argument("--sweep-eps", type=_positive("eps"), nargs="+", default=None)
    m.add_argument("--d", type=_rate, default=0.1)
    m.add_argument("--h-lo", type=_nonneg("h_lo"), default=0.0)
    m.add_argument("--h-hi", type=_positive("h_hi"), default=2.0)
    m.add_argument("--tol", type=_positive("tol"), default=1e-3)
    m.add_argument("--alpha", type=_nonneg("alpha"), nargs=2, default=[1.0, 1.0], metavar=("A1", "A2"))
    m.add_argument("--no-gain-size", action="store_true", help="skip the gain-size program at h_bar")
    m.add_argument("--tie", action="store_true")
    m.add_argument("--delta", type=_positive("delta"), default=1e-6)

    r = sub.add_parser("simulate", help="integrate the delayed standard or augmented dynamics")
    common(r)
    r.add_argument("--dynamics", choices=["standard", "augmented"], default="standard")
    r.add_argument("--cert", type=Path, default=None, help="certificate JSON providing the gain")
    r.add_argument("--delay", action="append", default=None,
                   help="delay signal, e.g. const:0.2, sin:h=1,d=0.1, saw:h=0.5,period=1, rand:h=0.5,dwell=0.2,seed=1;"
                        " repeat once per delay edge")
    r.add_argument("--T", type=_positive("T"), default=1500.0)
    r.add_argument("--dt", type=_positive("dt"), default=1e-3)
    r.add_argument("--save-dt", type=_positive("save_dt"), default=0.1)
    r.add_argument("--ic", choices=["zero", "random", "kkt"], default="zero")
    r.add_argument("--ic-scale", type=_positive("ic_scale"), default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--tol", type=_positive("tol"), default=1e-3, help="relative tail tolerance for Converged")
    r.add_argument("--window", type=_positive("window"), default=0.2)

    v = sub.add_parser("verify", help="recheck a certificate")
    common(v)
    v.add_argument("cert", type=Path)
    v.add_argument("--samples", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--T", type=_positive("T"), default=100.0)
    v.add_argument("--dt", type=_positive("dt"), default=1e-3)
    v.add_argument("--check-tol", type=_positive("check_tol"), default=1e-8)
    return ap


def _config(args) -> dict:
    cfg = {}
    for k, val in sorted(vars(args).items()):
        if k in ("out", "quiet"):
            continue
        cfg[k] = str(val) if isinstance(val, Path) else val
    cfg["format_version"] = FORMAT_VERSION
    cfg["version"] = __version__
    return cfg


def _outdir(args, cfg) -> Path:
    if args.out is not None:
        out = args.out
    else:
        tag = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]
        out = Path("runs") / f"{args.command}-{tag}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_log(out: Path, quiet: bool):
    for hd in list(log.handlers):
        hd.close()
        log.removeHandler(hd)
    log.setLevel(logging.INFO)
    fh = logging.FileHandler(out / "run.log", mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    if not quiet:
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(sh)


def _load(path):
    p = load_problem(path)
    bad = validate_problem(p)
    if bad:
        raise ConfigError("invalid problem: " + "; ".join(bad))
    return p


# ---------------------------------------------------------------------------


def cmd_synthesize(args, out: Path) -> int:
    p = _load(args.problem)
    sys_ = system_for(p, args.h, args.d)
    try:
        cert = synthesize(sys_, args.h, args.d, eps=args.eps, minimize_gain=args.alpha, tie=args.tie,
                          delta=args.delta)
    except Infeasible as exc:
        rec = {"format_version": FORMAT_VERSION, "kind": "infeasible", "eps": args.eps, "h": args.h, "d": args.d,
               "status": exc.solution.status if exc.solution else None,
               "slack": exc.solution.slack if exc.solution else None,
               "hint": f"bracket the bound with: augpdgd madub {args.problem} --eps {args.eps} --d {args.d} "
                       f"--h-lo 0 --h-hi {args.h}"}
        _dump(out / "infeasible.json", rec)
        log.info("Infeasible at h=%g eps=%g: %s", args.h, args.eps, rec["hint"])
        return NEGATIVE
    cert.save(out / "certificate.json")
    _write_margins(out / "margins.csv", cert)
    log.info("%s at h=%g eps=%g, min margin %.3e", cert.status, args.h, args.eps, cert.min_margin)
    return OK


def _write_margins(path, cert):
    lines = ["block,margin"] + [f"{n},{m:.12g}" for n, m in zip(cert.block_names, cert.margins)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_madub(args, out: Path) -> int:
    p = _load(args.problem)
    eps_list = args.sweep_eps or [args.eps if args.eps is not None else 1.5]
    alpha = None if args.no_gain_size else tuple(args.alpha)
    rows = []
    negative = False
    for eps in eps_list:
        sys_ = system_for(p, 0.0, args.d)
        t0 = time.perf_counter()
        try:
            res = madub(sys_, d=args.d, eps=eps, h_lo=args.h_lo, h_hi=args.h_hi, tol=args.tol, tie=args.tie,
                        minimize_gain=alpha, delta=args.delta)
        except NotBracketed as exc:
            log.info("eps=%g: %s", eps, exc)
            rows.append({"eps": eps, "h_bar": None, "status": "NotBracketed", "message": str(exc),
                         "suggestion": exc.suggestion})
            negative = True
            continue
        log.info("eps=%g: h_bar=%.3f (%d probes, %.1f s)", eps, res.h_bar, len(res.trace), time.perf_counter() - t0)
        tag = f"eps{eps:g}"
        res.certificate.save(out / f"certificate_{tag}.json")
        res.write_trace_csv(out / f"trace_{tag}.csv")
        _dump(out / f"madub_{tag}.json", res.to_dict())
        rows.append({"eps": eps, "h_bar": res.h_bar, "status": res.certificate.status, "monotone": res.monotone(),
                     "certificate": f"certificate_{tag}.json", "gain_norm": float(np.linalg.norm(res.certificate.gain, 2)),
                     "notes": res.notes})
    _dump(out / "table.json", {"format_version": FORMAT_VERSION, "kind": "madub_table", "d": args.d,
                               "tol": args.tol, "rows": rows})
    with open(out / "table.csv", "w") as f:
        f.write("eps,h_bar,status\n")
        for r in rows:
            f.write(f"{r['eps']:g},{'' if r['h_bar'] is None else format(r['h_bar'], '.3f')},{r['status']}\n")
    best = max((r["h_bar"] for r in rows if r["h_bar"] is not None), default=None)
    log.info("best h_bar %s", best)
    return NEGATIVE if negative else OK


def _initial_state(p, layout, kkt, how, scale, seed):
    zs = layout.pack(kkt.x_star, kkt.lambda_star)
    if how == "kkt":
        return zs.copy()
    if how == "zero":
        return np.zeros_like(zs)
    return zs + scale * np.random.default_rng(seed).standard_normal(zs.shape)


def cmd_simulate(args, out: Path) -> int:
    p = _load(args.problem)
    cert = None
    if args.dynamics == "augmented":
        if args.cert is None:
            raise ConfigError("gain required: --dynamics augmented needs --cert")
        cert = Certificate.load(args.cert)
    kkt = solve_kkt(p)
    L = layout_of(p)
    h = cert.h[0] if cert else 0.0
    d = cert.d[0] if cert else 0.0
    sys_ = system_for(p, h, d)
    specs = args.delay or ["const:0"]
    delays = [parse_delay(s) for s in specs]
    if len(delays) == 1:
        delays = delays * sys_.rho
    if len(delays) != sys_.rho:
        raise ConfigError(f"{len(delays)} delay signals for {sys_.rho} delay edges")
    if cert is not None:
        for sig in delays:
            if sig.fast_varying and max(cert.d) < 1:
                log.warning("fast-varying delay against a certificate with d=%g < 1", max(cert.d))
    z0 = _initial_state(p, L, kkt, args.ic, args.ic_scale, args.seed)
    zs = L.pack(kkt.x_star, kkt.lambda_star)
    t0 = time.perf_counter()
    traj = integrate(sys_, delays, z0, T=args.T, dt=args.dt, gain=None if cert is None else cert.gain,
                     augmented=cert is not None, save_dt=args.save_dt, z_star=zs)
    log.info("integrated %g s in %.1f s", args.T, time.perf_counter() - t0)
    V = None
    extra = {"problem_hash": p.fingerprint(), "ic": args.ic, "seed": args.seed}
    if cert is not None:
        try:
            V = evaluate_lkf(traj, cert.vars, cert.h)
            extra["lkf"] = lkf_decrease(V)
        except Unsupported as exc:
            extra["lkf"] = {"unsupported": str(exc)}
    labels = classify_stability(traj, window=args.window, tol=args.tol)
    traj.write_csv(out / "trajectory.csv", L, V=V)
    s = summary(traj, labels, extra)
    (out / "summary.json").write_text(summary_json(s) + "\n")
    log.info("label %s", s["label"])
    return OK


def cmd_verify(args, out: Path) -> int:
    p = _load(args.problem)
    cert = Certificate.load(args.cert)
    report = run_verification(p, cert, samples=args.samples, seed=args.seed, T=args.T, dt=args.dt,
                              check_tol=args.check_tol)
    _dump(out / "verification.json", report)
    log.info("verification %s", "passed" if report["passed"] else "FAILED")
    for k, v in report["checks"].items():
        log.info("  %-12s %s", k, "ok" if v else "fail")
    return OK if report["passed"] else NEGATIVE


def run_verification(p, cert: Certificate, samples=50, seed=0, T=100.0, dt=1e-3, check_tol=1e-8) -> dict:
    """Margins, gain recovery, sampled Phi negativity and LKF decrease."""
    kkt = solve_kkt(p)
    L = layout_of(p)
    sys_ = system_for(p, cert.h[0], cert.d[0])
    base = verify_certificate(sys_, cert, check_tol)
    checks = {"provenance": base["provenance"], "margins": base["margins_ok"] and base["margins_match"],
              "variables": base["vars_match"], "gain": base["gain_ok"]}
    rng = np.random.default_rng(seed)
    box = sampling_box(p, kkt.x_star)
    worst = -np.inf
    for _ in range(samples):
        x = rng.uniform(box[:, 0], box[:, 1])
        worst = max(worst, float(np.linalg.eigvalsh(lmi.evaluate_phi_at(sys_, cert.vars, x)).max()))
    checks["phi"] = bool(worst < -cert.delta / 2)
    zs = L.pack(kkt.x_star, kkt.lambda_star)
    z0 = zs + rng.standard_normal(zs.shape)
    sig = DelaySignal.sawtooth(cert.h[0], 1.0) if cert.d[0] >= 1 else DelaySignal.sinusoid(cert.h[0], cert.d[0])
    traj = integrate(sys_, sig, z0, T=T, dt=dt, gain=cert.gain, z_star=zs, save_dt=max(dt, 0.01))
    dec = lkf_decrease(evaluate_lkf(traj, cert.vars, cert.h)) if not traj.diverged else {"ok": False}
    checks["lkf"] = bool(dec["ok"])
    checks = {k: bool(v) for k, v in checks.items()}
    return {"format_version": FORMAT_VERSION, "kind": "verification", "passed": all(checks.values()),
            "checks": checks, "min_margin": base["min_margin"], "gain_residual": base["gain_residual"],
            "phi_max_eig": worst, "phi_threshold": -cert.delta / 2, "lkf": dec, "samples": samples, "seed": seed}


COMMANDS = {"synthesize": cmd_synthesize, "madub": cmd_madub, "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return OK if exc.code == 0 else FAULT
    cfg = _config(args)
    try:
        out = _outdir(args, cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAULT
    _setup_log(out, args.quiet)
    _dump(out / "config.json", cfg)
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, ProblemFormatError, FileNotFoundError, ValueError, SingularP2) as exc:
        log.error("error: %s", exc)
        return FAULT


if __name__ == "__main__":
    sys.exit(main())
