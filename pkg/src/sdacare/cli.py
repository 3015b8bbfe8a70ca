"""Command line front end: ``solve``, ``bench`` and ``check``.

Exit codes: 0 converged or all checks passed, 2 iteration limit, 3 diverged,
4 bad input, 5 numerical failure (including failed checks).
"""
import argparse
import csv
import json
import os
import sys
import time
import warnings
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import __version__
from .care_core import CareProblem, build_shifted_operator, validate_problem
from .diagnostics import (convergence_order, monotonicity_check,
                          residual_dual_lowrank, residual_lowrank,
                          truncation_bound_check_j1, truncation_bound_check_js)
from .dsda_t import LowRankGram, SolverConfig, solve
from .errors import (CheckFailed, DimensionMismatch, InputError,
                     NumericalError, ParseError, SdaCareError)
from .kernels import extend_basis
from .reference import (dense_dsda_t_trace, dsda_evaluate, dsda_kernel_init,
                        dsda_kernel_step, random_stable_problem, sda_seed,
                        sda_step, SdaState)

SCHEMA = "sdacare.run/1"
BENCH_SCHEMA = "sdacare.bench/1"
GENERATOR_VERSION = 1

EXIT = {"Converged": 0, "AllPass": 0, "MaxIterations": 2, "Diverged": 3,
        "NearSingularPencil": 5}
EXIT_INPUT = 4
EXIT_NUMERICAL = 5

CSV_COLUMNS = ["j", "rho_x", "rho_y", "rank_x", "rank_y", "seconds", "solves"]


@dataclass
class RunConfig:
    A: str = None
    B: str = None
    C: str = None
    R: str = None
    gamma: float = 1e-6
    trunc_tol: object = 1e-15
    trunc_tol_g: object = None
    res_tol: float = 1e-13
    max_iter: int = 20
    dense_threshold: int = 500
    compute_dual: bool = True
    out: str = None
    seed: int = 0
    n: int = 20
    mode: str = "solve"
    spec: str = None
    fault: str = None

    def solver_config(self):
        return SolverConfig(gamma=self.gamma, trunc_tol=self.trunc_tol,
                            trunc_tol_g=self.trunc_tol_g, res_tol=self.res_tol,
                            max_iter=self.max_iter, dense_threshold=self.dense_threshold,
                            compute_dual=self.compute_dual)

    def echo(self):
        """Normalized config: numbers as floats/ints, tolerance schedules as lists."""
        d = asdict(self)
        for k in ("trunc_tol", "trunc_tol_g"):
            v = d[k]
            if v is not None:
                v = np.atleast_1d(np.asarray(v, dtype=float)).tolist()
                d[k] = v[0] if len(v) == 1 else v
        return d


@dataclass
class RunArtifact:
    out: Path
    metadata: dict
    exit_code: int
    files: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# input
# --------------------------------------------------------------------------

def _read_mtx(path, name):
    if path is None:
        raise ParseError(f"no file given for {name}")
    try:
        info = scipy.io.mminfo(path)
        M = scipy.io.mmread(path)
    except FileNotFoundError:
        raise ParseError(f"{name}: file {path} not found") from None
    except Exception as exc:  # scipy raises ValueError and friends for bad files
        raise ParseError(f"{name}: cannot parse {path} as Matrix Market ({exc})") from exc
    if info[4] not in ("real", "integer"):
        raise ParseError(f"{name}: field '{info[4]}' is not real")
    return M, info[5]


def load_problem(cfg):
    """Read ``A``, ``B``, ``C`` (and optionally ``R``) Matrix Market files.

    Symmetric storage is expanded by the reader. A row vector ``B`` or a
    column vector ``C`` is transposed to the expected orientation.

    Returns
    -------
    problem : CareProblem
    info : dict
        Storage notes (symmetry of each file, applied transposes).
    """
    A, symA = _read_mtx(cfg.A, "A")
    B, symB = _read_mtx(cfg.B, "B")
    C, symC = _read_mtx(cfg.C, "C")
    info = {"symmetry": {"A": symA, "B": symB, "C": symC}, "transposed": []}
    A = sp.csr_array(A) if sp.issparse(A) else np.asarray(A, dtype=float)
    B = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)
    C = C.toarray() if sp.issparse(C) else np.asarray(C, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionMismatch(f"A is {A.shape}, expected square")
    if B.shape[0] != n and B.shape[1] == n:
        B = B.T
        info["transposed"].append("B")
    if C.shape[1] != n and C.shape[0] == n:
        C = C.T
        info["transposed"].append("C")
    R = None
    if cfg.R is not None:
        R, symR = _read_mtx(cfg.R, "R")
        R = R.toarray() if sp.issparse(R) else np.asarray(R, dtype=float)
        info["symmetry"]["R"] = symR
    if not sp.issparse(A) and n > cfg.dense_threshold:
        A = sp.csr_array(A)
    return CareProblem(A, B, C, R=R, gamma=cfg.gamma), info


# --------------------------------------------------------------------------
# solve
# --------------------------------------------------------------------------

def _write_factor(out, stem, X):
    qpath, dpath = out / f"{stem}_Q.mtx", out / f"{stem}_d.txt"
    scipy.io.mmwrite(str(qpath), X.Q, precision=17)
    np.savetxt(dpath, X.d, fmt="%.17e")
    return {f"{stem}_Q": qpath.name, f"{stem}_d": dpath.name}


def read_factor(out, stem, scale):
    """Reload a factor written by ``solve``."""
    out = Path(out)
    Q = np.asarray(scipy.io.mmread(str(out / f"{stem}_Q.mtx")), dtype=float)
    d = np.atleast_1d(np.loadtxt(out / f"{stem}_d.txt"))
    return LowRankGram(Q=Q, d=d, scale=scale)


def _write_csv(path, iterations):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for it in iterations:
            w.writerow([it.j, repr(float(it.rho_x)), repr(float(it.rho_y)), it.rank_x,
                        it.rank_y, f"{it.seconds:.6f}", it.solves])


def _error_metadata(cfg, exc):
    return {"schema": SCHEMA, "version": __version__, "status": "error",
            "reason": exc.reason, "message": str(exc), "config": cfg.echo()}


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def run_solve(cfg, problem=None):
    """Solve one problem and write factors, metadata and the iteration CSV."""
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    try:
        if problem is None:
            p, info = load_problem(cfg)
        else:
            p, info = problem, {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = validate_problem(p)
        t0 = time.perf_counter()
        X, Y, rec = solve(p, cfg.solver_config())
        elapsed = time.perf_counter() - t0
    except SdaCareError as exc:
        meta = _error_metadata(cfg, exc)
        _dump(out / "metadata.json", meta)
        code = EXIT_INPUT if isinstance(exc, InputError) else EXIT_NUMERICAL
        return RunArtifact(out=out, metadata=meta, exit_code=code)
    files = _write_factor(out, "X", X)
    if Y is not None:
        files.update(_write_factor(out, "Y", Y))
    _write_csv(out / "iterations.csv", rec.iterations)
    files["iterations"] = "iterations.csv"
    last = rec.iterations[-1]
    meta = {
        "schema": SCHEMA, "version": __version__, "status": "ok",
        "termination": rec.termination, "message": rec.message,
        "n": p.n, "m": p.m, "l": p.l, "gamma": rec.gamma,
        "iterations": rec.n_iter, "rho_x": last.rho_x, "rho_y": last.rho_y,
        "rank_x": last.rank_x, "rank_y": last.rank_y, "scale": 2 * rec.gamma,
        "seconds": elapsed, "solves": int(sum(it.solves for it in rec.iterations)),
        "history": [asdict(it) for it in rec.iterations],
        "qr_rank_scale": rec.qr_rank_scale, "drop_tol": rec.drop_tol,
        "input": info, "warnings": report.warnings, "files": files,
        "config": cfg.echo(),
    }
    _dump(out / "metadata.json", meta)
    return RunArtifact(out=out, metadata=meta, exit_code=EXIT[rec.termination], files=files)


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def graded_schedule(j, length=20):
    """Per-iteration tolerances ``10^{-(2j+4)} * max(10^{-i}, 10^{-15})``, ``i = 1..length``."""
    i = np.arange(1, length + 1)
    return (10.0 ** (-(2 * j + 4)) * np.maximum(10.0 ** (-i), 1e-15)).tolist()


def _bench_problem(spec, base):
    pspec = spec.get("problem", {})
    if "generator" in pspec:
        gen = pspec["generator"]
        if gen != "stable":
            raise ParseError(f"unknown generator '{gen}'")
        p = random_stable_problem(pspec.get("n", 200), pspec.get("m", 1), pspec.get("l", 1),
                                  seed=pspec.get("seed", 0), gamma=pspec.get("gamma"))
        return p, {"generator": gen, "generator_version": GENERATOR_VERSION, **pspec}
    cfg = RunConfig(**{**asdict(base), **{k: pspec.get(k) for k in ("A", "B", "C", "R")}})
    return load_problem(cfg)


def run_bench(cfg):
    """Sweep truncation schedules on one problem; one output directory per cell.

    The spec is a JSON document::

        {"problem": {"A": ..., "B": ..., "C": ...} | {"generator": "stable", "n": ..., ...},
         "gamma": ..., "res_tol": ..., "max_iter": ...,
         "trunc_tols": [1e-15, [1e-8, 1e-10, ...], ...],
         "graded": [1, 2, 3, 4, 5]}
    """
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    try:
        with open(cfg.spec) as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read bench spec {cfg.spec}: {exc}") from exc
    base = RunConfig(**{**asdict(cfg), **{k: spec[k] for k in
                                          ("gamma", "res_tol", "max_iter", "trunc_tol_g",
                                           "dense_threshold", "compute_dual") if k in spec}})
    p, pinfo = _bench_problem(spec, base)
    if "gamma" in spec:
        p = p.with_gamma(spec["gamma"])
    base.gamma = p.gamma
    cells = [(f"tol{i}", t) for i, t in enumerate(spec.get("trunc_tols", []))]
    cells += [(f"graded_j{j}", graded_schedule(j, base.max_iter)) for j in spec.get("graded", [])]
    if not cells:
        cells = [("default", base.trunc_tol)]
    rows = []
    for name, tol in cells:
        ccfg = RunConfig(**{**asdict(base), "trunc_tol": tol, "out": str(out / name)})
        art = run_solve(ccfg, problem=p)
        md = art.metadata
        if md.get("status") == "ok":
            rows.append({"name": name, "rho_x": md["rho_x"], "rho_y": md["rho_y"],
                         "rank_x": md["rank_x"], "rank_y": md["rank_y"],
                         "iterations": md["iterations"], "etime": md["seconds"],
                         "solves": md["solves"], "termination": md["termination"]})
        else:
            rows.append({"name": name, "rho_x": None, "rho_y": None, "rank_x": None,
                         "rank_y": None, "iterations": None, "etime": None, "solves": None,
                         "termination": md.get("reason")})
    cols = ["name", "rho_x", "rho_y", "rank_x", "rank_y", "iterations", "etime", "solves",
            "termination"]
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    report = {"schema": BENCH_SCHEMA, "version": __version__, "problem": pinfo,
              "gamma": p.gamma, "rows": rows, "config": base.echo()}
    _dump(out / "bench.json", report)
    return report


# --------------------------------------------------------------------------
# check
# --------------------------------------------------------------------------

def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def run_check(cfg):
    """Run the oracle and identity suite on a seeded random instance.

    Returns a dict ``{name: {"ok": bool, "value": float, "limit": float}}``;
    :class:`CheckFailed` is raised by :func:`main` when any entry fails.
    ``cfg.fault = "no-reorth"`` disables the second Gram-Schmidt pass.
    """
    reorth = cfg.fault != "no-reorth"
    results = {}

    def add(name, value, limit, ok=None):
        ok = (value <= limit) if ok is None else ok
        results[name] = {"ok": bool(ok), "value": float(value), "limit": float(limit)}

    n = cfg.n
    if n == 1:
        p = CareProblem([[-1.0]], [[1.0]], [[1.0]], gamma=1.0)
    else:
        p = random_stable_problem(n, min(2, n), min(2, n), seed=cfg.seed)
    op = build_shifted_operator(p)

    # classic SDA against the decoupled recursion
    seed = sda_seed(p, op)
    s = SdaState(seed.A0, seed.G0, seed.H0, 0)
    d = dsda_kernel_init(p, op)
    worst, hist = 0.0, [s.Hk]
    for _ in range(6):
        s = sda_step(s)
        hist.append(s.Hk)
        d = dsda_kernel_step(d, op)
        H, G, A = dsda_evaluate(d, op)
        worst = max(worst, _rel(H, s.Hk), _rel(G, s.Gk), _rel(A, s.Ak))
    add("decoupled_equals_classic", worst, 1e-10)
    add("classic_monotone", 0.0, 0.0, monotonicity_check(hist, tol=1e-12).ok)

    # dense shadow of the truncated solver
    for eps in (0.0, 1e-12, 1e-8, 1e-6):
        tr = dense_dsda_t_trace(p, eps, 5, op=op)
        ident = max(max(t.identity_defect_G, t.identity_defect_H) for t in tr.steps)
        add(f"sigma_identity[eps={eps:g}]", ident, 1e-10)
        lrec = max(max(_rel(t.L_G, t.L_G_direct) if np.linalg.norm(t.L_G_direct) > 0 else 0.0,
                       _rel(t.L_H, t.L_H_direct) if np.linalg.norm(t.L_H_direct) > 0 else 0.0)
                   for t in tr.steps)
        add(f"L_recursion[eps={eps:g}]", lrec, 1e-10)
        b1 = truncation_bound_check_j1(tr)
        add(f"bound_j1[eps={eps:g}]", b1.lhs, b1.rhs, b1.ok)
        for sidx in range(1, tr.k_max):
            bs = truncation_bound_check_js(tr, sidx)
            add(f"bound_js[s={sidx},eps={eps:g}]", bs.lhs, bs.rhs, bs.ok)
        if eps == 0.0:
            d = dsda_kernel_init(p, op)
            worst = 0.0
            for t in tr.steps:
                d = dsda_kernel_step(d, op)
                H, G, _ = dsda_evaluate(d, op)
                worst = max(worst, _rel(t.H, H), _rel(t.G, G))
            add("untruncated_equals_decoupled", worst, 1e-10)

    # full solve: residual, orthonormality, convergence order
    bases = {}

    def keep(j, sG, sH, cp):
        bases["G"], bases["H"] = sG.Q, sH.Q

    X, Y, rec = solve(p, SolverConfig(), callback=keep, reorthogonalize=reorth)
    add("converged_rho_x", rec.rho_x[-1], 1e-13)
    orth = max(np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1])) for Q in bases.values())
    add("basis_orthonormal", orth, 1e-10)
    try:
        order = convergence_order(rec.rho_x, min_points=3)
        add("convergence_order", order, 1.7, order >= 1.7)
    except SdaCareError:
        pass
    # Gram-Schmidt stress case: new columns almost inside the current span
    rng = np.random.default_rng(cfg.seed)
    Qp = np.linalg.qr(rng.standard_normal((200, 20)))[0]
    W = Qp @ rng.standard_normal((20, 10)) + 1e-9 * rng.standard_normal((200, 10))
    ext = extend_basis(Qp, W, reorthogonalize=reorth)
    Qa = np.hstack([Qp, ext.Q_new])
    add("extend_basis_orthonormal", np.linalg.norm(Qa.T @ Qa - np.eye(Qa.shape[1])), 1e-12)
    return results


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _tol_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tolerance list '{text}'") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty tolerance list")
    return vals[0] if len(vals) == 1 else vals


def build_parser():
    ap = argparse.ArgumentParser(prog="sdacare", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="mode", required=True)
    ps = sub.add_parser("solve", help="solve a CARE given as Matrix Market files")
    ps.add_argument("--A", required=True)
    ps.add_argument("--B", required=True)
    ps.add_argument("--C", required=True)
    ps.add_argument("--R")
    ps.add_argument("--gamma", type=float, default=1e-6)
    ps.add_argument("--trunc-tol", type=_tol_list, default=1e-15)
    ps.add_argument("--trunc-tol-g", type=_tol_list)
    ps.add_argument("--res-tol", type=float, default=1e-13)
    ps.add_argument("--max-iter", type=int, default=20)
    ps.add_argument("--no-dual", dest="compute_dual", action="store_false")
    ps.add_argument("--out", required=True)
    pb = sub.add_parser("bench", help="sweep truncation schedules")
    pb.add_argument("--spec", required=True)
    pb.add_argument("--out", required=True)
    pc = sub.add_parser("check", help="run the oracle and identity suite")
    pc.add_argument("--n", type=int, default=20)
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--fault", choices=["no-reorth"])
    return ap


def _threads():
    n = os.environ.get("SDACARE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    kw = {k: v for k, v in vars(args).items() if v is not None}
    cfg = RunConfig(**kw)
    env = os.environ.get("SDACARE_DENSE_THRESHOLD")
    if env:
        cfg.dense_threshold = int(env)
    with _threads():
        try:
            if cfg.mode == "solve":
                art = run_solve(cfg)
                md = art.metadata
                if md["status"] == "ok":
                    print(f"{md['termination']}: rho_x={md['rho_x']:.3e} rho_y={md['rho_y']:.3e} "
                          f"rank_x={md['rank_x']} iterations={md['iterations']}")
                else:
                    print(json.dumps({"reason": md["reason"], "message": md["message"]}),
                          file=sys.stderr)
                return art.exit_code
            if cfg.mode == "bench":
                rep = run_bench(cfg)
                for r in rep["rows"]:
                    print(r)
                return 0
            res = run_check(cfg)
            for name, r in res.items():
                print(f"{'PASS' if r['ok'] else 'FAIL'} {name}: {r['value']:.3e} (limit {r['limit']:.3e})")
            failed = [k for k, r in res.items() if not r["ok"]]
            if failed:
                raise CheckFailed(failed)
            return 0
        except InputError as exc:
            print(json.dumps({"reason": exc.reason, "message": str(exc)}), file=sys.stderr)
            return EXIT_INPUT
        except (NumericalError, CheckFailed) as exc:
            print(json.dumps({"reason": exc.reason, "message": str(exc)}), file=sys.stderr)
            return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
