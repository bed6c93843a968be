"""Command-line front end.

Each subcommand reads JSON inputs, runs one solver and writes CSV/JSON
artifacts plus ``manifest.json`` (file list with SHA-256 hashes, status and
error name) into ``--out``.  Exit codes: 0 success, 2 bad input, 3 solver did
not converge (partial artifacts carry ``"converged": false``), 4 precondition
violated, 1 any other solver error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import CovotError, NoConvergence, PreconditionError
from .flows import (ParticleEnsemble, QuadraticTarget, covariance_moment_flow, decay_report,
                    eks_simulate, ou_contraction_check, variance_moment_flow)
from .measures import EmpiricalMeasure, Gaussian
from .moment_geodesics import shoot_moment_geodesic, solve_diagonal_moments, solve_variance_moments
from .ot_core import gaussian_w2, solve_w2
from .shape_geodesics import (constrained_trajectories, fixed_point_omega,
                              modulated_distance_symmetric)

log = logging.getLogger("covot")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_NOCONV, EXIT_PRECOND = 0, 1, 2, 3, 4


class InputError(Exception):
    """Unparseable or incomplete input."""


# ----------------------------------------------------------------------------
# serialization


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def table_csv(columns: Dict[str, Sequence]) -> str:
    """Render equal-length columns as CSV with full float precision."""
    names = list(columns)
    rows = zip(*[np.asarray(columns[n]).tolist() for n in names])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


class ArtifactWriter:
    """Writes files into one directory and records their hashes."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.files: List[dict] = []

    def write(self, name: str, text: str):
        data = text.encode("utf-8")
        with open(os.path.join(self.out_dir, name), "wb") as fh:
            fh.write(data)
        self.files.append({"path": name, "sha256": hashlib.sha256(data).hexdigest()})

    def manifest(self, command: str, config: dict, status: str, converged: Optional[bool],
                 error: Optional[dict] = None):
        body = {"command": command, "config": config, "status": status, "files": self.files,
                "version": __version__}
        if converged is not None:
            body["converged"] = converged
        if error is not None:
            body["error"] = error
        with open(os.path.join(self.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(dumps_json(body))


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _array(text_or_obj, name: str) -> np.ndarray:
    obj = text_or_obj
    if isinstance(obj, str):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as exc:
            raise InputError(f"--{name} is not valid JSON: {exc}") from exc
    try:
        return np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} is not numeric") from exc


def _measure(path: str) -> EmpiricalMeasure:
    obj = _load_json(path)
    if "points" not in obj:
        raise InputError(f"{path}: missing 'points'")
    return EmpiricalMeasure(obj["points"], obj.get("weights"))


def _param(args, obj: dict, key: str, required: bool = True):
    """Value from ``--key`` if given, else from the input JSON."""
    val = getattr(args, key, None)
    if val is not None:
        return _array(val, key)
    if key in obj:
        return np.asarray(obj[key], dtype=float)
    if required:
        raise InputError(f"missing parameter '{key}'")
    return None


# ----------------------------------------------------------------------------
# commands; each returns (converged flag or None)


def _curve_columns(times, means, covs):
    cols = {"t": times}
    d = means.shape[1]
    for i in range(d):
        cols[f"m{i}"] = means[:, i]
    for i in range(d):
        for j in range(i, d):
            cols[f"C{i}{j}"] = covs[:, i, j]
    return cols


def cmd_moments(args, out: ArtifactWriter):
    obj = _load_json(args.input) if args.input else {}
    m0, m1 = _param(args, obj, "m0"), _param(args, obj, "m1")
    times = np.linspace(0.0, 1.0, args.grid + 1)
    if "sigma0" in obj:
        sol = solve_variance_moments(m0, m1, float(obj["sigma0"]), float(obj["sigma1"]), times=times)
        out.write("moments.json", dumps_json({"kind": "variance", "dist_sq": sol.dist_sq, "beta": sol.beta,
                                             "t0": sol.t0, "converged": True}))
        cols = {"t": sol.times}
        for i in range(sol.means.shape[1]):
            cols[f"m{i}"] = sol.means[:, i]
        cols["sigma"] = sol.sigmas
        out.write("curve.csv", table_csv(cols))
        return True
    C0, C1 = _param(args, obj, "C0"), _param(args, obj, "C1")
    kind = obj.get("kind", "auto")
    curve = None
    if kind in ("auto", "diagonal"):
        try:
            delta = m1 - m0
            nz = np.flatnonzero(np.abs(delta) > 0)
            axis = int(nz[0]) if len(nz) else 0
            if not (np.allclose(C0, np.diag(np.diag(C0))) and np.allclose(C1, np.diag(np.diag(C1)))):
                raise PreconditionError("covariances are not diagonal")
            curve = solve_diagonal_moments(m0, m1, np.diag(C0), np.diag(C1), axis, times=times)
            kind = "diagonal"
        except PreconditionError:
            if kind == "diagonal":
                raise
            curve = None
    converged = True
    if curve is None:
        kind = "shoot"
        try:
            curve = shoot_moment_geodesic(m0, C0, m1, C1, tol=args.tol or 1e-9, N=args.grid)
        except NoConvergence as exc:
            curve = exc.info.get("last")
            converged = False
            if curve is None:
                raise
    out.write("moments.json", dumps_json({"kind": kind, "dist_sq": curve.dist_sq, "converged": converged,
                                         "residual": curve.residual}))
    out.write("curve.csv", table_csv(_curve_columns(curve.times, curve.means, curve.covs)))
    if not converged:
        raise NoConvergence("shooting did not converge", residual=curve.residual)
    return converged


def cmd_shape(args, out: ArtifactWriter):
    mu0, mu1 = _measure(args.mu0), _measure(args.mu1)
    converged = True
    try:
        res = fixed_point_omega(mu0, mu1, tol=args.tol or 1e-10, max_iter=args.max_iter,
                                damping=args.damping, symmetrize=args.symmetrize)
    except NoConvergence as exc:
        res, converged = exc.info["last"], False
    body = res.to_json()
    out.write("omega.json", dumps_json(body))
    s = np.linspace(0.0, 1.0, args.grid + 1)
    fam = constrained_trajectories(res, s)
    d = fam.positions.shape[2]
    rows: Dict[str, list] = {"pair_id": [], "s": []}
    for k in range(d):
        rows[f"x{k}"] = []
    for p in range(fam.positions.shape[1]):
        for i, si in enumerate(s):
            rows["pair_id"].append(p)
            rows["s"].append(float(si))
            for k in range(d):
                rows[f"x{k}"].append(float(fam.positions[i, p, k]))
    rows["mass"] = [float(fam.masses[p]) for p in range(fam.positions.shape[1]) for _ in s]
    out.write("trajectories.csv", table_csv(rows))
    if not converged:
        raise NoConvergence("ω iteration did not converge", residual=res.residual)
    return True


def cmd_split(args, out: ArtifactWriter):
    mu0, mu1 = _measure(args.mu0), _measure(args.mu1)
    total, shape, moment = modulated_distance_symmetric(mu0, mu1, tol=args.tol or 1e-10, N=args.grid)
    out.write("split.json", dumps_json({"total_sq": total, "shape_sq": shape, "moment_sq": moment}))
    return True


def _flow_inputs(args):
    obj = _load_json(args.input) if args.input else {}
    m0, C0 = _param(args, obj, "m0"), np.atleast_2d(_param(args, obj, "C0"))
    x0, B = _param(args, obj, "x0"), np.atleast_2d(_param(args, obj, "B"))
    kind = args.kind or obj.get("kind", "covariance")
    return np.atleast_1d(m0), C0, QuadraticTarget(np.atleast_1d(x0), B), kind


def _run_flow(args):
    m0, C0, target, kind = _flow_inputs(args)
    if kind == "variance":
        return variance_moment_flow(m0, C0, target, T=args.horizon, N=args.grid)
    if kind == "covariance":
        return covariance_moment_flow(m0, C0, target, T=args.horizon, N=args.grid)
    raise InputError(f"unknown flow kind '{kind}'")


def cmd_flow(args, out: ArtifactWriter):
    trace = _run_flow(args)
    rep = decay_report(trace)
    cols = trace.columns()
    for key in ("entropy_bound", "fisher_bound", "w2_bound"):
        if key in rep.table:
            cols[key] = rep.table[key]
    summary = {"kind": trace.kind, "max_deviation": trace.max_deviation, "constants": rep.constants,
               "checks": rep.checks}
    if args.format == "json":
        out.write("flow.json", dumps_json({"columns": cols, "summary": summary}))
    else:
        out.write("flow.csv", table_csv(cols))
        out.write("flow_summary.json", dumps_json(summary))
    return True


def cmd_report(args, out: ArtifactWriter):
    trace = _run_flow(args)
    rep = decay_report(trace)
    body = {"kind": trace.kind, "constants": rep.constants, "checks": rep.checks, "ok": rep.ok,
            "max_deviation": trace.max_deviation}
    if trace.kind == "covariance":
        d = trace.means.shape[1]
        ou = ou_contraction_check(Gaussian(np.zeros(d), trace.covs[0]), Gaussian(np.zeros(d), np.eye(d)),
                                  T=args.horizon, N=50)
        body["ou_contraction_ok"] = ou["ok"]
        body["ou_max_ratio"] = float(np.max(ou["ratio"]))
    out.write("report.json", dumps_json(body))
    out.write("report.csv", table_csv(rep.table))
    return True


def cmd_eks(args, out: ArtifactWriter):
    obj = _load_json(args.input) if args.input else {}
    x0, B = _param(args, obj, "x0"), np.atleast_2d(_param(args, obj, "B"))
    m_init, C_init = _param(args, obj, "m0"), np.atleast_2d(_param(args, obj, "C0"))
    J = int(obj.get("J", args.particles))
    if args.seed is None:
        raise InputError("eks needs --seed")
    rng = np.random.Generator(np.random.Philox(key=args.seed))
    X = rng.multivariate_normal(np.atleast_1d(m_init), C_init, size=J, method="eigh")
    record = np.asarray(obj.get("record", [args.horizon]), dtype=float)
    tr = eks_simulate(ParticleEnsemble(X, seed=args.seed), QuadraticTarget(np.atleast_1d(x0), B),
                      T=args.horizon, dt=args.dt, record=record)
    cols = _curve_columns(tr.times, tr.means, tr.covs)
    cols["mean_rel_error"] = tr.mean_rel_error
    cols["cov_rel_error"] = tr.cov_rel_error
    out.write("eks.csv", table_csv(cols))
    out.write("eks.json", dumps_json({"seed": args.seed, "J": J, "dt": args.dt, "T": args.horizon,
                                      "drift_gap": tr.drift_gap}))
    return True


def cmd_w2(args, out: ArtifactWriter):
    a, b = _load_json(args.mu0), _load_json(args.mu1)
    if "cov" in a and "cov" in b:
        val = gaussian_w2(Gaussian(a["mean"], a["cov"]), Gaussian(b["mean"], b["cov"]))
        out.write("cost.json", dumps_json({"w2_sq": val, "kind": "gaussian"}))
        return True
    plan = solve_w2(_measure(args.mu0), _measure(args.mu1), diagnose=args.diagnose)
    i, j, w = plan.support()
    out.write("plan.csv", table_csv({"i": i, "j": j, "mass": w}))
    out.write("cost.json", dumps_json({"w2_sq": plan.cost, "kind": "discrete",
                                       "degenerate": plan.degenerate,
                                       "marginal_error": plan.marginal_error()}))
    return True


COMMANDS = {"moments": cmd_moments, "shape": cmd_shape, "split": cmd_split, "flow": cmd_flow,
            "eks": cmd_eks, "w2": cmd_w2, "report": cmd_report}


# ----------------------------------------------------------------------------
# argument parsing


def _positive_float(text: str) -> float:
    try:
        val = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text}") from exc
    if not val > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return val


def _positive_int(text: str) -> int:
    try:
        val = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from exc
    if val < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return val


def _damping(text: str) -> float:
    val = _positive_float(text)
    if val > 1:
        raise argparse.ArgumentTypeError("damping must lie in (0, 1]")
    return val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="covot_out", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--tol", type=_positive_float, default=None)
    common.add_argument("--grid", "--N", dest="grid", type=_positive_int, default=200,
                        help="number of time steps")
    common.add_argument("--horizon", "--T", dest="horizon", type=_positive_float, default=5.0)
    common.add_argument("--dt", type=_positive_float, default=1e-3)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--damping", type=_damping, default=0.5)
    common.add_argument("--max-iter", dest="max_iter", type=_positive_int, default=200)
    common.add_argument("--input", default=None, help="JSON file with problem data")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="covot", description="Covariance-modulated transport toolkit")
    p.add_argument("--version", action="version", version=f"covot {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("moments", parents=[common], help="moment geodesics")
    for key in ("m0", "m1", "C0", "C1"):
        s.add_argument(f"--{key}", default=None, help="JSON array")

    for name, helptext in (("shape", "ω fixed point"), ("split", "modulated distance")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--mu0", required=True)
        s.add_argument("--mu1", required=True)
        s.add_argument("--symmetrize", action="store_true")

    for name, helptext in (("flow", "moment flow and decay table"), ("report", "bound verification")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        for key in ("m0", "C0", "x0", "B"):
            s.add_argument(f"--{key}", default=None, help="JSON array")
        s.add_argument("--kind", choices=("covariance", "variance"), default=None)
        s.set_defaults(grid=2000)

    s = sub.add_parser("eks", parents=[common], help="ensemble Kalman sampler run")
    for key in ("m0", "C0", "x0", "B"):
        s.add_argument(f"--{key}", default=None, help="JSON array")
    s.add_argument("--particles", type=_positive_int, default=1000)

    s = sub.add_parser("w2", parents=[common], help="discrete or Gaussian W2")
    s.add_argument("--mu0", required=True)
    s.add_argument("--mu1", required=True)
    s.add_argument("--diagnose", action="store_true")
    return p


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose")}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = ArtifactWriter(args.out)
    config = _config(args)
    try:
        converged = COMMANDS[args.command](args, out)
    except InputError as exc:
        out.manifest(args.command, config, "input_error", None, {"error": "InputError", "message": str(exc)})
        print(f"covot: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NoConvergence as exc:
        info = exc.to_dict()
        info.pop("last", None)
        out.manifest(args.command, config, "no_convergence", False, info)
        print(f"covot: {exc.name}: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except PreconditionError as exc:
        info = {"error": exc.name, "message": str(exc)}
        out.manifest(args.command, config, "precondition", None, info)
        print(f"covot: {exc.name}: {exc}", file=sys.stderr)
        return EXIT_PRECOND
    except CovotError as exc:
        out.manifest(args.command, config, "error", None, {"error": exc.name, "message": str(exc)})
        print(f"covot: {exc.name}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out.manifest(args.command, config, "ok", converged)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
