"""Command-line front end: hamflow {inspect|manifold|turnpike|simulate}.

Configuration is a single JSON document; all outputs are canonical JSON
(sorted keys, %.12e floats) and CSV with the same float format, so repeated
runs of one config are byte-identical.  Exit codes: 0 success, 2 config
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import manifold as mf
from . import ocp as ocp_mod
from .errors import ConfigError, HamflowError, IntegrationError
from .exprsys import expression_system, load_expression_system
from .hamiltonian import build_hamiltonian, simulate_controlled, trajectory_to_csv
from .linalg import build_symplectic, pbh_detectable, pbh_stabilizable
from .serialize import write_canonical
from .systems import (
    backstepping_feedback,
    example_cascade,
    example_system,
    growth_certificate,
    linearize,
)


def thread_count() -> int:
    """Worker cap from HAMFLOW_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("HAMFLOW_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class ExperimentConfig:
    """Validated experiment description; raises ConfigError with the failing
    field path."""

    def __init__(self, data: dict, base_dir: Path):
        self.data = data
        self.base_dir = base_dir
        self.system = self._build_system()
        self.tolerances = self._tolerances()
        self.out_dir = Path(self._get(["output", "dir"], "out"))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: invalid JSON at line {exc.lineno}, column "
                f"{exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(data, path.parent)

    def _get(self, path, default=None, required=False):
        node = self.data
        for key in path:
            if not isinstance(node, dict) or key not in node:
                if required:
                    raise ConfigError(f"missing config field {'.'.join(path)}")
                return default
            node = node[key]
        return node

    def _build_system(self):
        sysspec = self._get(["system"], required=True)
        if not isinstance(sysspec, dict):
            raise ConfigError("system: must be an object")
        params = sysspec.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("system.params: must be an object")
        if "name" in sysspec:
            try:
                return example_system(sysspec["name"], **params)
            except (TypeError, ValueError, HamflowError) as exc:
                raise ConfigError(f"system: {exc}") from None
        if "expr" in sysspec:
            return expression_system(sysspec["expr"])
        if "expr_file" in sysspec:
            path = Path(sysspec["expr_file"])
            if not path.is_absolute():
                path = self.base_dir / path
            if not path.exists():
                raise ConfigError(f"system.expr_file: {path} does not exist")
            return load_expression_system(path)
        raise ConfigError("system: needs one of name, expr, expr_file")

    def _tolerances(self):
        tols = {
            "integrator": 1e-9,
            "manifold": 1e-9,
            "bvp": 1e-6,
            "newton": 1e-8,
        }
        user = self._get(["tolerances"], {})
        if not isinstance(user, dict):
            raise ConfigError("tolerances: must be an object")
        for k, v in user.items():
            if k not in tols:
                raise ConfigError(f"tolerances.{k}: unknown tolerance")
            v = float(v)
            if v <= 0:
                raise ConfigError(f"tolerances.{k}: must be positive")
            tols[k] = v
        return tols

    def vector(self, path, dim, required=False):
        raw = self._get(path, required=required)
        if raw is None:
            return None
        try:
            v = np.asarray(raw, dtype=float).reshape(dim)
        except (TypeError, ValueError):
            raise ConfigError(
                f"{'.'.join(path)}: expected a vector of length {dim}") from None
        return v


def _query_points(cfg: ExperimentConfig, n: int):
    spec = cfg._get(["manifold", "query_grid"])
    if spec is None:
        return None
    if isinstance(spec, list):
        return [np.asarray(q, dtype=float).reshape(n) for q in spec]
    if isinstance(spec, dict) and {"min", "max", "counts"} <= set(spec):
        lo = np.asarray(spec["min"], dtype=float).reshape(n)
        hi = np.asarray(spec["max"], dtype=float).reshape(n)
        counts = [int(c) for c in np.asarray(spec["counts"]).reshape(n)]
        axes = [np.linspace(lo[i], hi[i], counts[i]) for i in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return [np.array(p) for p in zip(*(m.ravel() for m in mesh))]
    raise ConfigError("manifold.query_grid: list of points or {min,max,counts}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_inspect(cfg: ExperimentConfig, args) -> dict:
    """Hypothesis dashboard: linearization, PBH verdicts, growth and
    coercivity checks, and which existence route they support."""
    sys_ = cfg.system
    lin = linearize(sys_)
    stab = pbh_stabilizable(lin.A, lin.B)
    det = pbh_detectable(lin.C, lin.A)
    penalty_rank = int(lin.C.shape[0])

    gspec = cfg._get(["growth"], {}) or {}
    radii = gspec.get("radii", list(np.geomspace(1.0, 100.0, 7)))
    samples = int(gspec.get("samples", 64))
    cert = growth_certificate(sys_, radii, samples_per_shell=samples)

    A_hurwitz = bool(np.all(np.linalg.eigvals(lin.A).real < 0))
    detect_ok = det and penalty_rank > 0
    if detect_ok and stab and cert.coercive and not cert.theta_violation:
        route = "stabilizable"
    elif A_hurwitz:
        route = "stable"
    else:
        route = "none"

    report = {
        "system": sys_.name,
        "linearization": {
            "A": lin.A, "B": lin.B, "C": lin.C,
            "A_hurwitz": A_hurwitz,
        },
        "pbh": {
            "stabilizable": bool(stab),
            "detectable": bool(det),
            "penalty_rank": penalty_rank,
            "penalty_detectability": bool(detect_ok),
        },
        "growth": {
            "f_exponent": cert.f_exponent,
            "g_exponent": cert.g_exponent,
            "h_exponent": cert.h_exponent,
            "exponent_p": cert.exponent_p,
            "growth_theta": cert.growth_theta,
            "c_f": cert.c_f, "c_g": cert.c_g, "c_h": cert.c_h,
            "rho": cert.rho,
            "coercive": cert.coercive,
            "theta_violation": cert.theta_violation,
            "fit_residual": cert.fit_residual,
            "sample_radii": list(cert.sample_radii),
        },
        "route": route,
    }
    _emit(cfg, args, "inspect.json", report)
    if not args.quiet:
        print(f"system {sys_.name}: route={route} stabilizable={stab} "
              f"detectable={det} (rank {penalty_rank}) "
              f"f-exponent={cert.f_exponent:.3f} coercive={cert.coercive}")
    return report


def _build_charts(cfg: ExperimentConfig, hsys, kinds, seed_count=None):
    mspec = cfg._get(["manifold"], {}) or {}
    tol = cfg.tolerances["manifold"]
    seeds = None
    radius = float(mspec.get("seed_radius", 0.3))
    per_radius = mspec.get("seeds_per_radius")
    if seed_count is not None:
        per_radius = int(seed_count)
    if per_radius is not None:
        seeds = mf.default_seeds(hsys.n, radius=radius,
                                 per_radius=int(per_radius),
                                 n_radii=int(mspec.get("n_radii", 3)))
    charts = {}
    for kind in kinds:
        chart = mf.local_stable_manifold(
            hsys, seeds=seeds, tol=tol, kind=kind,
            energy_tol=float(mspec.get("energy_tol", 1e-6)),
            check_tol=float(mspec.get("check_tol", 1e-3)),
            t_check=mspec.get("t_check"),
            seed_radius=radius,
            workers=thread_count(),
        )
        extend = float(mspec.get("extend_time", 8.0))
        if extend > 0:
            chart = mf.globalize(chart, hsys, extend_time=extend,
                                 bounds=mspec.get("bounds"))
        charts[kind] = chart
    return charts


def _points_csv(chart, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = chart.n
        w.writerow([f"x{i+1}" for i in range(n)]
                   + [f"p{i+1}" for i in range(n)] + ["H", "flow_check"])
        for i in range(len(chart.xs)):
            row = list(chart.xs[i]) + list(chart.ps[i]) \
                + [chart.H[i], chart.flow_check[i]]
            w.writerow(f"{v:.12e}" for v in row)


def cmd_manifold(cfg: ExperimentConfig, args) -> dict:
    report = cmd_inspect(cfg, _quiet(args))
    if report["route"] == "none" and not args.force:
        raise HamflowError(
            "hypothesis dashboard failed (route=none); rerun with --force")
    hsys = build_hamiltonian(cfg.system)
    mspec = cfg._get(["manifold"], {}) or {}
    kinds = ["stable", "unstable"] if mspec.get("kind", "stable") == "both" \
        else [str(mspec.get("kind", "stable"))]
    charts = _build_charts(cfg, hsys, kinds, seed_count=args.seed_count)

    out = {}
    for kind, chart in charts.items():
        mf.save_chart(chart, _outpath(cfg, args, f"chart_{kind}.json"))
        _points_csv(chart, _outpath(cfg, args, f"chart_{kind}_points.csv"))
        out[kind] = {
            "points": int(len(chart.xs)),
            "rejected": int(chart.rejected),
            "max_abs_H": float(np.abs(chart.H).max()) if len(chart.xs) else 0.0,
            "local_radius": chart.local_radius,
        }

    queries = _query_points(cfg, hsys.n)
    summary = {"charts": out}
    if queries:
        cov = mf.coverage(charts[kinds[0]], hsys, queries,
                          newton_tol=cfg.tolerances["newton"])
        summary["coverage"] = {
            "snap_radius": cov.snap_radius,
            "entries": [
                {
                    "x0": e.x0,
                    "status": e.status,
                    "distance": e.distance,
                    "witness_p": e.witness_p,
                }
                for e in cov.entries
            ],
        }
    _emit(cfg, args, "coverage.json", summary)
    if not args.quiet:
        counts = {k: v["points"] for k, v in out.items()}
        print(f"charts built: {counts}")
        if queries:
            st = [e["status"] for e in summary["coverage"]["entries"]]
            print(f"coverage: {st.count('covered')}/{len(st)} covered")
    return summary


def cmd_turnpike(cfg: ExperimentConfig, args) -> dict:
    tspec = cfg._get(["turnpike"], required=True)
    if not isinstance(tspec, dict):
        raise ConfigError("turnpike: must be an object")
    hsys = build_hamiltonian(cfg.system)
    x0 = cfg.vector(["turnpike", "x0"], hsys.n, required=True)
    xf = cfg.vector(["turnpike", "xf"], hsys.n, required=True)
    horizons = tspec.get("horizons")
    if not horizons:
        raise ConfigError("turnpike.horizons: need a non-empty list")
    epsilon = float(tspec.get("epsilon", 0.1))

    charts = (None, None)
    if tspec.get("check_condition", False):
        built = _build_charts(cfg, hsys, ["stable", "unstable"],
                              seed_count=args.seed_count)
        charts = (built["stable"], built["unstable"])

    report = ocp_mod.turnpike_report(
        hsys, x0, xf, horizons, epsilon=epsilon,
        tol=cfg.tolerances["bvp"],
        stable_chart=charts[0], unstable_chart=charts[1],
        keep_trajectories=True)

    data = {
        "epsilon": report.epsilon,
        "x0": report.x0,
        "xf": report.xf,
        "uniformity": report.uniformity,
        "condition": report.condition,
        "entries": [
            {
                "T": e.T, "converged": e.converged,
                "residence": e.residence, "cost": e.cost,
                "residual": e.residual,
                "first_exit": e.first_exit, "last_entry": e.last_entry,
                "error": e.error,
            }
            for e in report.entries
        ],
    }
    _emit(cfg, args, "turnpike.json", data)
    with open(_outpath(cfg, args, "turnpike.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "converged", "residence", "cost", "residual"])
        for e in report.entries:
            w.writerow([f"{e.T:.12e}", int(e.converged), f"{e.residence:.12e}",
                        f"{e.cost:.12e}", f"{e.residual:.12e}"])
    for T, traj in getattr(report, "trajectories", {}).items():
        trajectory_to_csv(traj, _outpath(cfg, args, f"trajectory_T{T:g}.csv"),
                          n=hsys.n)
    if not args.quiet:
        conv = sum(e.converged for e in report.entries)
        print(f"turnpike: {conv}/{len(report.entries)} horizons converged, "
              f"uniformity={report.uniformity}")
    failures = [e for e in report.entries if not e.converged]
    if failures and not tspec.get("allow_failures", True):
        raise HamflowError(f"{len(failures)} horizon(s) failed")
    return data


def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    sspec = cfg._get(["simulate"], required=True)
    if not isinstance(sspec, dict):
        raise ConfigError("simulate: must be an object")
    sys_ = cfg.system
    x0 = cfg.vector(["simulate", "x0"], sys_.n, required=True)
    T = float(sspec.get("T", 10.0))
    kind = str(sspec.get("feedback", "zero"))

    if kind == "zero":
        fb = lambda x: np.zeros(sys_.m)
    elif kind == "lqr":
        lin = linearize(sys_)
        sym = build_symplectic(lin.A, lin.B, lin.C)
        fb = lambda x: -lin.B.T @ sym.P1 @ x
    elif kind == "backstepping":
        fb = backstepping_feedback(example_cascade(sys_.name))
    elif kind == "manifold":
        hsys = build_hamiltonian(sys_)
        charts = _build_charts(cfg, hsys, ["stable"],
                               seed_count=args.seed_count)
        fb = mf.make_manifold_feedback(charts["stable"], hsys)
    else:
        raise ConfigError(
            "simulate.feedback: must be zero, lqr, backstepping or manifold")

    traj = simulate_controlled(sys_, x0, fb, T,
                               tol=cfg.tolerances["integrator"])
    trajectory_to_csv(traj, _outpath(cfg, args, "trajectory.csv"), n=sys_.n)
    data = {"feedback": kind, "T": T, "x0": x0,
            "final_state": traj.z[-1], "cost": traj.final_cost}
    _emit(cfg, args, "simulate.json", data)
    if not args.quiet:
        print(f"simulate: feedback={kind} final |x|="
              f"{np.linalg.norm(traj.z[-1]):.3e} cost={traj.final_cost:.6f}")
    return data


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _outpath(cfg: ExperimentConfig, args, name: str) -> Path:
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _emit(cfg: ExperimentConfig, args, name: str, payload):
    write_canonical(payload, _outpath(cfg, args, name))


class _quiet:
    """Args proxy that silences nested subcommand prints."""

    def __init__(self, args):
        self._args = args
        self.quiet = True

    def __getattr__(self, item):
        return getattr(self._args, item)


_COMMANDS = {
    "inspect": cmd_inspect,
    "manifold": cmd_manifold,
    "turnpike": cmd_turnpike,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hamflow",
        description="Hamiltonian stable-manifold and turnpike toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="skip the hypothesis gate")
        p.add_argument("--seed-count", type=int, default=None,
                       help="override manifold seeds per radius")
        p.add_argument("--tol", type=float, default=None,
                       help="override the integrator tolerance")
        p.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.tol is not None:
            if args.tol <= 0:
                raise ConfigError("--tol must be positive")
            cfg.tolerances["integrator"] = args.tol
            cfg.tolerances["manifold"] = args.tol
        _COMMANDS[args.command](cfg, args)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (HamflowError, IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
