"""Command-line driver: configuration in, CSV files and a JSON manifest out.

Usage::

    periodic-logistic eigen --config run.yaml --out results/

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 certificate failure.  A failed run keeps the files already written and
records the failing stage in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .blowup import (
    blowup_locus,
    certificate_rows,
    certify_all,
    locus_rows,
    propose_cylinders,
)
from .coeffs import CoefficientSet, Weight, classify_sets, set_rows
from .config import RunConfig, config_hash, dump_config, parse_config
from .eigen import principal_pair, sweep_rows
from .errors import CertificateFailure, ConfigError, NoPositiveSolutionError, PeriodicLogisticError
from .evolution import Evolution, TimeGrid
from .expressions import compile_expression
from .logistic import LogisticProblem, Nonlinearity, bifurcation_rows, bifurcation_sweep, solve_logistic
from .mesh import build_interval_mesh, build_rectangle_mesh, mesh_rows

__all__ = ["main", "run", "RunManifest", "build_problem"]

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CERTIFICATE = 0, 2, 3, 4


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class RunManifest:
    config_hash: str
    version: str
    command: str
    stage_seconds: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # name -> sha256
    headline: dict = field(default_factory=dict)
    status: str = "ok"
    failed_stage: str = None
    error: str = None

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v).__name__)


class _Writer:
    def __init__(self, out: Path, manifest: RunManifest):
        self.out = out
        self.manifest = manifest

    def csv(self, name, header, rows):
        path = self.out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.manifest.files[name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def trajectory(self, name, traj):
        vals = traj.values
        rows = ((k, i, vals[k, i]) for k in range(vals.shape[0]) for i in range(vals.shape[1]))
        self.csv(name, ("time_index", "node_id", "value"), rows)


# -- building the numerical objects ---------------------------------------


def _field(text):
    return compile_expression(text).field()


def build_problem(cfg: RunConfig, threads: int = 1, seed: int = None) -> LogisticProblem:
    """Mesh, evolution, weight and nonlinearity described by ``cfg``."""
    bc = dict(cfg.bc)
    if cfg.dim == 1:
        (lo, hi), = cfg.bounds
        mesh = build_interval_mesh(lo, hi, cfg.n[0], bc["left"], bc["right"])
    else:
        mesh = build_rectangle_mesh(cfg.bounds[0], cfg.bounds[1], cfg.n[0], cfg.n[1], bc)
    coeffs = CoefficientSet(
        T=cfg.T,
        dim=cfg.dim,
        a=tuple(tuple(_field(e) for e in row) for row in cfg.a),
        drift=None if cfg.drift is None else tuple(_field(e) for e in cfg.drift),
        convection=None if cfg.convection is None else tuple(_field(e) for e in cfg.convection),
        c0=_field(cfg.c0),
        beta0=_field(cfg.beta0),
    )
    grid = TimeGrid(cfg.T, cfg.K, cfg.theta)
    evo = Evolution(mesh, coeffs, grid)
    weight = Weight.from_field(_field(cfg.weight), mesh, cfg.K, cfg.T)
    if cfg.g is not None:
        v = ("x", "y", "t", "xi")
        nl = Nonlinearity(
            compile_expression(cfg.g, v).nonlinearity(), compile_expression(cfg.dg, v).nonlinearity(), cfg.growth
        )
    else:
        nl = None
    return LogisticProblem(
        evo, weight, nl, cfg.gamma_ladder, threads=threads, seed=cfg.seed if seed is None else seed
    )


# -- stages ------------------------------------------------------------------


def _stage_eigen(problem, cfg, w, head):
    w.csv("mesh.csv", ("node_id", *("x", "y")[: cfg.dim], "boundary_tag"), mesh_rows(problem.mesh))
    pair = problem.pair0
    w.csv(
        "eigen.csv",
        ("mu1", "lambda", "iterations", "residual", "shift"),
        [(pair.mu1, pair.lam, pair.iterations, pair.residual, pair.shift)],
    )
    w.trajectory("eigenfunction.csv", pair.phi)
    head["mu1_0"] = float(pair.mu1)


def _stage_mu_star(problem, cfg, w, head):
    sw = problem.sweep()
    w.csv("sweep.csv", ("gamma", "mu1", "lambda", "iterations", "residual"), sweep_rows(sw))
    q0, qb = classify_sets(problem.weight, problem.mesh)
    w.csv("sets.csv", ("node_id", "time_index", "label"), set_rows(q0, qb))
    head["mu_star"] = float(sw.mu_star_estimate)
    head["mu_star_infinite"] = bool(sw.infinite)
    head["gamma_rungs"] = int(sw.gammas.size)


def _stage_logistic(problem, cfg, w, head):
    rows, last = [], None
    for mu in cfg.mu:
        try:
            sol = solve_logistic(problem, mu, cfg.direction, cfg.tol_fix, cfg.max_periods)
        except NoPositiveSolutionError as exc:
            chk = exc.check
            rows.append((mu, 0.0, np.nan, chk.periods, chk.final_sup, "zero"))
            continue
        rows.append((mu, sol.sup_norm, sol.stability_margin, sol.iterations, sol.pde_residual, "positive"))
        last = sol
    w.csv("logistic.csv", ("mu", "sup_norm", "stability_margin", "iterations", "residual", "kind"), rows)
    if last is not None:
        w.trajectory("solution.csv", last.u)
    head["logistic_positive"] = sum(r[-1] == "positive" for r in rows)


def _stage_bifurcate(problem, cfg, w, head, state):
    curve = bifurcation_sweep(problem, cfg.mu_ladder, cfg.rungs, cfg.tol_fix, cfg.max_periods)
    state["curve"] = curve
    w.csv("curve.csv", ("mu", "sup_norm", "stability_margin", "iterations", "residual"), bifurcation_rows(curve))
    if curve.solutions:
        w.trajectory("solution.csv", curve.solutions[-1].u)
    head["mu_rungs"] = int(curve.mus.size)
    head["mu_rung_failures"] = len(curve.failures)
    if not curve.solutions:
        raise PeriodicLogisticError("every rung of the bifurcation sweep failed")


def _stage_blowup(problem, cfg, w, head, state, threads):
    curve = state["curve"]
    sw = problem.sweep()
    phi_inf = None
    if not sw.infinite:
        phi_inf = principal_pair(problem.evo, sw.gammas[-1] * problem.weight.values, seed=problem.seed).phi
    top = min(3, len(curve.solutions))
    if top >= 2:
        report = blowup_locus(curve, problem.mu_star, phi_inf, top=top)
        w.csv("locus.csv", ("node_id", "time_index", "class", "growth_slope"), locus_rows(report))
        head["locus_phi_fraction"] = report.phi_fraction
    cyls = propose_cylinders(problem.weight, problem.mesh, cfg.margin)
    certs = certify_all(cyls, curve, problem, threads=threads)
    w.csv(
        "certificates.csv",
        ("cylinder_id", "x_lo", "x_hi", "s", "t", "B", "max_u", "max_v", "verified"),
        certificate_rows(certs, problem.mesh),
    )
    head["certificates_verified"] = sum(c.verified for c in certs)
    head["certificates_failed"] = sum(not c.verified for c in certs)
    failed = [c for c in certs if not c.verified]
    if failed:
        raise CertificateFailure(f"{len(failed)} certificate(s) failed; first: {failed[0].failure}")


_PIPELINES = {
    "eigen": ("eigen",),
    "mu-star": ("eigen", "mu-star"),
    "logistic": ("eigen", "mu-star", "logistic"),
    "bifurcate": ("eigen", "mu-star", "bifurcate"),
    "blowup": ("eigen", "mu-star", "bifurcate", "blowup"),
    "all": ("eigen", "mu-star", "logistic", "bifurcate", "blowup"),
}


def run(cfg: RunConfig, out=None, threads: int = 1, seed: int = None) -> RunManifest:
    """Execute the pipeline of ``cfg.command`` and write its files to ``out``.

    Stage errors are re-raised after the manifest has been written with the
    failing stage; the exception gets a ``stage`` attribute.
    """
    out = Path(out if out is not None else (cfg.output or "."))
    out.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    manifest = RunManifest(config_hash(cfg), __version__, cfg.command)
    (out / "config.yaml").write_text(dump_config(cfg))
    manifest.files["config.yaml"] = hashlib.sha256((out / "config.yaml").read_bytes()).hexdigest()
    w = _Writer(out, manifest)
    head = manifest.headline
    state = {}
    stage = "setup"
    try:
        t0 = time.perf_counter()
        problem = build_problem(cfg, threads)
        if problem.nl is not None:
            problem.nl.check(problem.mesh, problem.grid.times[:1])
        manifest.stage_seconds[stage] = time.perf_counter() - t0
        for stage in _PIPELINES[cfg.command]:
            t0 = time.perf_counter()
            if stage == "eigen":
                _stage_eigen(problem, cfg, w, head)
            elif stage == "mu-star":
                _stage_mu_star(problem, cfg, w, head)
            elif stage == "logistic":
                _stage_logistic(problem, cfg, w, head)
            elif stage == "bifurcate":
                _stage_bifurcate(problem, cfg, w, head, state)
            else:
                _stage_blowup(problem, cfg, w, head, state, threads)
            manifest.stage_seconds[stage] = time.perf_counter() - t0
    except Exception as exc:
        manifest.status = "failed"
        manifest.failed_stage = stage
        manifest.error = f"{type(exc).__name__}: {exc}"
        (out / "manifest.json").write_text(manifest.to_json())
        exc.stage = stage
        exc.manifest = manifest
        raise
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def _parser():
    p = argparse.ArgumentParser(prog="periodic-logistic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in _PIPELINES:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML run configuration")
        s.add_argument("--out", default=None, help="output directory (default: config 'output' or .)")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--seed", type=int, default=None, help="seed for random starting vectors")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = replace(parse_config(args.config), command=args.command)
        if args.command in ("logistic", "bifurcate", "blowup", "all") and (cfg.g is None or cfg.dg is None):
            raise ConfigError(f"command {args.command!r} needs nonlinearity.g and nonlinearity.dg")
        if args.command in ("logistic", "all") and not cfg.mu:
            raise ConfigError(f"command {args.command!r} needs command.mu")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(cfg, args.out, args.threads, args.seed)
    except CertificateFailure as exc:
        print(f"certificate failure in stage {getattr(exc, 'stage', '?')}: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PeriodicLogisticError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure in stage {getattr(exc, 'stage', '?')}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(manifest.headline, sort_keys=True, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
