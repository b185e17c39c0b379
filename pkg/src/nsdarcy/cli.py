"""Command line entry point.

Commands ``solve``, ``study`` and ``adapt`` each take ``--config <path>``.
``run`` dispatches on the ``run.mode`` key. Exit codes: 0 success,
2 configuration error, 3 solver failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .adaptivity import AdaptiveTrace, NonConvergenceError, run_adaptive
from .config import ConfigError, RunConfig, load_config
from .discretization import build_dof_map
from .estimator import assemble_indicators, write_indicator_csv
from .mesh import build_structured_mesh
from .model import make_problem
from .reporting import (ConvergenceRecord, compute_errors, run_uniform_study,
                        write_convergence_csv, write_trace_csv)
from .solver import SingularSystemError, solve_stationary
from .vtk import export_vtk

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
COMMAND_MODES = {"solve": "single_solve", "study": "uniform_study", "adapt": "adaptive_run"}

log = logging.getLogger("nsdarcy")


def _problem(cfg: RunConfig):
    return make_problem(cfg.case, mu=cfg.mu, rho=cfg.rho, alpha_d=cfg.alpha_d,
                        kappa=cfg.kappa, width=cfg.width, kappa_contrast=cfg.kappa_contrast)


def _write_level(cfg, out: Path, level, mesh, sol, field):
    write_indicator_csv(out / f"indicators_{level}.csv", field)
    if cfg.vtk:
        export_vtk(out / f"level_{level}.vtk", mesh, sol, field)


def run_single(cfg: RunConfig, out: Path):
    data, case = _problem(cfg)
    mesh = build_structured_mesh(cfg.width, cfg.n0)
    dofs = build_dof_map(mesh)
    sol, report = solve_stationary(mesh, dofs, data, cfg.solver)
    if not report.converged:
        raise NonConvergenceError(
            f"Picard iteration did not converge in {report.iterations} iterations")
    field, summary = assemble_indicators(mesh, sol, data, cfg.classic_weights)
    _write_level(cfg, out, 0, mesh, sol, field)
    trace = AdaptiveTrace()
    trace.append(0, mesh.num_triangles, dofs.n_free, summary.theta, summary.zeta, 0)
    write_trace_csv(out / "trace.csv", trace)
    if case is not None:
        err = compute_errors(sol, case)
        comp = err.composite
        row = ConvergenceRecord(0, cfg.n0, mesh.h_max, dofs.n_free, err.u_S_h1, err.u_D_div,
                                err.p_l2, err.lam_half, comp, summary.theta, summary.zeta,
                                summary.theta / comp if comp > 0 else float("inf"),
                                float("nan"), report.iterations)
        write_convergence_csv(out / "convergence.csv", [row])
    log.info("solved: %d dofs, %d Picard iterations, theta %.6e", dofs.n_free,
             report.iterations, summary.theta)


def run_study(cfg: RunConfig, out: Path):
    data, case = _problem(cfg)
    if case is None:
        raise ConfigError("run.case", f"a uniform study needs a manufactured case, got {cfg.case!r}")
    rows = run_uniform_study(case, cfg.levels, cfg.solver, cfg.classic_weights, cfg.width,
                             callback=lambda k, m, s, f: _write_level(cfg, out, k, m, s, f))
    write_convergence_csv(out / "convergence.csv", rows)


def run_adapt(cfg: RunConfig, out: Path):
    data, _ = _problem(cfg)
    mesh = build_structured_mesh(cfg.width, cfg.n0)
    _, trace = run_adaptive(
        mesh, data, cfg.marking, cfg.solver, cfg.classic_weights,
        callback=lambda k, r: _write_level(cfg, out, k, r.mesh, r.solution, r.indicators))
    write_trace_csv(out / "trace.csv", trace)


RUNNERS = {"single_solve": run_single, "uniform_study": run_study, "adaptive_run": run_adapt}


def build_parser():
    p = argparse.ArgumentParser(prog="nsdarcy", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("solve", "study", "adapt", "run"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="INI configuration file")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--verbatim-estimator", dest="classic", action="store_false",
                       default=None, help="unweighted fluid terms (default)")
        g.add_argument("--classic-weights", dest="classic", action="store_true",
                       help="h-weighted fluid terms")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.classic is not None:
            cfg = replace(cfg, classic_weights=args.classic)
        if args.out:
            cfg = replace(cfg, output_dir=args.out)
        mode = cfg.mode if args.command == "run" else COMMAND_MODES[args.command]
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    try:
        os.makedirs(out, exist_ok=True)
        RUNNERS[mode](cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, SingularSystemError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
