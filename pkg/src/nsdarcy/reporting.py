"""Error tables against manufactured solutions and CSV output."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .discretization import DiscreteSolution, build_dof_map
from .estimator import assemble_indicators
from .mesh import build_structured_mesh
from .model import ManufacturedCase
from .norms import ERROR_DEGREE, SLOBODECKIJ_ORDER, error_norms
from .solver import SolverConfig, solve_stationary

log = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = ("level", "n0", "h_max", "ndof", "err_u_S_h1", "err_u_D_div",
                       "err_p_l2", "err_lambda_half", "err_composite", "theta", "zeta",
                       "effectivity", "eoc", "picard_iterations")
TRACE_COLUMNS = ("level", "nelem", "ndof", "theta", "zeta", "marked")


@dataclass(frozen=True)
class ConvergenceRecord:
    level: int
    n0: int
    h_max: float
    ndof: int
    err_u_S_h1: float
    err_u_D_div: float
    err_p_l2: float
    err_lambda_half: float
    err_composite: float
    theta: float
    zeta: float
    effectivity: float
    eoc: float                  # nan on level 0
    picard_iterations: int


def compute_errors(solution: DiscreteSolution, case: ManufacturedCase,
                   degree=ERROR_DEGREE, order=SLOBODECKIJ_ORDER):
    """Component and composite errors of ``solution`` against ``case``."""
    return error_norms(solution, case, degree, order)


def eoc(e_prev, e, h_prev, h):
    """``log(e_prev / e) / log(h_prev / h)``."""
    return math.log(e_prev / e) / math.log(h_prev / h)


def run_uniform_study(case: ManufacturedCase, n0_levels: Sequence[int] = (2, 4, 8, 16),
                      solver_config: SolverConfig = SolverConfig(), classic_weights=False,
                      width=None, callback=None):
    """Solve on structured meshes with ``n0`` subdivisions per unit length.

    Returns the list of ``ConvergenceRecord`` rows. ``callback(level, mesh,
    solution, field)`` is called after each level.
    """
    if len(n0_levels) < 2:
        raise ValueError("a study needs at least two levels")
    width = case.width if width is None else width
    rows = []
    for level, n0 in enumerate(n0_levels):
        mesh = build_structured_mesh(width, n0)
        dofs = build_dof_map(mesh)
        sol, report = solve_stationary(mesh, dofs, case.data, solver_config)
        field, summary = assemble_indicators(mesh, sol, case.data, classic_weights)
        err = compute_errors(sol, case)
        comp = err.composite
        rate = float("nan")
        if rows:
            rate = eoc(rows[-1].err_composite, comp, rows[-1].h_max, mesh.h_max)
        rows.append(ConvergenceRecord(
            level, int(n0), float(mesh.h_max), int(dofs.n_free), err.u_S_h1, err.u_D_div,
            err.p_l2, err.lam_half, comp, summary.theta, summary.zeta,
            summary.theta / comp if comp > 0 else float("inf"), rate, report.iterations))
        log.info("n0 %d: error %.4e theta %.4e eoc %.3f", n0, comp, summary.theta, rate)
        if callback is not None:
            callback(level, mesh, sol, field)
    return rows


def fitted_eoc(rows):
    """Least-squares slope of ``log error`` against ``log h``."""
    h = np.log([r.h_max for r in rows])
    e = np.log([r.err_composite for r in rows])
    return float(np.polyfit(h, e, 1)[0])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.16e}"


def write_convergence_csv(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CONVERGENCE_COLUMNS)
        for r in rows:
            wr.writerow([_fmt(getattr(r, c)) for c in CONVERGENCE_COLUMNS])


def read_convergence_csv(path):
    types = {f.name: f.type for f in fields(ConvergenceRecord)}
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CONVERGENCE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        for rec in rd:
            out.append(ConvergenceRecord(**{
                k: int(v) if types[k] in ("int", int) else float(v) for k, v in rec.items()}))
    return out


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRACE_COLUMNS)
        for row in trace.rows():
            wr.writerow([_fmt(v) for v in row])
