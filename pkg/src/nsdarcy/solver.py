"""Picard iteration over gauged saddle-point systems with a sparse LU solve."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .discretization import (DiscreteSolution, DofMap, SparseSystem, assemble_gauged)
from .mesh import Mesh
from .model import ProblemData

log = logging.getLogger(__name__)


class SingularSystemError(RuntimeError):
    """Raised when the sparse factorization fails."""


@dataclass(frozen=True)
class SolverConfig:
    picard_tol: float = 1e-10
    picard_max_iters: int = 50
    damping: float = 1.0
    linear_solver: str = "direct_lu"

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max_iters < 1:
            raise ValueError("picard_max_iters must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.linear_solver != "direct_lu":
            raise ValueError(f"unsupported linear solver {self.linear_solver!r}")


@dataclass
class SolveReport:
    iterations: int = 0
    increment_history: list = field(default_factory=list)
    discrete_residual_norm: float = float("nan")
    rhs_norm: float = float("nan")
    converged: bool = False


def _block_diagnostics(system: SparseSystem):
    """Rows with vanishing norm, counted per block."""
    d = system.dofs
    A = system.matrix.tocsr()
    norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    o = d.offsets
    names = []
    for g in system.index:
        if g < 0:
            names.append("gauge")
        elif g < o["u_D"]:
            names.append("u_S")
        elif g < o["p"]:
            names.append("u_D")
        elif g < o["lambda"]:
            names.append("p")
        else:
            names.append("lambda")
    names = np.array(names)
    out = {}
    for b in ("u_S", "u_D", "p", "lambda", "gauge"):
        sel = names == b
        out[b] = {"rows": int(sel.sum()), "zero_rows": int(np.sum(norms[sel] == 0))}
    return out


def solve_linear(system) -> np.ndarray:
    """Direct sparse solve of a gauged system or of a plain sparse matrix pair."""
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs
    else:
        A, b = system
    A = sps.csc_matrix(A)
    try:
        with np.errstate(all="raise"):
            lu = spla.splu(A)
            x = lu.solve(np.asarray(b, dtype=float))
    except (RuntimeError, FloatingPointError) as exc:
        diag = _block_diagnostics(system) if isinstance(system, SparseSystem) else {}
        raise SingularSystemError(f"factorization failed ({exc}); block diagnostics: {diag}") from exc
    if not np.all(np.isfinite(x)):
        diag = _block_diagnostics(system) if isinstance(system, SparseSystem) else {}
        raise SingularSystemError(f"non-finite solution; block diagnostics: {diag}")
    return x


def relative_residual(A, x, b):
    r = np.abs(A @ x - b).max() if len(b) else 0.0
    An = abs(A).sum(axis=1).max() if A.shape[0] else 0.0
    return float(r / (An * np.abs(x).max() + np.abs(b).max() + 1e-300))


def discrete_residual(solution: DiscreteSolution, mesh: Mesh, dofs: DofMap,
                      data: ProblemData) -> float:
    """Largest ``|R(V_h)|`` over the free basis functions and the gauge row.

    The convection is linearized about the solution itself, so this is the
    residual of the nonlinear discrete problem.
    """
    if len(solution.x) != dofs.ndof:
        raise ValueError("solution does not match the dof map")
    system = assemble_gauged(mesh, dofs, data, solution if data.rho > 0 else None)
    y = _restrict(system, solution)
    return float(np.abs(system.rhs - system.matrix @ y).max())


def _restrict(system: SparseSystem, solution: DiscreteSolution, multiplier=0.0):
    y = np.empty(system.matrix.shape[0])
    mask = system.index >= 0
    y[mask] = solution.x[system.index[mask]]
    y[~mask] = multiplier
    return y


def solve_stationary(mesh: Mesh, dofs: DofMap, data: ProblemData,
                     config: SolverConfig = SolverConfig()):
    """Picard iteration from zero velocity; returns ``(solution, report)``.

    Each step solves the system linearized about the previous iterate. The
    iteration stops when the relative increment drops below ``picard_tol``
    or when the iterate already satisfies the system linearized about
    itself to ``picard_tol * (1 + ||b||_inf)``. The second test is what
    ends a linear problem after one step.
    """
    report = SolveReport()
    current = DiscreteSolution(dofs, np.zeros(dofs.ndof))
    system = assemble_gauged(mesh, dofs, data, current if data.rho > 0 else None)
    y_prev = np.zeros(system.matrix.shape[0])
    res = float("nan")
    for it in range(1, config.picard_max_iters + 1):
        y = solve_linear(system)
        if it > 1 and config.damping < 1.0:
            y = y_prev + config.damping * (y - y_prev)
        top = np.abs(y).max()
        inc = float(np.abs(y - y_prev).max() / top) if top > 0 else 0.0
        report.increment_history.append(inc)
        report.iterations = it
        current = system.expand(y)
        y_prev = y
        if data.rho > 0:
            system = assemble_gauged(mesh, dofs, data, current)
        bnorm = float(np.abs(system.rhs).max()) if len(system.rhs) else 0.0
        res = float(np.abs(system.rhs - system.matrix @ y).max())
        log.debug("picard iteration %d increment %.3e residual %.3e", it, inc, res)
        if inc <= config.picard_tol or res <= config.picard_tol * (1.0 + bnorm):
            report.converged = True
            break
    report.rhs_norm = float(np.abs(system.rhs).max()) if len(system.rhs) else 0.0
    report.discrete_residual_norm = discrete_residual(current, mesh, dofs, data)
    if not report.converged:
        log.warning("Picard iteration did not converge in %d iterations (last increment %.3e)",
                    report.iterations, report.increment_history[-1])
    return current, report
