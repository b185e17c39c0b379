"""Marking strategies and the solve, estimate, mark, refine loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .discretization import build_dof_map
from .estimator import assemble_indicators
from .mesh import Mesh, refine, refine_uniform
from .model import ProblemData
from .solver import SolverConfig, solve_stationary

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    """Raised when the nonlinear solve fails on some level."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class MarkingConfig:
    theta: float = 0.5
    strategy: str = "dorfler"
    max_levels: int = 6
    stop_theta: float = 0.0

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.strategy not in ("dorfler", "maximum"):
            raise ValueError(f"unknown marking strategy {self.strategy!r}")
        if self.max_levels < 0:
            raise ValueError("max_levels must be nonnegative")


def mark(theta_sq, config: MarkingConfig) -> np.ndarray:
    """Element ids to refine, ascending.

    Dorfler: the shortest prefix of the indicators sorted by decreasing
    value (ties by ascending id) whose sum reaches ``theta^2`` times the
    total. Maximum: all elements with ``Theta_T >= theta * max Theta_T``.
    """
    eta = np.asarray(theta_sq, dtype=float)
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValueError("indicators must be finite and nonnegative")
    total = eta.sum()
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    if config.strategy == "maximum":
        ind = np.sqrt(eta)
        return np.flatnonzero((ind >= config.theta * ind.max()) & (ind > 0))
    order = np.lexsort((np.arange(len(eta)), -eta))
    csum = np.cumsum(eta[order])
    target = config.theta ** 2 * total
    # guard the comparison against round-off in the running sum
    k = int(np.searchsorted(csum, target * (1 - 1e-14), side="left")) + 1
    chosen = order[:min(k, len(eta))]
    return np.sort(chosen[eta[chosen] > 0])


@dataclass
class AdaptiveTrace:
    levels: list = field(default_factory=list)
    nelem: list = field(default_factory=list)
    ndof: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    zeta: list = field(default_factory=list)
    marked: list = field(default_factory=list)

    def append(self, level, nelem, ndof, theta, zeta, marked):
        self.levels.append(level)
        self.nelem.append(nelem)
        self.ndof.append(ndof)
        self.theta.append(theta)
        self.zeta.append(zeta)
        self.marked.append(marked)

    def rows(self):
        return list(zip(self.levels, self.nelem, self.ndof, self.theta, self.zeta, self.marked))

    def __len__(self):
        return len(self.levels)


@dataclass
class LevelResult:
    mesh: Mesh
    solution: object
    indicators: object
    summary: object
    report: object


def run_adaptive(mesh: Mesh, data: ProblemData, config: MarkingConfig = MarkingConfig(),
                 solver_config: SolverConfig = SolverConfig(), classic_weights=False,
                 uniform=False, callback: Optional[Callable] = None):
    """Adaptive loop on ``mesh``; returns ``(last LevelResult, AdaptiveTrace)``.

    Stops after ``max_levels`` refinements or once ``Theta <= stop_theta``.
    With ``uniform=True`` every element is refined (two bisections per
    level), which gives the comparison sequence. ``callback(level, result)``
    is called after each estimate.
    """
    trace = AdaptiveTrace()
    level = 0
    while True:
        dofs = build_dof_map(mesh)
        sol, report = solve_stationary(mesh, dofs, data, solver_config)
        if not report.converged:
            raise NonConvergenceError(f"Picard iteration failed on level {level}", trace)
        field_, summary = assemble_indicators(mesh, sol, data, classic_weights)
        result = LevelResult(mesh, sol, field_, summary, report)
        done = summary.theta <= config.stop_theta or level >= config.max_levels
        if done:
            marked = np.zeros(0, dtype=np.int64)
        elif uniform:
            marked = np.arange(mesh.num_triangles)
        else:
            marked = mark(field_.theta_sq, config)
        trace.append(level, mesh.num_triangles, dofs.n_free, summary.theta, summary.zeta,
                     len(marked))
        log.info("level %d: elements %d dofs %d theta %.4e zeta %.4e marked %d", level,
                 mesh.num_triangles, dofs.n_free, summary.theta, summary.zeta, len(marked))
        if callback is not None:
            callback(level, result)
        if done or len(marked) == 0:
            return result, trace
        mesh = refine_uniform(mesh) if uniform else refine(mesh, marked)
        level += 1


def dofs_to_reach(trace: AdaptiveTrace, target: float):
    """Smallest dof count in ``trace`` with ``Theta <= target`` (``None`` if never)."""
    hits = [n for n, t in zip(trace.ndof, trace.theta) if t <= target]
    return min(hits) if hits else None
