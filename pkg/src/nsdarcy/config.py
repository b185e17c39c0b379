"""Run configuration read from INI text.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. Sections and keys (all optional, defaults shown)::

    [run]
    mode = single_solve          # single_solve | uniform_study | adaptive_run
    case = smooth_poly           # manufactured case, checkerboard or zero
    width = 1.0
    n0 = 2                       # initial subdivisions per unit length
    levels = 2, 4, 8, 16         # n0 per level of a uniform study

    [physics]
    mu = 1.0
    rho = 0.0
    alpha_d = 1.0
    kappa = 1.0                  # scalar permeability
    kappa_contrast = 0.01        # low/high ratio of the checkerboard case

    [solver]
    picard_tol = 1e-10
    picard_max_iters = 50
    damping = 1.0
    linear_solver = direct_lu

    [marking]
    theta = 0.5
    strategy = dorfler           # dorfler | maximum
    max_levels = 6
    stop_theta = 0.0

    [estimator]
    classic_weights = false

    [output]
    directory = out
    vtk = true
    reduction = sequential

Unknown sections or keys and out-of-range values raise ``ConfigError``
naming the offending key.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from typing import Tuple

from .adaptivity import MarkingConfig
from .model import PROBLEM_NAMES
from .solver import SolverConfig

MODES = ("single_solve", "uniform_study", "adaptive_run")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` holds ``section.key``."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    mode: str = "single_solve"
    case: str = "smooth_poly"
    width: float = 1.0
    n0: int = 2
    levels: Tuple[int, ...] = (2, 4, 8, 16)
    mu: float = 1.0
    rho: float = 0.0
    alpha_d: float = 1.0
    kappa: float = 1.0
    kappa_contrast: float = 1e-2
    solver: SolverConfig = field(default_factory=SolverConfig)
    marking: MarkingConfig = field(default_factory=MarkingConfig)
    classic_weights: bool = False
    output_dir: str = "out"
    vtk: bool = True
    reduction: str = "sequential"


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _int_list(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (RunConfig field or sub-config path, parser, validity check, hint)
_SCHEMA = {
    "run": {
        "mode": ("mode", str, lambda v: v in MODES, f"one of {MODES}"),
        "case": ("case", str, lambda v: v in PROBLEM_NAMES, f"one of {PROBLEM_NAMES}"),
        "width": ("width", float, _positive, "positive"),
        "n0": ("n0", int, lambda v: v >= 1, "at least 1"),
        "levels": ("levels", _int_list,
                   lambda v: len(v) >= 2 and all(n >= 1 for n in v), "two or more n0 >= 1"),
    },
    "physics": {
        "mu": ("mu", float, _positive, "positive"),
        "rho": ("rho", float, _nonneg, "nonnegative"),
        "alpha_d": ("alpha_d", float, _positive, "positive"),
        "kappa": ("kappa", float, _positive, "positive"),
        "kappa_contrast": ("kappa_contrast", float, _positive, "positive"),
    },
    "solver": {
        "picard_tol": ("solver.picard_tol", float, _positive, "positive"),
        "picard_max_iters": ("solver.picard_max_iters", int, lambda v: v >= 1, "at least 1"),
        "damping": ("solver.damping", float, lambda v: 0 < v <= 1, "in (0, 1]"),
        "linear_solver": ("solver.linear_solver", str, lambda v: v == "direct_lu", "direct_lu"),
    },
    "marking": {
        "theta": ("marking.theta", float, lambda v: 0 < v <= 1, "in (0, 1]"),
        "strategy": ("marking.strategy", str, lambda v: v in ("dorfler", "maximum"),
                     "dorfler or maximum"),
        "max_levels": ("marking.max_levels", int, _nonneg, "nonnegative"),
        "stop_theta": ("marking.stop_theta", float, _nonneg, "nonnegative"),
    },
    "estimator": {
        "classic_weights": ("classic_weights", _bool, lambda v: True, "boolean"),
    },
    "output": {
        "directory": ("output_dir", str, lambda v: bool(v), "nonempty"),
        "vtk": ("vtk", _bool, lambda v: True, "boolean"),
        "reduction": ("reduction", str, lambda v: v == "sequential", "sequential"),
    },
}


def parse_config(text: str, source="<config>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                   interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("<syntax>", str(exc).replace("\n", " ")) from exc
    top, solver, marking = {}, {}, {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in cp.items(section):
            name = f"{section}.{key}"
            if key not in _SCHEMA[section]:
                raise ConfigError(name, "unknown key")
            target, conv, ok, hint = _SCHEMA[section][key]
            try:
                value = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(name, f"cannot parse {raw!r} ({exc})") from exc
            if not ok(value):
                raise ConfigError(name, f"value {raw!r} out of range, expected {hint}")
            if target.startswith("solver."):
                solver[target[7:]] = value
            elif target.startswith("marking."):
                marking[target[8:]] = value
            else:
                top[target] = value
    base = RunConfig()
    return replace(base, solver=replace(base.solver, **solver),
                   marking=replace(base.marking, **marking), **top)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))
