"""Physical coefficients, data fields and manufactured exact solutions.

Fields are plain callables acting on arrays of points with shape ``(..., 2)``.
Vector fields return ``(..., 2)``, scalars ``(...)`` and tensors
``(..., 2, 2)``. Gradients are stored as ``G[..., i, j] = d u_i / d x_j``.

Interface sign conventions on ``Sigma`` (``n = n_S``, ``tau`` the tangent):

* mass:          ``u_S.n_S + u_D.n_D = g_mass``
* normal force:  ``p_S - p_D - 2 mu n.e(u_S).n = g_nf``
* BJS:           ``beta u_S.tau + 2 mu n.e(u_S).tau = g_bjs``

with ``beta = alpha_d mu / sqrt(tau.kappa.tau)``. All three data vanish for
the homogeneous coupled problem.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import sympy as sp

Field = Callable[[np.ndarray], np.ndarray]

CASE_NAMES = ("smooth_poly", "smooth_trig", "darcy_only", "stokes_only")
PROBLEM_NAMES = CASE_NAMES + ("checkerboard", "zero")


# -- pointwise kinematics ------------------------------------------------

def strain(grad_u):
    """Symmetric part ``e_ij = (d_j u_i + d_i u_j) / 2`` of a gradient."""
    g = np.asarray(grad_u, dtype=float)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def curl2(field_fn: Field, x, h=1e-5):
    """Scalar curl ``d_1 v_2 - d_2 v_1`` of a vector field at points ``x``.

    Uses the field's ``jacobian`` attribute when present, otherwise fourth
    order central differences.
    """
    x = np.asarray(x, dtype=float)
    jac = getattr(field_fn, "jacobian", None)
    if jac is not None:
        g = jac(x)
        return g[..., 1, 0] - g[..., 0, 1]
    e1 = np.array([h, 0.0])
    e2 = np.array([0.0, h])

    def d(e, comp):
        f = lambda s: field_fn(x + s * e)[..., comp]
        return (-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h)

    return d(e1, 1) - d(e2, 0)


def _const_vector(v):
    v = np.asarray(v, dtype=float)

    def fn(x):
        x = np.asarray(x)
        return np.broadcast_to(v, x.shape[:-1] + (2,)).copy()
    fn.jacobian = lambda x: np.zeros(np.asarray(x).shape[:-1] + (2, 2))
    return fn


def _zero_scalar(x):
    return np.zeros(np.asarray(x).shape[:-1])


def _as_tensor_field(kappa):
    """Normalize a scalar, 2x2 array or callable into a tensor field."""
    if callable(kappa):
        def fn(x):
            v = np.asarray(kappa(x), dtype=float)
            shape = np.asarray(x).shape[:-1]
            if v.shape == shape:
                return v[..., None, None] * np.eye(2)
            return np.broadcast_to(v, shape + (2, 2)).copy()
        return fn
    k = np.asarray(kappa, dtype=float)
    if k.ndim == 0:
        k = float(k) * np.eye(2)
    if k.shape != (2, 2):
        raise ValueError(f"kappa must be a scalar or 2x2 tensor, got shape {k.shape}")
    return lambda x: np.broadcast_to(k, np.asarray(x).shape[:-1] + (2, 2)).copy()


@dataclass(frozen=True)
class ProblemData:
    """Coefficients and data of the coupled problem.

    ``kappa`` is the rock permeability; the Darcy coefficient is
    ``K = kappa / mu``. Missing boundary and interface data mean zero.
    ``g_N(x, n)`` returns the prescribed ``u_D . n`` on ``Gamma_D``.
    """
    mu: float = 1.0
    rho: float = 0.0
    alpha_d: float = 1.0
    kappa: object = 1.0
    f_S: Field = field(default_factory=lambda: _const_vector((0.0, 0.0)))
    f_D: Field = field(default_factory=lambda: _const_vector((0.0, 0.0)))
    curl_f_D: Optional[Field] = None
    g_S: Optional[Field] = None
    g_N: Optional[Callable] = None
    g_mass: Optional[Field] = None
    g_nf: Optional[Field] = None
    g_bjs: Optional[Field] = None
    name: str = "custom"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.rho >= 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if not self.alpha_d > 0:
            raise ValueError(f"alpha_d must be positive, got {self.alpha_d}")
        object.__setattr__(self, "_kappa_fn", _as_tensor_field(self.kappa))

    def kappa_at(self, x):
        return self._kappa_fn(x)

    def K_at(self, x):
        return self.kappa_at(x) / self.mu

    def K_inv_at(self, x):
        K = self.K_at(x)
        det = K[..., 0, 0] * K[..., 1, 1] - K[..., 0, 1] * K[..., 1, 0]
        if np.any(np.abs(det) <= 1e-300):
            raise np.linalg.LinAlgError("permeability tensor is singular")
        inv = np.empty_like(K)
        inv[..., 0, 0] = K[..., 1, 1]
        inv[..., 1, 1] = K[..., 0, 0]
        inv[..., 0, 1] = -K[..., 0, 1]
        inv[..., 1, 0] = -K[..., 1, 0]
        return inv / det[..., None, None]

    def bjs_coefficient(self, x, tau):
        """``alpha_d mu / sqrt(tau . kappa . tau)`` at points ``x``."""
        k = self.kappa_at(x)
        ktt = np.einsum("...i,...ij,...j->...", tau, k, tau)
        if np.any(ktt <= 0):
            raise ValueError("tau.kappa.tau must be positive on the interface")
        return self.alpha_d * self.mu / np.sqrt(ktt)

    def curl_f_D_at(self, x):
        if self.curl_f_D is not None:
            return self.curl_f_D(x)
        return curl2(self.f_D, x)

    def check_spd(self, points, n_dirs=100, seed=0):
        """Smallest ``xi.K.xi`` over random unit ``xi`` at ``points``."""
        rng = np.random.default_rng(seed)
        ang = rng.uniform(0, 2 * np.pi, n_dirs)
        xi = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        K = self.K_at(np.asarray(points, dtype=float))
        vals = np.einsum("di,...ij,dj->...d", xi, K, xi)
        return float(vals.min())

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact fields with the data they induce through the strong form."""
    name: str
    data: ProblemData
    u_S: Field
    grad_u_S: Field
    u_D: Field
    div_u_D: Field
    p_S: Field
    p_D: Field
    width: float = 1.0

    def lam(self, x):
        return self.p_D(x)

    def p(self, x, subdomain):
        """Pressure on the given subdomain (0 = S, 1 = D)."""
        return self.p_S(x) if subdomain == 0 else self.p_D(x)


# -- symbolic construction -------------------------------------------------

_x, _y = sp.symbols("x y", real=True)


def _lamb(expr, shape):
    """Vectorized numpy callable for a sympy expression of a given shape."""
    flat = list(sp.Matrix(expr)) if shape else [expr]
    fns = [sp.lambdify((_x, _y), e, "numpy") for e in flat]

    def fn(pts):
        pts = np.asarray(pts, dtype=float)
        X, Y = pts[..., 0], pts[..., 1]
        vals = [np.broadcast_to(np.asarray(f(X, Y), dtype=float), X.shape) for f in fns]
        out = np.stack(vals, axis=-1) if shape else vals[0].copy()
        return out.reshape(X.shape + tuple(shape))
    return fn


def _curl_of_stream(psi):
    return sp.Matrix([sp.diff(psi, _y), -sp.diff(psi, _x)])


def _grad(u):
    return sp.Matrix(2, 2, lambda i, j: sp.diff(u[i], (_x, _y)[j]))


def _build(name, psi_S, p_S, psi_D, p_D, mu, rho, alpha_d, kappa, width,
           zero_S=False, zero_D=False):
    mu, rho, alpha_d = sp.nsimplify(mu), sp.nsimplify(rho), sp.nsimplify(alpha_d)
    k = np.asarray(kappa, dtype=float)
    if k.ndim == 0:
        k = float(k) * np.eye(2)
    kap = sp.Matrix(2, 2, lambda i, j: sp.nsimplify(k[i, j]))
    w = sp.nsimplify(width)

    u_S = sp.zeros(2, 1) if zero_S else _curl_of_stream(psi_S)
    u_D = sp.zeros(2, 1) if zero_D else _curl_of_stream(psi_D)

    # global zero mean of p over both subdomains
    mean = (sp.integrate(p_S, (_x, 0, w), (_y, 1, 2))
            + sp.integrate(p_D, (_x, 0, w), (_y, 0, 1))) / (2 * w)
    p_S = sp.simplify(p_S - mean)
    p_D = sp.simplify(p_D - mean)

    G = _grad(u_S)
    e = (G + G.T) / 2
    div_e = sp.Matrix([sp.diff(e[i, 0], _x) + sp.diff(e[i, 1], _y) for i in range(2)])
    conv = G * u_S
    grad_pS = sp.Matrix([sp.diff(p_S, _x), sp.diff(p_S, _y)])
    f_S = sp.simplify(-2 * mu * div_e + grad_pS + rho * conv)

    grad_pD = sp.Matrix([sp.diff(p_D, _x), sp.diff(p_D, _y)])
    f_D = sp.simplify(mu * kap.inv() * u_D + grad_pD)
    curl_fD = sp.simplify(sp.diff(f_D[1], _x) - sp.diff(f_D[0], _y))
    div_uD = sp.simplify(sp.diff(u_D[0], _x) + sp.diff(u_D[1], _y))

    n = sp.Matrix([0, -1])
    tau = sp.Matrix([1, 0])
    on_sigma = {_y: 1}
    nen = (n.T * e * n)[0]
    net = (n.T * e * tau)[0]
    beta = alpha_d * mu / sp.sqrt((tau.T * kap * tau)[0])
    g_mass = sp.simplify(((u_S.T * n)[0] - (u_D.T * n)[0]).subs(on_sigma))
    g_nf = sp.simplify((p_S - p_D - 2 * mu * nen).subs(on_sigma))
    g_bjs = sp.simplify((beta * (u_S.T * tau)[0] + 2 * mu * net).subs(on_sigma))

    u_S_fn = _lamb(u_S, (2,))
    u_D_fn = _lamb(u_D, (2,))
    grad_fn = _lamb(G, (2, 2))
    u_S_fn.jacobian = grad_fn
    f_D_fn = _lamb(f_D, (2,))
    f_D_fn.jacobian = _lamb(_grad(f_D), (2, 2))
    f_S_fn = _lamb(f_S, (2,))
    f_S_fn.jacobian = _lamb(_grad(f_S), (2, 2))

    def g_N(x, nvec):
        return np.einsum("...i,...i->...", u_D_fn(x), nvec)

    data = ProblemData(
        mu=float(mu), rho=float(rho), alpha_d=float(alpha_d), kappa=k,
        f_S=f_S_fn, f_D=f_D_fn, curl_f_D=_lamb(curl_fD, ()),
        g_S=u_S_fn, g_N=g_N, g_mass=_lamb(g_mass, ()), g_nf=_lamb(g_nf, ()),
        g_bjs=_lamb(g_bjs, ()), name=name)
    return ManufacturedCase(
        name=name, data=data, u_S=u_S_fn, grad_u_S=grad_fn, u_D=u_D_fn,
        div_u_D=_lamb(div_uD, ()), p_S=_lamb(p_S, ()), p_D=_lamb(p_D, ()),
        width=float(width))


def _normal_force_matched(p_S, psi_S, mu, extra):
    """Darcy pressure whose trace balances the fluid normal stress on y = 1."""
    u = _curl_of_stream(psi_S)
    G = _grad(u)
    e = (G + G.T) / 2
    nen = e[1, 1]   # n = (0, -1)
    trace = (p_S - 2 * sp.nsimplify(mu) * nen).subs({_y: 1})
    return sp.expand(trace) + extra


def make_manufactured(name, mu=1.0, rho=0.0, alpha_d=1.0, kappa=1.0, width=1.0):
    """Registered manufactured solution on ``(0,w)x(0,2)``.

    ``smooth_poly`` / ``smooth_trig``: coupled flow with exact mass and
    normal-force balance on the interface and homogeneous outer boundary
    conditions; the BJS datum is induced.
    ``darcy_only``: ``u_S = 0``, ``p_S = 0``, a divergence-free Darcy field.
    ``stokes_only``: ``u_D = 0`` and a fluid velocity without interface flux.
    """
    if name not in CASE_NAMES:
        raise ValueError(f"unknown manufactured case {name!r}; known: {CASE_NAMES}")
    k = np.asarray(kappa, dtype=float)
    key = tuple(k.ravel()) if k.ndim else float(k)
    return _make_cached(name, float(mu), float(rho), float(alpha_d), key, float(width))


@lru_cache(maxsize=64)
def _make_cached(name, mu, rho, alpha_d, kappa_key, width):
    kappa = np.reshape(kappa_key, (2, 2)) if isinstance(kappa_key, tuple) else kappa_key
    w = sp.nsimplify(width)
    X = _x / w
    pi = sp.pi
    if name == "smooth_poly":
        psi_S = X**2 * (1 - X)**2 * (2 - _y)**2
        psi_D = X**2 * (1 - X)**2 * _y**2
        p_S = X**2 - _y * X + _y**2 / 2
        p_D = _normal_force_matched(p_S, psi_S, mu, (1 - _y) * X * (1 - X))
        return _build(name, psi_S, p_S, psi_D, p_D, mu, rho, alpha_d, kappa, width)
    if name == "smooth_trig":
        psi_S = sp.sin(pi * X)**2 * sp.sin(pi * (2 - _y) / 2)**2 / pi**2
        psi_D = sp.sin(pi * X)**2 * sp.sin(pi * _y / 2)**2 / pi**2
        p_S = sp.cos(pi * X) * sp.sin(pi * _y / 2)
        p_D = _normal_force_matched(p_S, psi_S, mu,
                                    sp.sin(pi * (1 - _y)) * sp.cos(pi * X))
        return _build(name, psi_S, p_S, psi_D, p_D, mu, rho, alpha_d, kappa, width)
    if name == "darcy_only":
        psi_D = sp.sin(pi * X) * sp.sin(pi * _y) / pi
        p_D = sp.cos(pi * X) * sp.cos(pi * _y)
        return _build(name, sp.Integer(0), sp.Integer(0), psi_D, p_D, mu, rho,
                      alpha_d, kappa, width, zero_S=True)
    # stokes_only
    psi_S = X**2 * (1 - X)**2 * (2 - _y)**2 * (_y - 1)
    p_S = X * _y - X / 2
    return _build(name, psi_S, p_S, sp.Integer(0), sp.Integer(0), mu, rho,
                  alpha_d, kappa, width, zero_D=True)


# -- problems without exact solution --------------------------------------

def checkerboard_kappa(width=1.0, high=1.0, low=1e-2):
    """Permeability alternating between the four quadrants of ``Omega_D``."""
    def kappa(x):
        x = np.asarray(x, dtype=float)
        left = x[..., 0] < 0.5 * width
        lower = x[..., 1] < 0.5
        return np.where(left == lower, high, low)
    return kappa


def make_problem(name, mu=1.0, rho=0.0, alpha_d=1.0, kappa=1.0, width=1.0,
                 kappa_contrast=1e-2):
    """Problem data by name; returns ``(data, case_or_None)``."""
    if name in CASE_NAMES:
        case = make_manufactured(name, mu, rho, alpha_d, kappa, width)
        return case.data, case
    if name == "zero":
        return ProblemData(mu=mu, rho=rho, alpha_d=alpha_d, kappa=kappa, name=name), None
    if name == "checkerboard":
        data = ProblemData(
            mu=mu, rho=rho, alpha_d=alpha_d,
            kappa=checkerboard_kappa(width, 1.0, kappa_contrast),
            f_S=_const_vector((0.0, 0.0)), f_D=_const_vector((1.0, 0.0)),
            curl_f_D=_zero_scalar, name=name)
        return data, None
    raise ValueError(f"unknown problem {name!r}; known: {PROBLEM_NAMES}")
