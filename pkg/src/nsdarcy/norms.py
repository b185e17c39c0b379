"""Error norms against exact fields, including the fractional trace norm.

The ``H^{1/2}`` norm on a union of straight interface edges is the
Sobolev-Slobodeckij norm

    ||xi||^2 = ||xi||_0^2 + int int (xi(x) - xi(y))^2 / |x - y|^2 dx dy.

Pairs of edges are integrated with tensor Gauss rules. The diagonal
singularity of an edge paired with itself is removed by writing the
integrand in the offset ``d = s - t``, and the corner singularity of two
edges sharing a vertex by a Duffy split of the parameter square.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import roots_legendre

from .discretization import DiscreteSolution, element_vertices, s_geometry
from .model import ManufacturedCase
from .quadrature import triangle_rule

ERROR_DEGREE = 10
SLOBODECKIJ_ORDER = 16


def _gauss01(n):
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def slobodeckij_seminorm_sq(segments, values: Callable, order=SLOBODECKIJ_ORDER):
    """Squared ``H^{1/2}`` seminorm of a function on a set of segments.

    Parameters
    ----------
    segments : (m, 2, 2) array of segment endpoints ``(A, B)``; segments may
        touch only at endpoints, and touching is detected from coordinates.
    values : callable ``values(i, s)`` returning the function on segment
        ``i`` at parameters ``s`` in ``[0, 1]`` (``s = 0`` at ``A``).
    """
    seg = np.asarray(segments, dtype=float)
    m = len(seg)
    if m == 0:
        return 0.0
    g, gw = _gauss01(order)
    L = np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)
    total = 0.0
    scale = np.max(L)
    for i in range(m):
        for j in range(i, m):
            if i == j:
                total += _self_pair(values, i, g, gw)
                continue
            shared = _shared_vertex(seg[i], seg[j], 1e-12 * scale)
            if shared is None:
                total += 2.0 * _regular_pair(seg, values, i, j, g, gw)
            else:
                total += 2.0 * _corner_pair(seg, values, i, j, shared, g, gw)
    return float(total)


def _point(seg, i, s):
    return seg[i, 0][None, :] + np.asarray(s)[:, None] * (seg[i, 1] - seg[i, 0])[None, :]


def _self_pair(values, i, g, gw):
    # 2 int_{0<d<1} int_{0<t<1-d} ((f(t+d)-f(t))/d)^2 dt dd; lengths cancel
    d = g[:, None]
    t = (1.0 - d) * g[None, :]
    w = gw[:, None] * gw[None, :] * (1.0 - d)
    a = values(i, (t + d).ravel()).reshape(t.shape)
    b = values(i, t.ravel()).reshape(t.shape)
    return 2.0 * float(np.sum(w * ((a - b) / d) ** 2))


def _regular_pair(seg, values, i, j, g, gw):
    Li = np.linalg.norm(seg[i, 1] - seg[i, 0])
    Lj = np.linalg.norm(seg[j, 1] - seg[j, 0])
    x = _point(seg, i, g)
    y = _point(seg, j, g)
    fx = values(i, g)
    fy = values(j, g)
    r2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    return float(np.einsum("a,b,ab->", gw * Li, gw * Lj, (fx[:, None] - fy[None, :]) ** 2 / r2))


def _shared_vertex(si, sj, tol):
    for a in range(2):
        for b in range(2):
            if np.linalg.norm(si[a] - sj[b]) <= tol:
                return a, b
    return None


def _corner_pair(seg, values, i, j, shared, g, gw):
    """Pair of segments meeting at one vertex; Duffy split at the corner."""
    a, b = shared
    Li = np.linalg.norm(seg[i, 1] - seg[i, 0])
    Lj = np.linalg.norm(seg[j, 1] - seg[j, 0])
    # local distances from the shared vertex along each segment
    si = lambda r: r if a == 0 else 1.0 - r
    sj = lambda r: r if b == 0 else 1.0 - r
    total = 0.0
    R = g[:, None]
    Vv = g[None, :]
    W = gw[:, None] * gw[None, :] * R
    for ri, rj in ((R * np.ones_like(Vv), R * Vv), (R * Vv, R * np.ones_like(Vv))):
        x = _point(seg, i, si(ri).ravel())
        y = _point(seg, j, sj(rj).ravel())
        fx = values(i, si(ri).ravel())
        fy = values(j, sj(rj).ravel())
        r2 = np.sum((x - y) ** 2, axis=-1)
        total += float(np.sum(W.ravel() * (fx - fy) ** 2 / r2))
    return Li * Lj * total


def l2_sq_on_segments(segments, values, order=SLOBODECKIJ_ORDER):
    seg = np.asarray(segments, dtype=float)
    g, gw = _gauss01(order)
    total = 0.0
    for i in range(len(seg)):
        L = np.linalg.norm(seg[i, 1] - seg[i, 0])
        total += L * float(np.dot(gw, values(i, g) ** 2))
    return total


def h_half_norm(segments, values, order=SLOBODECKIJ_ORDER):
    """Full ``H^{1/2}`` norm (``L^2`` part plus seminorm)."""
    return float(np.sqrt(l2_sq_on_segments(segments, values, order)
                         + slobodeckij_seminorm_sq(segments, values, order)))


# -- element-wise error contributions -----------------------------------------

@dataclass(frozen=True)
class ErrorContributions:
    """Squared error pieces per element (``nan`` where not applicable)."""
    u_l2: np.ndarray        # ||e_u||_0,T^2 on both subdomains
    u_h1semi: np.ndarray    # |e_u|_1,T^2 on S
    u_div: np.ndarray       # ||div e_u||_0,T^2 on D
    p_l2: np.ndarray        # ||e_p||_0,T^2


def error_contributions(sol: DiscreteSolution, case: ManufacturedCase,
                        degree=ERROR_DEGREE) -> ErrorContributions:
    d = sol.dofs
    mesh = d.mesh
    rule = triangle_rule(degree)
    M = mesh.num_triangles
    u_l2 = np.zeros(M)
    h1 = np.zeros(M)
    dv = np.zeros(M)
    p2 = np.zeros(M)

    local = np.arange(len(d.s_elems))
    P, _ = s_geometry(d, local)
    X = rule.physical_points(P)
    uh, Gh = sol.u_S_at(local, rule.points)
    A = mesh.areas[d.s_elems][:, None] * rule.weights[None, :]
    u_l2[d.s_elems] = np.sum(A * np.sum((case.u_S(X) - uh) ** 2, axis=-1), axis=1)
    h1[d.s_elems] = np.sum(A * np.sum((case.grad_u_S(X) - Gh) ** 2, axis=(-1, -2)), axis=1)
    p2[d.s_elems] = np.sum(A * (case.p_S(X) - sol.p[d.s_elems, None]) ** 2, axis=1)

    local = np.arange(len(d.d_elems))
    PD = element_vertices(mesh, d.d_elems)
    XD = rule.physical_points(PD)
    vh, divh = sol.u_D_at(local, XD)
    A = mesh.areas[d.d_elems][:, None] * rule.weights[None, :]
    u_l2[d.d_elems] = np.sum(A * np.sum((case.u_D(XD) - vh) ** 2, axis=-1), axis=1)
    dv[d.d_elems] = np.sum(A * (case.div_u_D(XD) - divh[:, None]) ** 2, axis=1)
    p2[d.d_elems] = np.sum(A * (case.p_D(XD) - sol.p[d.d_elems, None]) ** 2, axis=1)
    return ErrorContributions(u_l2, h1, dv, p2)


def lambda_error_segments(sol: DiscreteSolution, case: ManufacturedCase, fine_positions=None):
    """Segments and evaluator of ``lambda - lambda_h`` on fine interface edges."""
    d = sol.dofs
    mesh = d.mesh
    pos = np.arange(len(d.partition.fine_edges)) if fine_positions is None else np.asarray(fine_positions)
    chain = d.sigma_chain[pos]
    seg = mesh.nodes[chain]                                     # (m, 2, 2)
    c = sol.x[d.lam_l2g[pos]]
    ends = np.einsum("ejm,em->ej", d.lam_vals[pos], c)

    def values(i, s):
        s = np.asarray(s, dtype=float)
        x = seg[i, 0][None, :] + s[:, None] * (seg[i, 1] - seg[i, 0])[None, :]
        return case.p_D(x) - (ends[i, 0] * (1.0 - s) + ends[i, 1] * s)
    return seg, values


@dataclass(frozen=True)
class ErrorNorms:
    u_S_h1: float
    u_D_div: float
    p_l2: float
    lam_half: float

    @property
    def composite(self):
        """Product-space norm: the sum of the component norms."""
        return self.u_S_h1 + self.u_D_div + self.p_l2 + self.lam_half


def error_norms(sol: DiscreteSolution, case: ManufacturedCase, degree=ERROR_DEGREE,
                order=SLOBODECKIJ_ORDER) -> ErrorNorms:
    c = error_contributions(sol, case, degree)
    d = sol.dofs
    uS = np.sqrt(np.sum(c.u_l2[d.s_elems]) + np.sum(c.u_h1semi[d.s_elems]))
    uD = np.sqrt(np.sum(c.u_l2[d.d_elems]) + np.sum(c.u_div[d.d_elems]))
    p = np.sqrt(np.sum(c.p_l2))
    seg, vals = lambda_error_segments(sol, case)
    lam = h_half_norm(seg, vals, order)
    return ErrorNorms(float(uS), float(uD), float(p), float(lam))
