"""Residual a posteriori error estimator and data oscillation.

Per fluid element ``T``::

    Theta_T^2 = ||r_S||_T^2 + sum_{E in E(T), interior} ||J_E||_E^2
              + sum_{E in E(T) on Sigma} ( ||normal force||_E^2 + ||BJS||_E^2
                                          + ||mass||_E^2 )
              + ||div u_h||_T^2

Per porous element ``T``::

    Theta_T^2 = h_T^2 ( ||f_h - K^-1 u_h||_T^2 + ||curl(f_h - K^-1 u_h)||_T^2 )
              + sum_{E interior} h_E ||[(f_h - K^-1 u_h) . tau_E]||_E^2
              + sum_{E on the boundary or Sigma} h_E ||(f_h - K^-1 u_h) . tau_E||_E^2
              + sum_{E on Sigma} h_E ||p_h - lambda_h||_E^2
              + ||div u_h||_T^2

The fluid terms carry no mesh-size weights in the default mode. With
``classic_weights=True`` the fluid residual is weighted by ``h_T^2`` and the
fluid edge terms by ``h_E``. Edge terms shared by two elements are counted
for each of them. Known boundary and interface data enter the interface
residuals additively, with the sign conventions of :mod:`nsdarcy.model`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import (DiscreteSolution, bary_gradients, br_div_strain,
                             element_vertices, s_geometry, sigma_traces,
                             to_barycentric)
from .mesh import (D, GAMMA_D, GAMMA_S, INTERIOR_D, INTERIOR_S, S, SIGMA, Mesh, patch)
from .model import ManufacturedCase, ProblemData
from .norms import (error_contributions, h_half_norm, lambda_error_segments)
from .quadrature import line_rule, triangle_rule

RESIDUAL_DEGREE = 6
OSC_DEGREE = 6
JUMP_DEGREE = 6

S_TERMS = ("S_residual", "S_stress_jump", "S_normal_force", "S_bjs", "S_mass", "S_div")
D_TERMS = ("D_residual", "D_curl", "D_tangential_interior", "D_tangential_boundary",
           "D_pressure_lambda", "D_div")
TERMS = S_TERMS + D_TERMS


@dataclass(frozen=True)
class ProjectedData:
    """``f_S`` cell means and the ``[P1]^2`` projection of ``f_D``.

    ``f_D_nodal[k, i]`` is the value of the projection at vertex ``i`` of
    the ``k``-th porous element.
    """
    f_S_mean: np.ndarray     # (nS, 2)
    f_D_nodal: np.ndarray    # (nD, 3, 2)


def project_data(mesh: Mesh, data: ProblemData, s_elems=None, d_elems=None,
                 degree=OSC_DEGREE) -> ProjectedData:
    s_elems = mesh.elements_in(S) if s_elems is None else s_elems
    d_elems = mesh.elements_in(D) if d_elems is None else d_elems
    rule = triangle_rule(degree)
    X = rule.physical_points(element_vertices(mesh, s_elems))
    fS = np.einsum("q,nqd->nd", rule.weights, data.f_S(X))
    XD = rule.physical_points(element_vertices(mesh, d_elems))
    moments = np.einsum("q,qi,nqd->nid", rule.weights, rule.points, data.f_D(XD))
    # local P1 mass matrix divided by |T|: (1 + delta_ij) / 12
    Minv = np.linalg.inv((np.ones((3, 3)) + np.eye(3)) / 12.0)
    fD = np.einsum("ij,njd->nid", Minv, moments)
    return ProjectedData(fS, fD)


@dataclass
class IndicatorField:
    """Squared indicators per element with the term breakdown."""
    terms: dict            # name -> (M,) squared contributions
    zeta_sq: np.ndarray    # (M,)
    subdomain: np.ndarray

    @property
    def theta_sq(self):
        return np.sum([self.terms[t] for t in TERMS], axis=0)

    @property
    def theta(self):
        return np.sqrt(self.theta_sq)


@dataclass(frozen=True)
class EstimatorSummary:
    theta: float
    zeta: float
    zeta_S: float
    zeta_D: float
    term_totals: dict


# -- element residuals -------------------------------------------------------

def element_residual_S(sol: DiscreteSolution, data: ProblemData, proj: ProjectedData,
                       local, bary):
    """``f_T + 2 mu div e(u_h) - rho (u_h.grad) u_h - rho/2 div(u_h) u_h``.

    ``local`` indexes the fluid elements; returns ``(n, q, 2)`` at the
    barycentric points. The pressure gradient vanishes for P0.
    """
    local = np.atleast_1d(local)
    P, nrm = s_geometry(sol.dofs, local)
    c = sol.s_coeffs(local)
    dive = np.einsum("nad,na->nd", br_div_strain(P, nrm), c)
    u, G = sol.u_S_at(local, bary)
    r = proj.f_S_mean[local][:, None, :] + 2.0 * data.mu * dive[:, None, :]
    if data.rho > 0:
        conv = np.einsum("nqij,nqj->nqi", G, u)
        div = G[..., 0, 0] + G[..., 1, 1]
        r = r - data.rho * conv - 0.5 * data.rho * div[..., None] * u
    return np.broadcast_to(r, u.shape).copy()


def _kinv_gradient(data: ProblemData, X, h):
    """Central-difference derivatives of ``K^-1``: ``(..., 2 [d/dx_k], 2, 2)``."""
    out = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = 1.0
        step = (h[:, None, None] * e)
        out.append((data.K_inv_at(X + step) - data.K_inv_at(X - step)) / (2 * h[:, None, None, None]))
    return np.stack(out, axis=-3)


def darcy_field(sol: DiscreteSolution, data: ProblemData, proj: ProjectedData, local, X):
    """``f_h - K^-1 u_h`` at physical points ``X (n, q, 2)`` of porous elements."""
    d = sol.dofs
    local = np.atleast_1d(local)
    P = element_vertices(d.mesh, d.d_elems[local])
    bary = to_barycentric(P, X)
    fh = np.einsum("nid,nqi->nqd", proj.f_D_nodal[local], bary)
    u, _ = sol.u_D_at(local, X)
    return fh - np.einsum("nqij,nqj->nqi", data.K_inv_at(X), u)


def element_residual_D(sol, data, proj, local, X):
    """``f_T - K^-1 u_h - grad p_h`` with ``grad p_h = 0`` elementwise."""
    return darcy_field(sol, data, proj, local, X)


def darcy_curl(sol: DiscreteSolution, data: ProblemData, proj: ProjectedData, local, X):
    """``curl(f_h - K^-1 u_h)`` at points of porous elements.

    ``curl f_h`` is constant per element. For the velocity part,
    ``curl(K^-1 u) = curl_K + (K^-1 grad u)`` antisymmetric part, where the
    derivatives of ``K^-1`` are taken by central differences; they vanish
    for elementwise constant permeability.
    """
    d = sol.dofs
    local = np.atleast_1d(local)
    elems = d.d_elems[local]
    P = element_vertices(d.mesh, elems)
    gl = bary_gradients(P)
    gf = np.einsum("nid,nij->ndj", proj.f_D_nodal[local], gl)      # d_j f_d
    curl_f = gf[:, 1, 0] - gf[:, 0, 1]
    u, div = sol.u_D_at(local, X)
    # grad u_h = (div / 2) I for RT0 fields
    Kinv = data.K_inv_at(X)
    A = Kinv * (0.5 * div)[:, None, None, None]                      # K^-1 grad u
    h = 1e-6 * d.mesh.diameters[elems]
    dK = _kinv_gradient(data, X, h)                                  # (n,q,k,i,j)
    B = np.einsum("nqkij,nqj->nqik", dK, u)                          # d_k (K^-1)_ij u_j
    M = A + B
    curl_ku = M[..., 1, 0] - M[..., 0, 1]
    return curl_f[:, None] - curl_ku


# -- edge terms ----------------------------------------------------------------

def _edge_points(mesh: Mesh, edges, s):
    A = mesh.nodes[mesh.edges[edges, 0]]
    B = mesh.nodes[mesh.edges[edges, 1]]
    return A[:, None, :] * (1 - s)[None, :, None] + B[:, None, :] * s[None, :, None]


def _fluid_stress_traction(sol: DiscreteSolution, mu, local, X, n):
    """``(2 mu e(u_h) - p_h I) n`` at physical points of fluid elements."""
    d = sol.dofs
    P, _ = s_geometry(d, local)
    _, G = sol.u_S_at(local, to_barycentric(P, X))
    e = 0.5 * (G + np.swapaxes(G, -1, -2))
    p = sol.p[d.s_elems[local]]
    return 2 * mu * np.einsum("nqij,nj->nqi", e, n) - p[:, None, None] * n[:, None, :]


def stress_jumps(sol: DiscreteSolution, mu, edges=None, degree=JUMP_DEGREE, flip=False):
    """Jumps ``[(2 mu e(u_h) - p_h I) n_E]`` on interior fluid edges.

    Returns ``(edges, points, weights, jump)`` with ``jump`` of shape
    ``(nE, q, 2)``. ``flip=True`` evaluates with the opposite orientation
    (reversed normal and reversed side order).
    """
    d = sol.dofs
    mesh = d.mesh
    if edges is None:
        edges = mesh.edges_of_kind(INTERIOR_S)
    edges = np.asarray(edges)
    s, w = line_rule(degree)
    X = _edge_points(mesh, edges, s)
    n = mesh.edge_normals[edges]
    t0, t1 = mesh.edge_triangles[edges, 0], mesh.edge_triangles[edges, 1]
    if flip:
        n, t0, t1 = -n, t1, t0
    l0 = np.searchsorted(d.s_elems, t0)
    l1 = np.searchsorted(d.s_elems, t1)
    jump = _fluid_stress_traction(sol, mu, l1, X, n) - _fluid_stress_traction(sol, mu, l0, X, n)
    return edges, X, w[None, :] * mesh.edge_lengths[edges, None], jump


def pressure_jumps(sol: DiscreteSolution, edges, flip=False):
    """Raw scalar jumps ``[p_h]_E`` (sign depends on the orientation)."""
    mesh = sol.dofs.mesh
    t0, t1 = mesh.edge_triangles[edges, 0], mesh.edge_triangles[edges, 1]
    if flip:
        t0, t1 = t1, t0
    return sol.p[t1] - sol.p[t0]


@dataclass(frozen=True)
class InterfaceTerms:
    """Squared ``L^2(E)`` norms on each fine interface edge."""
    edges: np.ndarray
    mass: np.ndarray
    normal_force: np.ndarray
    bjs: np.ndarray
    pd_minus_lambda: np.ndarray
    s_elems: np.ndarray
    d_elems: np.ndarray


def interface_terms(sol: DiscreteSolution, data: ProblemData) -> InterfaceTerms:
    d = sol.dofs
    mesh = d.mesh
    tr = sigma_traces(d, degree=JUMP_DEGREE + 2)
    uS = np.einsum("eqad,ea->eqd", tr.VS, sol.x[d.s_l2g[tr.s_local]])
    GS = np.einsum("eqaij,ea->eqij", tr.GS, sol.x[d.s_l2g[tr.s_local]])
    uD = np.einsum("eqad,ea->eqd", tr.VD, sol.x[d.d_l2g[tr.d_local]])
    e = 0.5 * (GS + np.swapaxes(GS, -1, -2))
    n, tau = tr.n[:, None, :], tr.tau[:, None, :]
    nen = np.einsum("eqi,eqij,eqj->eq", np.broadcast_to(n, uS.shape), e, np.broadcast_to(n, uS.shape))
    net = np.einsum("eqi,eqij,eqj->eq", np.broadcast_to(n, uS.shape), e, np.broadcast_to(tau, uS.shape))
    pS = sol.p[mesh.edge_triangles[tr.edges, 0]][:, None]
    pD = sol.p[mesh.edge_triangles[tr.edges, 1]][:, None]
    lam = sol.lam_on_sigma(tr.s)
    zero = np.zeros_like(nen)
    g = lambda f: f(tr.X) if f is not None else zero
    mass = np.sum(uS * n, -1) - np.sum(uD * n, -1) - g(data.g_mass)
    nf = -pS + pD + 2 * data.mu * nen + g(data.g_nf)
    beta = data.bjs_coefficient(tr.X, np.broadcast_to(tau, tr.X.shape))
    bjs = beta * np.sum(uS * tau, -1) + 2 * data.mu * net - g(data.g_bjs)
    pl = pD - lam
    sq = lambda f: np.sum(tr.w * f ** 2, axis=1)
    return InterfaceTerms(tr.edges, sq(mass), sq(nf), sq(bjs), sq(pl),
                          mesh.edge_triangles[tr.edges, 0], mesh.edge_triangles[tr.edges, 1])


def tangential_terms(sol: DiscreteSolution, data: ProblemData, proj: ProjectedData,
                     degree=JUMP_DEGREE):
    """Squared tangential residual norms on porous edges, without ``h_E``.

    Returns ``(interior_edges, interior_sq, boundary_edges, boundary_sq)``;
    boundary edges are those on ``Gamma_D`` and on ``Sigma``, evaluated from
    their porous element.
    """
    d = sol.dofs
    mesh = d.mesh
    s, w = line_rule(degree)
    ie = mesh.edges_of_kind(INTERIOR_D)
    X = _edge_points(mesh, ie, s)
    tau = mesh.edge_tangents[ie][:, None, :]
    l0 = np.searchsorted(d.d_elems, mesh.edge_triangles[ie, 0])
    l1 = np.searchsorted(d.d_elems, mesh.edge_triangles[ie, 1])
    jump = np.sum((darcy_field(sol, data, proj, l1, X) - darcy_field(sol, data, proj, l0, X)) * tau, -1)
    wi = w[None, :] * mesh.edge_lengths[ie, None]
    be = mesh.edges_of_kind(GAMMA_D, SIGMA)
    Xb = _edge_points(mesh, be, s)
    taub = mesh.edge_tangents[be][:, None, :]
    kind = mesh.edge_kind[be]
    owner = np.where(kind == SIGMA, mesh.edge_triangles[be, 1], mesh.edge_triangles[be, 0])
    lb = np.searchsorted(d.d_elems, owner)
    val = np.sum(darcy_field(sol, data, proj, lb, Xb) * taub, -1)
    wb = w[None, :] * mesh.edge_lengths[be, None]
    return ie, np.sum(wi * jump ** 2, 1), be, np.sum(wb * val ** 2, 1), owner


# -- assembly ------------------------------------------------------------------

def assemble_indicators(mesh: Mesh, sol: DiscreteSolution, data: ProblemData,
                        classic_weights: bool = False):
    """Per-element indicators and the global summary."""
    d = sol.dofs
    M = mesh.num_triangles
    terms = {t: np.zeros(M) for t in TERMS}
    proj = project_data(mesh, data, d.s_elems, d.d_elems)
    hT = mesh.diameters
    rule = triangle_rule(RESIDUAL_DEGREE)

    # fluid element terms
    ls = np.arange(len(d.s_elems))
    if len(ls):
        r = element_residual_S(sol, data, proj, ls, rule.points)
        A = mesh.areas[d.s_elems][:, None] * rule.weights[None, :]
        res = np.sum(A * np.sum(r ** 2, -1), 1)
        _, G = sol.u_S_at(ls, rule.points)
        div = G[..., 0, 0] + G[..., 1, 1]
        terms["S_div"][d.s_elems] = np.sum(A * div ** 2, 1)
        if classic_weights:
            res = res * hT[d.s_elems] ** 2
        terms["S_residual"][d.s_elems] = res

        edges, _, w, jump = stress_jumps(sol, data.mu)
        jsq = np.sum(w * np.sum(jump ** 2, -1), 1)
        if classic_weights:
            jsq = jsq * mesh.edge_lengths[edges]
        for side in range(2):
            np.add.at(terms["S_stress_jump"], mesh.edge_triangles[edges, side], jsq)

    it = interface_terms(sol, data) if len(mesh.interface_edges) else None
    if it is not None:
        hE = mesh.edge_lengths[it.edges]
        wS = hE if classic_weights else 1.0
        np.add.at(terms["S_normal_force"], it.s_elems, wS * it.normal_force)
        np.add.at(terms["S_bjs"], it.s_elems, wS * it.bjs)
        np.add.at(terms["S_mass"], it.s_elems, wS * it.mass)
        np.add.at(terms["D_pressure_lambda"], it.d_elems, hE * it.pd_minus_lambda)

    # porous element terms
    ld = np.arange(len(d.d_elems))
    if len(ld):
        PD = element_vertices(mesh, d.d_elems)
        X = rule.physical_points(PD)
        A = mesh.areas[d.d_elems][:, None] * rule.weights[None, :]
        r = element_residual_D(sol, data, proj, ld, X)
        c = darcy_curl(sol, data, proj, ld, X)
        h2 = hT[d.d_elems] ** 2
        terms["D_residual"][d.d_elems] = h2 * np.sum(A * np.sum(r ** 2, -1), 1)
        terms["D_curl"][d.d_elems] = h2 * np.sum(A * c ** 2, 1)
        _, div = sol.u_D_at(ld, X)
        terms["D_div"][d.d_elems] = mesh.areas[d.d_elems] * div ** 2
        ie, isq, be, bsq, owner = tangential_terms(sol, data, proj)
        isq = isq * mesh.edge_lengths[ie]
        for side in range(2):
            np.add.at(terms["D_tangential_interior"], mesh.edge_triangles[ie, side], isq)
        np.add.at(terms["D_tangential_boundary"], owner, bsq * mesh.edge_lengths[be])

    zeta_sq = oscillation(mesh, data, proj, d.s_elems, d.d_elems)
    field = IndicatorField(terms, zeta_sq, mesh.subdomain.copy())
    zS = float(np.sqrt(zeta_sq[d.s_elems].sum()))
    zD = float(np.sqrt(zeta_sq[d.d_elems].sum()))
    summary = EstimatorSummary(
        theta=float(np.sqrt(field.theta_sq.sum())),
        zeta=float(np.sqrt(zS ** 2 + zD ** 2)), zeta_S=zS, zeta_D=zD,
        term_totals={t: float(terms[t].sum()) for t in TERMS})
    return field, summary


def oscillation(mesh: Mesh, data: ProblemData, proj: ProjectedData, s_elems, d_elems,
                degree=OSC_DEGREE):
    """Squared ``zeta_T`` per element."""
    rule = triangle_rule(degree)
    z = np.zeros(mesh.num_triangles)
    if len(s_elems):
        X = rule.physical_points(element_vertices(mesh, s_elems))
        A = mesh.areas[s_elems][:, None] * rule.weights[None, :]
        diff = data.f_S(X) - proj.f_S_mean[:, None, :]
        z[s_elems] = np.sum(A * np.sum(diff ** 2, -1), 1)
    if len(d_elems):
        P = element_vertices(mesh, d_elems)
        X = rule.physical_points(P)
        A = mesh.areas[d_elems][:, None] * rule.weights[None, :]
        fh = np.einsum("nid,qi->nqd", proj.f_D_nodal, rule.points)
        l2 = np.sqrt(np.sum(A * np.sum((data.f_D(X) - fh) ** 2, -1), 1))
        gl = bary_gradients(P)
        gf = np.einsum("nid,nij->ndj", proj.f_D_nodal, gl)
        curl_h = gf[:, 1, 0] - gf[:, 0, 1]
        cu = np.sqrt(np.sum(A * (data.curl_f_D_at(X) - curl_h[:, None]) ** 2, 1))
        z[d_elems] = (mesh.diameters[d_elems] * (l2 + cu)) ** 2
    return z


def write_indicator_csv(path, field: IndicatorField):
    """Columns: element_id, subdomain, theta_sq_total, <terms>, zeta_sq."""
    import csv
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["element_id", "subdomain", "theta_sq_total", *TERMS, "zeta_sq"])
        tot = field.theta_sq
        for k in range(len(tot)):
            wr.writerow([k, "SD"[field.subdomain[k]], f"{tot[k]:.16e}",
                         *(f"{field.terms[t][k]:.16e}" for t in TERMS),
                         f"{field.zeta_sq[k]:.16e}"])


# -- mesh-dependent norm for local efficiency ----------------------------------

def efficiency_norm(sol: DiscreteSolution, case: ManufacturedCase, members,
                    contributions=None) -> float:
    """``||(e_u, (e_p, e_lambda))||_{h, omega}`` for the element set ``members``.

    Fluid part: sum over fluid edges in the closure of ``omega`` of
    ``h_E^-1 (||e_u||_{1, omega_E}^2 + ||e_p||_{omega_E}^2)``, ``omega_E`` the
    fluid elements sharing ``E``. Porous part: ``H(div)`` norm of ``e_u`` and
    ``L^2`` norm of ``e_p`` on the porous members. Interface part: ``H^{1/2}``
    norm of ``e_lambda`` on the interface edges of the members.
    """
    d = sol.dofs
    mesh = d.mesh
    c = contributions if contributions is not None else error_contributions(sol, case)
    members = np.asarray(sorted(members), dtype=np.int64)
    sub = mesh.subdomain[members]
    edges = np.unique(mesh.triangle_edges[members].ravel())
    kind = mesh.edge_kind[edges]
    s_edges = edges[np.isin(kind, (INTERIOR_S, GAMMA_S, SIGMA))]
    total = 0.0
    for e in s_edges:
        tri = [t for t in mesh.edge_triangles[e] if t >= 0 and mesh.subdomain[t] == S]
        v = sum(c.u_l2[t] + c.u_h1semi[t] + c.p_l2[t] for t in tri)
        total += v / mesh.edge_lengths[e]
    dm = members[sub == D]
    total += float(np.sum(c.u_l2[dm] + c.u_div[dm] + c.p_l2[dm]))
    sig = edges[kind == SIGMA]
    if len(sig):
        pos = np.flatnonzero(np.isin(d.partition.fine_edges, sig))
        seg, vals = lambda_error_segments(sol, case, pos)
        total += h_half_norm(seg, vals) ** 2
    return float(np.sqrt(total))


def local_efficiency_ratios(sol, case, field: IndicatorField, contributions=None):
    """``Theta_T / (||e||_{h, patch} + sum_{T' in patch} zeta_T')`` with the
    vertex patch of ``T`` across both subdomains."""
    mesh = sol.dofs.mesh
    c = contributions if contributions is not None else error_contributions(sol, case)
    theta = field.theta
    zeta = np.sqrt(field.zeta_sq)
    out = np.empty(mesh.num_triangles)
    for t in range(mesh.num_triangles):
        mem = patch(mesh, "tilde_T", t).members
        denom = efficiency_norm(sol, case, mem, c) + sum(zeta[m] for m in mem)
        out[t] = theta[t] / denom if denom > 0 else np.inf
    return out
