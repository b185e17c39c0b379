"""Finite element spaces, degrees of freedom and assembly.

Spaces
------
* ``u_S``: Bernardi-Raugel, vector P1 enriched with one normal edge bubble
  ``eta_a eta_b n_E`` per edge (``a``, ``b`` the edge endpoints).
* ``u_D``: lowest-order Raviart-Thomas; the dof of edge ``E`` is the mean
  normal flux ``|E|^-1 int_E v.n_E``.
* ``p``: piecewise constants on the whole mesh, zero mean via a gauge row.
* ``lambda``: continuous piecewise linears on the coarse interface
  partition, one dof per macro node.

Global layout: ``[u_S | u_D | p | lambda]`` over all dofs including the
constrained boundary ones; solves act on the free subset. BR local order is
``2 i + c`` for vertex ``i`` and component ``c``, then ``6 + k`` for the
bubble of local edge ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sps

from .mesh import (D, GAMMA_D, GAMMA_S, S, InterfacePartition, Mesh, build_interface_partition)
from .model import ManufacturedCase, ProblemData
from .quadrature import line_rule, triangle_rule

VOLUME_DEGREE = 5
EDGE_DEGREE = 7
INTERP_DEGREE = 8

NBR = 9
NRT = 3


class AssemblyError(ValueError):
    """Raised for inconsistent assembly input."""


# -- element geometry ------------------------------------------------------

def element_vertices(mesh: Mesh, elems=None):
    tris = mesh.triangles if elems is None else mesh.triangles[elems]
    return mesh.nodes[tris]


def bary_gradients(P):
    """Gradients of the barycentric coordinates, shape ``(..., 3, 2)``."""
    P = np.asarray(P, dtype=float)
    area2 = ((P[..., 1, 0] - P[..., 0, 0]) * (P[..., 2, 1] - P[..., 0, 1])
             - (P[..., 1, 1] - P[..., 0, 1]) * (P[..., 2, 0] - P[..., 0, 0]))
    if np.any(np.abs(area2) <= 1e-300):
        raise AssemblyError("degenerate element")
    out = np.empty(P.shape)
    for k in range(3):
        t = P[..., (k + 2) % 3, :] - P[..., (k + 1) % 3, :]
        out[..., k, 0] = -t[..., 1]
        out[..., k, 1] = t[..., 0]
    return out / area2[..., None, None]


def outward_normals(P):
    """Unit outward normals of the local edges, shape ``(..., 3, 2)``."""
    out = np.empty(np.shape(P))
    for k in range(3):
        t = P[..., (k + 2) % 3, :] - P[..., (k + 1) % 3, :]
        out[..., k, 0] = t[..., 1]
        out[..., k, 1] = -t[..., 0]
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _areas(P):
    a, b = P[..., 1, :] - P[..., 0, :], P[..., 2, :] - P[..., 0, :]
    return 0.5 * np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])


def edge_lengths_local(P):
    return np.stack([np.linalg.norm(P[..., (k + 2) % 3, :] - P[..., (k + 1) % 3, :], axis=-1)
                     for k in range(3)], axis=-1)


def to_barycentric(P, X):
    """Barycentric coordinates of points ``X (n, q, 2)`` in triangles ``P (n, 3, 2)``."""
    B = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=-1)
    rhs = X - P[:, None, 0, :]
    l12 = np.linalg.solve(B[:, None], rhs[..., None])[..., 0]
    return np.concatenate([1.0 - l12.sum(-1, keepdims=True), l12], axis=-1)


# -- reference basis tables -----------------------------------------------

def br_tables(P, bary, normals):
    """BR basis values and gradients.

    Parameters
    ----------
    P : (n, 3, 2) element vertices
    bary : (n, q, 3) or (q, 3) barycentric evaluation points
    normals : (n, 3, 2) bubble direction for each local edge

    Returns
    -------
    V : (n, q, 9, 2), G : (n, q, 9, 2, 2) with ``G[..., i, j] = d_j v_i``
    """
    gl = bary_gradients(P)                          # (n, 3, 2)
    n = P.shape[0]
    bary = np.broadcast_to(bary, (n,) + np.shape(bary)[-2:])
    q = bary.shape[1]
    V = np.zeros((n, q, NBR, 2))
    G = np.zeros((n, q, NBR, 2, 2))
    for i in range(3):
        for c in range(2):
            V[:, :, 2 * i + c, c] = bary[:, :, i]
            G[:, :, 2 * i + c, c, :] = gl[:, None, i, :]
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        phi = bary[:, :, a] * bary[:, :, b]
        dphi = (bary[:, :, a, None] * gl[:, None, b, :]
                + bary[:, :, b, None] * gl[:, None, a, :])
        nk = normals[:, None, k, :]
        V[:, :, 6 + k, :] = phi[..., None] * nk
        G[:, :, 6 + k, :, :] = nk[..., :, None] * dphi[..., None, :]
    return V, G


def br_div_strain(P, normals):
    """Constant ``div e(phi)`` of every BR basis function, shape ``(n, 9, 2)``.

    Vertex functions are linear and contribute zero. For a bubble
    ``phi n`` with Hessian ``H`` of ``phi``:
    ``div e = (n tr H + H n) / 2``.
    """
    gl = bary_gradients(P)
    out = np.zeros(P.shape[:1] + (NBR, 2))
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        H = (gl[:, a, :, None] * gl[:, b, None, :] + gl[:, b, :, None] * gl[:, a, None, :])
        nk = normals[:, k, :]
        tr = H[:, 0, 0] + H[:, 1, 1]
        out[:, 6 + k, :] = 0.5 * (nk * tr[:, None] + np.einsum("nij,nj->ni", H, nk))
    return out


def eval_br_basis(vertices, bary):
    """BR basis on one triangle with locally outward bubble normals.

    Returns ``(values (q, 9, 2), gradients (q, 9, 2, 2))``.
    """
    P = np.asarray(vertices, dtype=float)[None]
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    V, G = br_tables(P, bary[None], outward_normals(P))
    return V[0], G[0]


def rt_tables(P, X, signs):
    """RT0 values ``(n, q, 3, 2)`` and divergences ``(n, 3)``.

    ``psi_k = s_k |E_k| / (2|T|) (x - a_k)`` with ``a_k`` the vertex opposite
    local edge ``k``; its normal component on ``E_k`` is ``s_k`` times the
    outward unit normal, so the dof is the mean normal flux.
    """
    L = edge_lengths_local(P)
    area = 0.5 * np.abs((P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1])
                        - (P[:, 1, 1] - P[:, 0, 1]) * (P[:, 2, 0] - P[:, 0, 0]))
    if np.any(area <= 0):
        raise AssemblyError("degenerate element")
    scale = signs * L / (2.0 * area[:, None])                  # (n, 3)
    V = scale[:, None, :, None] * (X[:, :, None, :] - P[:, None, :, :])
    div = 2.0 * scale
    return V, div


def eval_rt0_basis(vertices, X, signs=(1, 1, 1)):
    """RT0 basis on one triangle at physical points ``X (q, 2)``."""
    P = np.asarray(vertices, dtype=float)[None]
    V, div = rt_tables(P, np.atleast_2d(np.asarray(X, dtype=float))[None],
                       np.asarray(signs, dtype=float)[None])
    return V[0], div[0]


# -- dof map -----------------------------------------------------------------

@dataclass(frozen=True)
class DofMap:
    mesh: Mesh
    partition: InterfacePartition
    n_uS: int
    n_uD: int
    n_p: int
    n_lam: int
    s_elems: np.ndarray
    d_elems: np.ndarray
    s_nodes: np.ndarray
    s_node_index: np.ndarray
    s_edges: np.ndarray
    s_edge_index: np.ndarray
    d_edges: np.ndarray
    d_edge_index: np.ndarray
    s_l2g: np.ndarray          # (nS, 9)
    s_signs: np.ndarray        # (nS, 3) bubble normal sign vs outward
    d_l2g: np.ndarray          # (nD, 3)
    d_signs: np.ndarray        # (nD, 3)
    lam_l2g: np.ndarray        # (nSigma, 2) macro dofs active on a fine edge
    lam_vals: np.ndarray       # (nSigma, 2 endpoints, 2 dofs)
    sigma_chain: np.ndarray    # (nSigma, 2) chain nodes of each fine edge
    free: np.ndarray           # bool mask over all dofs

    @property
    def offsets(self):
        o = np.cumsum([0, self.n_uS, self.n_uD, self.n_p, self.n_lam])
        return {"u_S": int(o[0]), "u_D": int(o[1]), "p": int(o[2]), "lambda": int(o[3]),
                "end": int(o[4])}

    @property
    def ndof(self):
        return self.n_uS + self.n_uD + self.n_p + self.n_lam

    def block_slice(self, name):
        o = self.offsets
        keys = ["u_S", "u_D", "p", "lambda", "end"]
        i = keys.index(name)
        return slice(o[keys[i]], o[keys[i + 1]])

    def free_counts(self):
        """Number of free dofs per block."""
        return {k: int(self.free[self.block_slice(k)].sum())
                for k in ("u_S", "u_D", "p", "lambda")}

    @property
    def n_free(self):
        return int(self.free.sum())

    @property
    def free_index(self):
        return np.flatnonzero(self.free)


def build_dof_map(mesh: Mesh, partition: Optional[InterfacePartition] = None) -> DofMap:
    if partition is None:
        partition = build_interface_partition(mesh)
    s_elems = mesh.elements_in(S)
    d_elems = mesh.elements_in(D)
    s_nodes = np.unique(mesh.triangles[s_elems])
    s_node_index = np.full(mesh.num_nodes, -1, dtype=np.int64)
    s_node_index[s_nodes] = np.arange(len(s_nodes))
    s_edges = np.unique(mesh.triangle_edges[s_elems])
    s_edge_index = np.full(mesh.num_edges, -1, dtype=np.int64)
    s_edge_index[s_edges] = np.arange(len(s_edges))
    d_edges = np.unique(mesh.triangle_edges[d_elems])
    d_edge_index = np.full(mesh.num_edges, -1, dtype=np.int64)
    d_edge_index[d_edges] = np.arange(len(d_edges))

    n_uS = 2 * len(s_nodes) + len(s_edges)
    n_uD = len(d_edges)
    n_p = mesh.num_triangles
    n_lam = len(partition.macro_nodes)

    st = mesh.triangles[s_elems]
    s_l2g = np.empty((len(s_elems), NBR), dtype=np.int64)
    for i in range(3):
        for c in range(2):
            s_l2g[:, 2 * i + c] = 2 * s_node_index[st[:, i]] + c
    s_l2g[:, 6:] = 2 * len(s_nodes) + s_edge_index[mesh.triangle_edges[s_elems]]
    s_signs = mesh.triangle_edge_signs[s_elems].astype(float)
    d_l2g = n_uS + d_edge_index[mesh.triangle_edges[d_elems]]
    d_signs = mesh.triangle_edge_signs[d_elems].astype(float)

    # lambda basis restricted to fine edges, parametrized along the chain
    chain = mesh.interface_nodes
    seg = np.linalg.norm(np.diff(mesh.nodes[chain], axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    node_pos = {int(v): i for i, v in enumerate(chain)}
    macro_pos = np.array([node_pos[int(v)] for v in partition.macro_nodes])
    nsig = len(partition.fine_edges)
    lam_l2g = np.empty((nsig, 2), dtype=np.int64)
    lam_vals = np.empty((nsig, 2, 2))
    for i in range(nsig):
        m = partition.fine_to_macro[i]
        sa, sb = arc[macro_pos[m]], arc[macro_pos[m + 1]]
        lam_l2g[i] = (m, m + 1)
        for j, s in enumerate((arc[i], arc[i + 1])):
            t = (s - sa) / (sb - sa)
            lam_vals[i, j] = (1.0 - t, t)
    lam_l2g += n_uS + n_uD + n_p
    sigma_chain = np.stack([chain[:-1], chain[1:]], axis=1)

    free = np.ones(n_uS + n_uD + n_p + n_lam, dtype=bool)
    gs_edges = mesh.edges_of_kind(GAMMA_S)
    gs_nodes = np.unique(mesh.edges[gs_edges])
    for c in range(2):
        free[2 * s_node_index[gs_nodes] + c] = False
    free[2 * len(s_nodes) + s_edge_index[gs_edges]] = False
    free[n_uS + d_edge_index[mesh.edges_of_kind(GAMMA_D)]] = False

    return DofMap(
        mesh=mesh, partition=partition, n_uS=n_uS, n_uD=n_uD, n_p=n_p, n_lam=n_lam,
        s_elems=s_elems, d_elems=d_elems, s_nodes=s_nodes, s_node_index=s_node_index,
        s_edges=s_edges, s_edge_index=s_edge_index, d_edges=d_edges,
        d_edge_index=d_edge_index, s_l2g=s_l2g, s_signs=s_signs, d_l2g=d_l2g,
        d_signs=d_signs, lam_l2g=lam_l2g, lam_vals=lam_vals, sigma_chain=sigma_chain,
        free=free)


# -- discrete solution -------------------------------------------------------

@dataclass(frozen=True)
class DiscreteSolution:
    """Coefficient vector over all dofs with field evaluation helpers."""
    dofs: DofMap
    x: np.ndarray

    def block(self, name):
        return self.x[self.dofs.block_slice(name)]

    @property
    def p(self):
        return self.block("p")

    @property
    def lam(self):
        return self.block("lambda")

    def pressure_mean(self):
        a = self.dofs.mesh.areas
        return float(np.dot(a, self.p) / a.sum())

    # element-local coefficient arrays
    def s_coeffs(self, local=None):
        """BR coefficients per S element, shape ``(nS, 9)``."""
        l2g = self.dofs.s_l2g if local is None else self.dofs.s_l2g[local]
        return self.x[l2g]

    def d_coeffs(self, local=None):
        l2g = self.dofs.d_l2g if local is None else self.dofs.d_l2g[local]
        return self.x[l2g]

    def u_S_at(self, local, bary):
        """Velocity and gradient on S elements (local indices) at barycentric points."""
        P, nrm = s_geometry(self.dofs, local)
        V, G = br_tables(P, bary, nrm)
        c = self.s_coeffs(local)
        return np.einsum("nqad,na->nqd", V, c), np.einsum("nqaij,na->nqij", G, c)

    def u_D_at(self, local, X):
        d = self.dofs
        elems = d.d_elems[local]
        P = element_vertices(d.mesh, elems)
        V, div = rt_tables(P, X, d.d_signs[local])
        c = self.d_coeffs(local)
        return np.einsum("nqad,na->nqd", V, c), np.einsum("na,na->n", div, c)

    def lam_on_sigma(self, t):
        """Multiplier on every fine interface edge at chain parameters ``t``."""
        d = self.dofs
        c = self.x[d.lam_l2g]                                    # (nsig, 2)
        end = np.einsum("ejm,em->ej", d.lam_vals, c)             # endpoint values
        t = np.asarray(t)
        return end[:, 0, None] * (1.0 - t) + end[:, 1, None] * t


def s_geometry(dofs: DofMap, local=None):
    """Vertices and signed bubble normals of S elements."""
    elems = dofs.s_elems if local is None else dofs.s_elems[local]
    P = element_vertices(dofs.mesh, elems)
    signs = dofs.s_signs if local is None else dofs.s_signs[local]
    return P, outward_normals(P) * signs[..., None]


# -- sparse system -----------------------------------------------------------

@dataclass
class SparseSystem:
    """Linear system over all dofs or over the free dofs.

    ``index`` maps rows of ``matrix`` to global dofs (``-1`` for the gauge
    multiplier). ``lifted`` holds the values of the constrained dofs.
    """
    matrix: sps.csr_matrix
    rhs: np.ndarray
    dofs: DofMap
    index: np.ndarray
    lifted: np.ndarray
    gauged: bool = False
    blocks: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape

    def expand(self, y) -> DiscreteSolution:
        """Full coefficient vector from a solution of this system."""
        x = self.lifted.copy()
        mask = self.index >= 0
        x[self.index[mask]] = y[mask]
        return DiscreteSolution(self.dofs, x)


def _coo(rows, cols, vals, shape):
    return sps.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))),
                          shape=shape).tocsr()


def _edge_points(mesh, e_ids, s, chain_pairs=None):
    """Points on edges at parameters ``s``; Sigma edges follow the chain."""
    if chain_pairs is None:
        a, b = mesh.edges[e_ids, 0], mesh.edges[e_ids, 1]
    else:
        a, b = chain_pairs[:, 0], chain_pairs[:, 1]
    A, B = mesh.nodes[a], mesh.nodes[b]
    return A[:, None, :] * (1.0 - s)[None, :, None] + B[:, None, :] * s[None, :, None]


@dataclass(frozen=True)
class SigmaTraces:
    """Basis traces on the fine interface edges at Gauss points."""
    edges: np.ndarray
    s_local: np.ndarray      # S element local index per edge
    d_local: np.ndarray      # D element local index per edge
    s: np.ndarray            # chain parameters (nqe,)
    w: np.ndarray            # weights times edge length, (nsig, nqe)
    X: np.ndarray            # (nsig, nqe, 2)
    n: np.ndarray            # n_S, (nsig, 2)
    tau: np.ndarray          # (nsig, 2)
    VS: np.ndarray           # BR values (nsig, nqe, 9, 2)
    GS: np.ndarray           # BR gradients
    VD: np.ndarray           # RT0 values (nsig, nqe, 3, 2)
    LV: np.ndarray           # lambda basis values (nsig, nqe, 2)


def sigma_traces(dofs: DofMap, degree=EDGE_DEGREE) -> SigmaTraces:
    mesh = dofs.mesh
    edges = dofs.partition.fine_edges
    s, w = line_rule(degree)
    X = _edge_points(mesh, edges, s, dofs.sigma_chain)
    s_tri = mesh.edge_triangles[edges, 0]
    d_tri = mesh.edge_triangles[edges, 1]
    s_loc = np.searchsorted(dofs.s_elems, s_tri)
    d_loc = np.searchsorted(dofs.d_elems, d_tri)
    P, nrm = s_geometry(dofs, s_loc)
    VS, GS = br_tables(P, to_barycentric(P, X), nrm)
    PD = element_vertices(mesh, d_tri)
    VD, _ = rt_tables(PD, X, dofs.d_signs[d_loc])
    LV = (dofs.lam_vals[:, 0, None, :] * (1.0 - s)[None, :, None]
          + dofs.lam_vals[:, 1, None, :] * s[None, :, None])
    L = mesh.edge_lengths[edges]
    return SigmaTraces(edges, s_loc, d_loc, s, w[None, :] * L[:, None], X,
                       mesh.edge_normals[edges], mesh.edge_tangents[edges],
                       VS, GS, VD, LV)


def convection_element_matrices(P, nrm, wc, rho, rule):
    """``rho((w.grad)u, v) + rho/2 (u div w, v)`` per S element, (n, 9, 9).

    ``wc`` holds the BR coefficients of the transporting velocity.
    """
    V, G = br_tables(P, rule.points, nrm)
    area = _areas(P)
    wq = np.einsum("nqad,na->nqd", V, wc)
    divw = np.einsum("nqaii,na->nq", G, wc)
    Gw = np.einsum("nqbij,nqj->nqbi", G, wq)
    Wt = rule.weights[None, :] * area[:, None]
    C = np.einsum("nq,nqai,nqbi->nab", Wt, V, Gw)
    C += 0.5 * np.einsum("nq,nq,nqai,nqbi->nab", Wt, divw, V, V)
    return rho * C


def stokes_element_matrices(P, nrm, mu, rule):
    """``2 mu (e(u), e(v))`` and ``-(1, div v)`` per S element."""
    V, G = br_tables(P, rule.points, nrm)
    area = _areas(P)
    E = 0.5 * (G + np.swapaxes(G, -1, -2))
    Wt = rule.weights[None, :] * area[:, None]
    A = 2.0 * mu * np.einsum("nq,nqaij,nqbij->nab", Wt, E, E)
    B = -np.einsum("nq,nqaii->na", Wt, G)
    return A, B


def darcy_element_matrices(P, signs, data: ProblemData, rule):
    """``(K^-1 u, v)`` and ``-(1, div v)`` per D element."""
    X = rule.physical_points(P)
    V, div = rt_tables(P, X, signs)
    area = _areas(P)
    Kinv = data.K_inv_at(X)
    Wt = rule.weights[None, :] * area[:, None]
    M = np.einsum("nq,nqai,nqij,nqbj->nab", Wt, V, Kinv, V)
    B = -div * area[:, None]
    return M, B


def assemble_forms(mesh: Mesh, dofs: DofMap, data: ProblemData,
                   frozen_w_S: Optional[DiscreteSolution] = None) -> SparseSystem:
    """Assemble the full saddle-point system about a frozen transport velocity."""
    if data.rho > 0 and frozen_w_S is None:
        raise AssemblyError("a frozen transport velocity is required when rho > 0")
    if dofs.mesh is not mesh:
        raise AssemblyError("dof map belongs to a different mesh")
    n = dofs.ndof
    rule = triangle_rule(VOLUME_DEGREE)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    o = dofs.offsets

    # fluid volume terms
    P, nrm = s_geometry(dofs)
    A, Bs = stokes_element_matrices(P, nrm, data.mu, rule)
    if data.rho > 0:
        A = A + convection_element_matrices(P, nrm, frozen_w_S.s_coeffs(), data.rho, rule)
    l2g = dofs.s_l2g
    rows.append(np.repeat(l2g, NBR, axis=1))
    cols.append(np.tile(l2g, (1, NBR)))
    vals.append(A.reshape(len(l2g), -1))
    prow = o["p"] + dofs.s_elems
    b_rows = [np.repeat(prow[:, None], NBR, axis=1)]
    b_cols = [l2g]
    b_vals = [Bs]
    V, _ = br_tables(P, rule.points, nrm)
    X = rule.physical_points(P)
    area = mesh.areas[dofs.s_elems]
    fS = data.f_S(X)
    np.add.at(rhs, l2g, np.einsum("q,n,nqd,nqad->na", rule.weights, area, fS, V))

    # porous volume terms
    PD = element_vertices(mesh, dofs.d_elems)
    M, Bd = darcy_element_matrices(PD, dofs.d_signs, data, rule)
    l2g = dofs.d_l2g
    rows.append(np.repeat(l2g, NRT, axis=1))
    cols.append(np.tile(l2g, (1, NRT)))
    vals.append(M.reshape(len(l2g), -1))
    prow = o["p"] + dofs.d_elems
    b_rows.append(np.repeat(prow[:, None], NRT, axis=1))
    b_cols.append(l2g)
    b_vals.append(Bd)
    XD = rule.physical_points(PD)
    VD, _ = rt_tables(PD, XD, dofs.d_signs)
    fD = data.f_D(XD)
    np.add.at(rhs, l2g, np.einsum("q,n,nqd,nqad->na", rule.weights,
                                  mesh.areas[dofs.d_elems], fD, VD))

    # interface terms
    tr = sigma_traces(dofs)
    beta = data.bjs_coefficient(tr.X, tr.tau[:, None, :])
    vt = np.einsum("eqad,ed->eqa", tr.VS, tr.tau)
    vn = np.einsum("eqad,ed->eqa", tr.VS, tr.n)
    dn = -np.einsum("eqad,ed->eqa", tr.VD, tr.n)              # v_D . n_D
    sl2g = dofs.s_l2g[tr.s_local]
    dl2g = dofs.d_l2g[tr.d_local]
    bjs = np.einsum("eq,eq,eqa,eqb->eab", tr.w, beta, vt, vt)
    rows.append(np.repeat(sl2g, NBR, axis=1))
    cols.append(np.tile(sl2g, (1, NBR)))
    vals.append(bjs.reshape(len(sl2g), -1))
    cS = np.einsum("eq,eqa,eqm->ema", tr.w, vn, tr.LV)
    cD = np.einsum("eq,eqa,eqm->ema", tr.w, dn, tr.LV)
    lam = dofs.lam_l2g
    b_rows += [np.repeat(lam[:, :, None], NBR, axis=2), np.repeat(lam[:, :, None], NRT, axis=2)]
    b_cols += [np.repeat(sl2g[:, None, :], 2, axis=1), np.repeat(dl2g[:, None, :], 2, axis=1)]
    b_vals += [cS, cD]
    if data.g_nf is not None:
        np.add.at(rhs, sl2g, -np.einsum("eq,eq,eqa->ea", tr.w, data.g_nf(tr.X), vn))
    if data.g_bjs is not None:
        np.add.at(rhs, sl2g, np.einsum("eq,eq,eqa->ea", tr.w, data.g_bjs(tr.X), vt))
    if data.g_mass is not None:
        np.add.at(rhs, lam, np.einsum("eq,eq,eqm->em", tr.w, data.g_mass(tr.X), tr.LV))

    Br = np.concatenate([np.ravel(r) for r in b_rows])
    Bc = np.concatenate([np.ravel(c) for c in b_cols])
    Bv = np.concatenate([np.ravel(v) for v in b_vals])
    rows = np.concatenate([np.ravel(r) for r in rows] + [Br, Bc])
    cols = np.concatenate([np.ravel(c) for c in cols] + [Bc, Br])
    vals = np.concatenate([np.ravel(v) for v in vals] + [Bv, Bv])
    K = _coo(rows, cols, vals, (n, n))
    lifted = boundary_values(mesh, dofs, data)
    return SparseSystem(K, rhs, dofs, np.arange(n), lifted, gauged=False)


def reduce_system(system: SparseSystem) -> SparseSystem:
    """Restrict to free dofs, moving constrained values to the right-hand side."""
    d = system.dofs
    free = d.free_index
    fixed = np.flatnonzero(~d.free)
    A = system.matrix
    b = system.rhs[free] - A[free][:, fixed] @ system.lifted[fixed]
    return SparseSystem(A[free][:, free].tocsr(), b, d, free, system.lifted.copy())


def apply_pressure_gauge(system: SparseSystem) -> SparseSystem:
    """Append the multiplier row/column enforcing ``sum_T |T| p_T = 0``."""
    if system.gauged:
        return system
    d = system.dofs
    o = d.offsets
    ip = system.index - o["p"]
    is_p = (ip >= 0) & (ip < d.n_p)
    c = np.zeros(system.matrix.shape[0])
    c[is_p] = d.mesh.areas[ip[is_p]]
    col = sps.csr_matrix(c[:, None])
    A = sps.bmat([[system.matrix, col], [col.T, None]], format="csr")
    return SparseSystem(A, np.append(system.rhs, 0.0), d,
                        np.append(system.index, -1), system.lifted, gauged=True)


def assemble_gauged(mesh, dofs, data, frozen_w_S=None) -> SparseSystem:
    return apply_pressure_gauge(reduce_system(assemble_forms(mesh, dofs, data, frozen_w_S)))


# -- interpolation -------------------------------------------------------------

def _edge_rule_points(mesh, e_ids, degree=INTERP_DEGREE):
    s, w = line_rule(degree)
    return s, w, _edge_points(mesh, e_ids, s)


def _br_interp_values(mesh, u, node_ids, edge_ids):
    """Vertex values and bubble coefficients of the BR interpolant of ``u``."""
    vals = u(mesh.nodes[node_ids])
    s, w, X = _edge_rule_points(mesh, edge_ids)
    a, b = mesh.edges[edge_ids, 0], mesh.edges[edge_ids, 1]
    ua, ub = u(mesh.nodes[a]), u(mesh.nodes[b])
    lin = ua[:, None, :] * (1.0 - s)[None, :, None] + ub[:, None, :] * s[None, :, None]
    n = mesh.edge_normals[edge_ids]
    moment = np.einsum("q,eqd,ed->e", w, u(X) - lin, n)     # mean over the edge
    # int_E eta_a eta_b = |E| / 6
    return vals, 6.0 * moment


def _rt_interp_values(mesh, u, edge_ids, flux=None):
    s, w, X = _edge_rule_points(mesh, edge_ids)
    n = mesh.edge_normals[edge_ids]
    if flux is None:
        return np.einsum("q,eqd,ed->e", w, u(X), n)
    return np.einsum("q,eq->e", w, flux(X, np.broadcast_to(n[:, None, :], X.shape)))


def boundary_values(mesh: Mesh, dofs: DofMap, data: ProblemData) -> np.ndarray:
    """Full-length vector holding the values of the constrained dofs."""
    x = np.zeros(dofs.ndof)
    if data.g_S is not None:
        e = mesh.edges_of_kind(GAMMA_S)
        nodes = np.unique(mesh.edges[e])
        vals, bub = _br_interp_values(mesh, data.g_S, nodes, e)
        for c in range(2):
            x[2 * dofs.s_node_index[nodes] + c] = vals[:, c]
        x[2 * len(dofs.s_nodes) + dofs.s_edge_index[e]] = bub
    if data.g_N is not None:
        e = mesh.edges_of_kind(GAMMA_D)
        x[dofs.n_uS + dofs.d_edge_index[e]] = _rt_interp_values(mesh, None, e, data.g_N)
    return x


def interpolate(case: ManufacturedCase, mesh: Mesh, dofs: DofMap) -> DiscreteSolution:
    """Canonical interpolant: vertex values and normal moments (BR), flux
    means (RT0), cell means (P0) and macro-node values (lambda)."""
    x = np.zeros(dofs.ndof)
    vals, bub = _br_interp_values(mesh, case.u_S, dofs.s_nodes, dofs.s_edges)
    x[0:2 * len(dofs.s_nodes):2] = vals[:, 0]
    x[1:2 * len(dofs.s_nodes):2] = vals[:, 1]
    x[2 * len(dofs.s_nodes):dofs.n_uS] = bub
    x[dofs.block_slice("u_D")] = _rt_interp_values(mesh, case.u_D, dofs.d_edges)
    rule = triangle_rule(INTERP_DEGREE)
    p = np.empty(mesh.num_triangles)
    for sub, fn in ((S, case.p_S), (D, case.p_D)):
        el = mesh.elements_in(sub)
        X = rule.physical_points(element_vertices(mesh, el))
        p[el] = fn(X) @ rule.weights
    x[dofs.block_slice("p")] = p
    x[dofs.block_slice("lambda")] = case.p_D(mesh.nodes[dofs.partition.macro_nodes])
    return DiscreteSolution(dofs, x)


def write_matrix_market(system: SparseSystem, path):
    """Dump the system matrix in MatrixMarket coordinate format."""
    scipy.io.mmwrite(str(path), system.matrix.tocoo(), precision=17)
