"""Conforming triangulations of the stacked Stokes/Darcy geometry.

A :class:`Mesh` holds the node coordinates, counterclockwise triangles with
their subdomain tag (``S`` = free fluid, ``D`` = porous medium) and the
newest-vertex-bisection bookkeeping, together with the full edge topology:
edge classification, fixed unit normals ``n_E`` and tangents ``tau_E``,
element/edge adjacency and the ordered chain of interface edges.

Orientation conventions
-----------------------
* Local edge ``k`` of a triangle is the edge opposite its local vertex ``k``.
* Interior edges: ``n_E`` is the right-hand normal of the edge traversed from
  its lower to its higher node index; ``edge_triangles[e, 0]`` is the element
  ``n_E`` points out of, ``edge_triangles[e, 1]`` the one it points into.
* Interface edges: ``n_E = n_S`` (outward from the fluid side), element 0 is
  the ``S`` triangle and element 1 the ``D`` triangle.
* Boundary edges: ``n_E`` is the outward normal, element 1 is ``-1``.
* ``tau_E = (-n_y, n_x)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sps

S, D = 0, 1
SUBDOMAIN_NAMES = ("S", "D")

INTERIOR_S, INTERIOR_D, GAMMA_S, GAMMA_D, SIGMA = range(5)
EDGE_KIND_NAMES = ("interior_S", "interior_D", "Gamma_S", "Gamma_D", "Sigma")

DEFAULT_MIN_ANGLE = 20.0


class MeshError(ValueError):
    """Raised for invalid mesh input or a violated mesh invariant."""


class TopologyError(MeshError):
    """Raised for non-manifold or otherwise inconsistent connectivity."""


class RefinementError(MeshError):
    """Raised when the conformity closure does not terminate."""


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def signed_areas(nodes, triangles):
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def min_angles(nodes, triangles):
    """Smallest interior angle of every triangle, in degrees."""
    p = nodes[triangles]
    out = np.full(len(triangles), np.inf)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cos = np.einsum("ij,ij->i", a, b) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        out = np.minimum(out, np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return out


@dataclass(frozen=True)
class EdgeTopology:
    edges: np.ndarray            # (NE, 2) node ids, ascending
    triangle_edges: np.ndarray   # (M, 3) global edge of local edge k
    triangle_edge_signs: np.ndarray  # (M, 3) +1 if n_E is outward from T
    edge_triangles: np.ndarray   # (NE, 2), -1 for a missing neighbour
    edge_kind: np.ndarray        # (NE,) one of INTERIOR_S ... SIGMA
    edge_normals: np.ndarray     # (NE, 2)
    edge_tangents: np.ndarray    # (NE, 2)
    edge_lengths: np.ndarray     # (NE,)
    interface_edges: np.ndarray  # ordered chain along Sigma
    interface_nodes: np.ndarray  # len(interface_edges) + 1 nodes (open chain)


def build_edge_topology(nodes, triangles, subdomain) -> EdgeTopology:
    """Compute edges, classification, normals and adjacency.

    ``triangles`` must already be counterclockwise.
    """
    nodes = np.asarray(nodes, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    subdomain = np.asarray(subdomain)
    m = len(triangles)

    # local edge k is opposite vertex k, traversed counterclockwise
    first = triangles[:, [1, 2, 0]]
    second = triangles[:, [2, 0, 1]]
    pairs = np.sort(np.stack([first, second], axis=-1).reshape(-1, 2), axis=1)
    edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True,
                                       return_counts=True)
    inverse = inverse.reshape(-1)
    if np.any(counts > 2):
        bad = edges[np.argmax(counts > 2)]
        raise TopologyError(f"non-manifold edge {tuple(bad)} shared by "
                            f"{counts.max()} triangles")
    tri_edges = inverse.reshape(m, 3)
    ne = len(edges)

    # ascending traversal of a ccw local edge means the ascending right-hand
    # normal points out of that triangle
    ascending = (first < second).reshape(-1)
    owner = np.repeat(np.arange(m), 3)
    edge_tris = np.full((ne, 2), -1, dtype=np.int64)
    slot_fill = np.zeros(ne, dtype=np.int64)
    outward_owner = np.full(ne, -1, dtype=np.int64)
    for idx in range(3 * m):
        e = inverse[idx]
        edge_tris[e, slot_fill[e]] = owner[idx]
        slot_fill[e] += 1
        if ascending[idx]:
            if outward_owner[e] >= 0:
                raise TopologyError(
                    f"inconsistent orientation on edge {tuple(edges[e])}")
            outward_owner[e] = owner[idx]

    kind = np.empty(ne, dtype=np.int8)
    boundary = edge_tris[:, 1] < 0
    sub0 = subdomain[edge_tris[:, 0]]
    sub1 = np.where(boundary, -1, subdomain[np.maximum(edge_tris[:, 1], 0)])
    kind[boundary & (sub0 == S)] = GAMMA_S
    kind[boundary & (sub0 == D)] = GAMMA_D
    inner = ~boundary
    kind[inner & (sub0 == sub1) & (sub0 == S)] = INTERIOR_S
    kind[inner & (sub0 == sub1) & (sub0 == D)] = INTERIOR_D
    sigma = inner & (sub0 != sub1)
    kind[sigma] = SIGMA

    # reorder incident elements per the orientation conventions
    tris_sorted = edge_tris.copy()
    interior = inner & ~sigma
    if np.any(interior & (outward_owner < 0)):
        raise TopologyError("interior edge without a consistent orientation")
    swap = interior & (tris_sorted[:, 0] != outward_owner)
    tris_sorted[swap] = tris_sorted[swap][:, ::-1]
    swap = sigma & (subdomain[tris_sorted[:, 0]] != S)
    tris_sorted[swap] = tris_sorted[swap][:, ::-1]

    vec = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    lengths = np.linalg.norm(vec, axis=1)
    if np.any(lengths <= 0):
        raise MeshError("zero-length edge")
    normals = np.stack([vec[:, 1], -vec[:, 0]], axis=1) / lengths[:, None]
    # flip where the ascending normal does not point out of element 0
    flip = outward_owner != tris_sorted[:, 0]
    normals[flip] *= -1.0
    tangents = np.stack([-normals[:, 1], normals[:, 0]], axis=1)

    signs = np.where(tris_sorted[tri_edges, 0] == np.arange(m)[:, None], 1, -1)

    chain_edges, chain_nodes = _order_chain(nodes, edges, np.flatnonzero(sigma))
    return EdgeTopology(
        edges=_freeze(edges), triangle_edges=_freeze(tri_edges),
        triangle_edge_signs=_freeze(signs.astype(np.int8)),
        edge_triangles=_freeze(tris_sorted), edge_kind=_freeze(kind),
        edge_normals=_freeze(normals), edge_tangents=_freeze(tangents),
        edge_lengths=_freeze(lengths), interface_edges=_freeze(chain_edges),
        interface_nodes=_freeze(chain_nodes))


def _order_chain(nodes, edges, chain):
    """Order a set of edges into a connected open chain.

    The walk starts at the endpoint with the lexicographically smallest
    coordinates, which makes the order independent of the node numbering.
    """
    if len(chain) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    incident: dict[int, list[int]] = {}
    for e in chain:
        for v in edges[e]:
            incident.setdefault(int(v), []).append(int(e))
    if any(len(es) > 2 for es in incident.values()):
        raise TopologyError("interface is branched")
    ends = [v for v, es in incident.items() if len(es) == 1]
    candidates = ends if ends else list(incident)
    start = min(candidates, key=lambda v: (nodes[v, 0], nodes[v, 1]))
    order_e, order_v = [], [start]
    seen = set()
    v = start
    while True:
        nxt = [e for e in incident[v] if e not in seen]
        if not nxt:
            break
        e = nxt[0]
        seen.add(e)
        order_e.append(e)
        a, b = edges[e]
        v = int(b if a == v else a)
        order_v.append(v)
    if len(order_e) != len(chain):
        raise TopologyError("interface edges do not form a connected chain")
    return np.array(order_e, dtype=np.int64), np.array(order_v, dtype=np.int64)


class Mesh:
    """Immutable two-subdomain triangulation with edge topology.

    Parameters
    ----------
    nodes : (N, 2) array
    triangles : (M, 3) int array; reordered counterclockwise if needed.
    subdomain : (M,) array of ``S``/``D`` tags (0/1).
    refinement_edge : (M,) local index of the newest vertex; the edge
        opposite it is bisected first. Defaults to the longest edge.
    min_angle : float
        Shape-regularity floor in degrees, asserted on construction.
    """

    def __init__(self, nodes, triangles, subdomain, refinement_edge=None,
                 min_angle=DEFAULT_MIN_ANGLE):
        nodes = np.array(nodes, dtype=float)
        tris = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        sub = np.array(subdomain, dtype=np.int8).reshape(-1)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (N, 2)")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("non-finite node coordinates")
        if len(sub) != len(tris):
            raise MeshError("one subdomain tag per triangle required")
        if not np.all(np.isin(sub, (S, D))):
            raise MeshError("subdomain tags must be S (0) or D (1)")
        if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
            raise MeshError("triangle references a missing node")

        if refinement_edge is None:
            p = nodes[tris]
            opp = np.stack([np.linalg.norm(p[:, (k + 2) % 3] - p[:, (k + 1) % 3],
                                           axis=1) for k in range(3)], axis=1)
            ref = np.argmax(opp, axis=1)
        else:
            ref = np.array(refinement_edge, dtype=np.int64).reshape(-1)

        area = signed_areas(nodes, tris)
        if np.any(area == 0):
            raise MeshError("degenerate triangle")
        cw = area < 0
        tris[cw] = tris[cw][:, [0, 2, 1]]
        ref = ref.copy()
        ref[cw] = np.array([0, 2, 1])[ref[cw]]
        area = np.abs(area)

        angles = min_angles(nodes, tris)
        if np.any(angles < min_angle - 1e-9):
            raise MeshError(f"minimum angle {angles.min():.3f} deg below floor "
                            f"{min_angle} deg")

        self.nodes = _freeze(nodes)
        self.triangles = _freeze(tris)
        self.subdomain = _freeze(sub)
        self.refinement_edge = _freeze(ref.astype(np.int8))
        self.min_angle = float(min_angle)
        self.areas = _freeze(area)
        p = nodes[tris]
        diam = np.max(np.stack([np.linalg.norm(p[:, i] - p[:, j], axis=1)
                                for i, j in ((0, 1), (1, 2), (2, 0))]), axis=0)
        self.diameters = _freeze(diam)

        topo = build_edge_topology(nodes, tris, sub)
        self.topology = topo
        self.edges = topo.edges
        self.triangle_edges = topo.triangle_edges
        self.triangle_edge_signs = topo.triangle_edge_signs
        self.edge_triangles = topo.edge_triangles
        self.edge_kind = topo.edge_kind
        self.edge_normals = topo.edge_normals
        self.edge_tangents = topo.edge_tangents
        self.edge_lengths = topo.edge_lengths
        self.interface_edges = topo.interface_edges
        self.interface_nodes = topo.interface_nodes

    # -- sizes ---------------------------------------------------------
    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def h_max(self):
        return float(self.diameters.max())

    def elements_in(self, sub):
        return np.flatnonzero(self.subdomain == sub)

    def edges_of_kind(self, *kinds):
        return np.flatnonzero(np.isin(self.edge_kind, kinds))

    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)

    def subdomain_nodes(self, sub):
        return np.unique(self.triangles[self.subdomain == sub])

    def subdomain_edges(self, sub):
        return np.unique(self.triangle_edges[self.subdomain == sub])

    # -- adjacency -----------------------------------------------------
    def node_triangle_matrix(self):
        m = self.num_triangles
        rows = self.triangles.reshape(-1)
        cols = np.repeat(np.arange(m), 3)
        return sps.csr_matrix((np.ones(3 * m), (rows, cols)),
                              shape=(self.num_nodes, m))

    def edge_neighbours(self, t):
        """Triangles sharing an edge with ``t`` (any subdomain)."""
        out = []
        for e in self.triangle_edges[t]:
            for s in self.edge_triangles[e]:
                if s >= 0 and s != t:
                    out.append(int(s))
        return out

    def renumbered(self, node_perm):
        """Same mesh with node ``i`` renamed ``node_perm[i]``."""
        node_perm = np.asarray(node_perm)
        nodes = np.empty_like(self.nodes)
        nodes[node_perm] = self.nodes
        return Mesh(nodes, node_perm[self.triangles], self.subdomain,
                    self.refinement_edge, self.min_angle)

    def __repr__(self):
        return (f"Mesh(nodes={self.num_nodes}, triangles={self.num_triangles}, "
                f"edges={self.num_edges}, sigma_edges={len(self.interface_edges)})")


def build_structured_mesh(width=1.0, n0=1, min_angle=DEFAULT_MIN_ANGLE):
    """Two stacked rectangles: ``Omega_D = (0,w)x(0,1)`` below ``Omega_S = (0,w)x(1,2)``.

    Each unit of length is divided into ``n0`` cells, every cell split along
    its rising diagonal; the diagonals are the initial refinement edges.
    """
    if int(n0) != n0 or n0 < 1:
        raise MeshError(f"n0 must be a positive integer, got {n0!r}")
    if not width > 0:
        raise MeshError(f"width must be positive, got {width!r}")
    n0 = int(n0)
    nx = max(1, int(round(width * n0)))
    ny = 2 * n0
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, 2.0, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    def nid(i, j):
        return j * (nx + 1) + i

    tris, sub, ref = [], [], []
    for j in range(ny):
        tag = D if j < n0 else S
        for i in range(nx):
            p00, p10, p11, p01 = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            tris += [(p00, p10, p11), (p00, p11, p01)]
            sub += [tag, tag]
            ref += [1, 2]
    return Mesh(nodes, tris, sub, ref, min_angle=min_angle)


def refine(mesh: Mesh, marked: Iterable[int], max_closure_sweeps=None) -> Mesh:
    """Newest-vertex bisection of the marked elements plus conformity closure.

    Every marked element is bisected at least once; neighbours are bisected
    as needed to remove hanging nodes. Returns a new mesh.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.num_triangles:
        raise MeshError("marked element id out of range")
    te = mesh.triangle_edges
    ref = mesh.refinement_edge.astype(np.int64)
    rows = np.arange(mesh.num_triangles)
    edge_marked = np.zeros(mesh.num_edges, dtype=bool)
    edge_marked[te[marked, ref[marked]]] = True

    cap = mesh.num_triangles + 1 if max_closure_sweeps is None else max_closure_sweeps
    sweeps = 0
    while True:
        has = edge_marked[te].any(axis=1)
        need = has & ~edge_marked[te[rows, ref]]
        if not need.any():
            break
        sweeps += 1
        if sweeps > cap:
            raise RefinementError(f"closure did not terminate within {cap} sweeps")
        edge_marked[te[need, ref[need]]] = True

    nodes = [tuple(p) for p in mesh.nodes]
    midpoint: dict[tuple[int, int], int] = {}
    for e in np.flatnonzero(edge_marked):
        a, b = mesh.edges[e]
        midpoint[(int(a), int(b))] = len(nodes)
        nodes.append(tuple(0.5 * (mesh.nodes[a] + mesh.nodes[b])))

    out_tris, out_sub, out_ref = [], [], []
    stack = [(tuple(int(v) for v in mesh.triangles[t]), int(ref[t]),
              int(mesh.subdomain[t])) for t in range(mesh.num_triangles)][::-1]
    while stack:
        verts, r, tag = stack.pop()
        a, b, c = verts[r], verts[(r + 1) % 3], verts[(r + 2) % 3]
        key = (b, c) if b < c else (c, b)
        mid = midpoint.get(key)
        if mid is None:
            out_tris.append(verts)
            out_sub.append(tag)
            out_ref.append(r)
            continue
        # children keep counterclockwise order; the midpoint is the newest vertex
        stack.append(((a, mid, c), 1, tag))
        stack.append(((a, b, mid), 2, tag))
    return Mesh(np.array(nodes), out_tris, out_sub, out_ref,
                min_angle=mesh.min_angle)


def refine_uniform(mesh: Mesh, generations=2) -> Mesh:
    """Bisect every element ``generations`` times (two halve ``h``)."""
    for _ in range(generations):
        mesh = refine(mesh, range(mesh.num_triangles))
    return mesh


# -- interface partition ------------------------------------------------

@dataclass(frozen=True)
class InterfacePartition:
    """Fine interface edges and the coarser partition that carries lambda.

    ``macro_edges`` lists, for each macro edge, the chain of node ids it
    covers (endpoints plus interior nodes). ``fine_to_macro`` maps the
    position of a fine edge in ``fine_edges`` to its macro edge.
    """
    fine_edges: np.ndarray
    macro_edges: tuple
    odd_merge_applied: bool
    fine_to_macro: np.ndarray
    macro_nodes: np.ndarray      # endpoints of the macro edges, in order

    @property
    def num_macro(self):
        return len(self.macro_edges)


def build_interface_partition(mesh: Mesh) -> InterfacePartition:
    """Pair adjacent interface edges; an odd count first merges the leading pair."""
    fine = np.asarray(mesh.interface_edges)
    chain = np.asarray(mesh.interface_nodes)
    n = len(fine)
    if n == 0:
        raise TopologyError("mesh has no interface edges")
    groups: list[list[int]] = [[i] for i in range(n)]
    odd = False
    if n % 2 == 1 and n > 1:
        groups = [[0, 1]] + [[i] for i in range(2, n)]
        odd = True
    if len(groups) > 1:
        groups = [groups[i] + groups[i + 1] for i in range(0, len(groups), 2)]
    macro, f2m = [], np.empty(n, dtype=np.int64)
    for g_id, g in enumerate(groups):
        macro.append(tuple(int(v) for v in chain[g[0]:g[-1] + 2]))
        f2m[g] = g_id
    macro_nodes = np.array([m[0] for m in macro] + [macro[-1][-1]], dtype=np.int64)
    return InterfacePartition(fine_edges=_freeze(fine.copy()), macro_edges=tuple(macro),
                              odd_merge_applied=odd, fine_to_macro=_freeze(f2m),
                              macro_nodes=_freeze(macro_nodes))


# -- patches --------------------------------------------------------------

PATCH_KINDS = ("omega_T", "omega_E", "omega_x", "delta_T", "delta_E", "tilde_T")


@dataclass(frozen=True)
class Patch:
    kind: str
    center: int
    members: frozenset


def patch(mesh: Mesh, kind: str, center_id: int) -> Patch:
    """Element patches around an element, edge or node.

    ``omega_T``  T and its edge neighbours in the same subdomain.
    ``omega_E``  the elements having E as an edge.
    ``omega_x``  the elements having x as a vertex.
    ``delta_T``  same-subdomain elements touching T.
    ``delta_E``  elements touching E, restricted to the subdomains of E's
                 incident elements.
    ``tilde_T``  all elements touching T, across the interface.
    """
    c = int(center_id)
    if kind == "omega_T":
        sub = mesh.subdomain[c]
        mem = {c} | {s for s in mesh.edge_neighbours(c) if mesh.subdomain[s] == sub}
    elif kind == "omega_E":
        mem = {int(s) for s in mesh.edge_triangles[c] if s >= 0}
    elif kind == "omega_x":
        mem = set(np.flatnonzero(np.any(mesh.triangles == c, axis=1)).tolist())
    elif kind in ("delta_T", "tilde_T"):
        touch = np.any(np.isin(mesh.triangles, mesh.triangles[c]), axis=1)
        if kind == "delta_T":
            touch &= mesh.subdomain == mesh.subdomain[c]
        mem = set(np.flatnonzero(touch).tolist())
    elif kind == "delta_E":
        touch = np.any(np.isin(mesh.triangles, mesh.edges[c]), axis=1)
        subs = {int(mesh.subdomain[s]) for s in mesh.edge_triangles[c] if s >= 0}
        touch &= np.isin(mesh.subdomain, list(subs))
        mem = set(np.flatnonzero(touch).tolist())
    else:
        raise ValueError(f"unknown patch kind {kind!r}; expected one of {PATCH_KINDS}")
    return Patch(kind, c, frozenset(int(m) for m in mem))


# -- plain-text mesh format ---------------------------------------------------

def read_mesh_text(path, **kwargs) -> Mesh:
    """Read the ``nodes N`` / ``elements M`` text format.

    After the two header lines come ``N`` lines ``x y`` and ``M`` lines
    ``v0 v1 v2 tag`` with ``tag`` in ``{S, D}``. ``#`` starts a comment.
    """
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    # the header may sit on one line ("nodes N / elements M") or two
    header: dict[str, int] = {}
    pos = 0
    while len(header) < 2:
        if pos >= len(lines):
            raise MeshError(f"{path}: missing header")
        tokens = lines[pos].replace("/", " ").split()
        pos += 1
        if len(tokens) % 2:
            raise MeshError(f"{path}: malformed header line {lines[pos - 1]!r}")
        for key, val in zip(tokens[::2], tokens[1::2]):
            key = key.lower()
            if key not in ("nodes", "elements"):
                raise MeshError(f"{path}: unknown header key {key!r}")
            try:
                header[key] = int(val)
            except ValueError:
                raise MeshError(f"{path}: bad count {val!r}") from None
    body = lines[pos:]
    n, m = header["nodes"], header["elements"]
    if len(body) < n + m:
        raise MeshError(f"{path}: expected {n} node and {m} element lines")
    nodes = np.array([[float(v) for v in ln.split()[:2]] for ln in body[:n]])
    tris, tags = [], []
    for ln in body[n:n + m]:
        parts = ln.split()
        if len(parts) != 4 or parts[3] not in SUBDOMAIN_NAMES:
            raise MeshError(f"{path}: bad element line {ln!r}")
        tris.append([int(v) for v in parts[:3]])
        tags.append(SUBDOMAIN_NAMES.index(parts[3]))
    return Mesh(nodes, tris, tags, **kwargs)


def write_mesh_text(mesh: Mesh, path):
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.num_nodes}\nelements {mesh.num_triangles}\n")
        for x, y in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for t, tag in zip(mesh.triangles, mesh.subdomain):
            fh.write(f"{t[0]} {t[1]} {t[2]} {SUBDOMAIN_NAMES[tag]}\n")
