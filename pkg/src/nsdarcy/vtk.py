"""Legacy ASCII VTK output for triangle meshes, with a matching reader."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretization import DiscreteSolution
from .mesh import Mesh

VTK_TRIANGLE = 5


def nodal_velocity(sol: DiscreteSolution) -> np.ndarray:
    """Velocity at mesh nodes: BR vertex values on fluid nodes, the average
    of the adjacent RT0 fields on porous nodes. Interface nodes take the
    fluid value."""
    d = sol.dofs
    mesh = d.mesh
    out = np.zeros((mesh.num_nodes, 2))
    if len(d.d_elems):
        tri = mesh.triangles[d.d_elems]
        X = mesh.nodes[tri]                                        # (n, 3, 2)
        u, _ = sol.u_D_at(np.arange(len(d.d_elems)), X)
        acc = np.zeros((mesh.num_nodes, 2))
        cnt = np.zeros(mesh.num_nodes)
        np.add.at(acc, tri.ravel(), u.reshape(-1, 2))
        np.add.at(cnt, tri.ravel(), 1.0)
        hit = cnt > 0
        out[hit] = acc[hit] / cnt[hit, None]
    if len(d.s_elems):
        tri = mesh.triangles[d.s_elems]
        bary = np.eye(3)
        u, _ = sol.u_S_at(np.arange(len(d.s_elems)), bary)          # (n, 3, 2)
        out[tri.ravel()] = u.reshape(-1, 2)
    return out


def write_vtk(path, mesh: Mesh, point_data=None, cell_data=None, title="nsdarcy"):
    """Write an unstructured grid; data values are printed with 17 digits."""
    point_data = point_data or {}
    cell_data = cell_data or {}
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.num_nodes} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.nodes]
    M = mesh.num_triangles
    lines.append(f"CELLS {M} {4 * M}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {M}")
    lines += [str(VTK_TRIANGLE)] * M
    for header, n, data in (("POINT_DATA", mesh.num_nodes, point_data),
                            ("CELL_DATA", M, cell_data)):
        if not data:
            continue
        lines.append(f"{header} {n}")
        for name, values in data.items():
            v = np.asarray(values)
            if len(v) != n:
                raise ValueError(f"{name}: expected {n} values, got {len(v)}")
            if v.ndim == 2:
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(f"{c:.17g}" for c in (*row, 0.0)) for row in v]
            else:
                kind = "int" if np.issubdtype(v.dtype, np.integer) else "double"
                lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
                lines += [str(int(x)) if kind == "int" else f"{x:.17g}" for x in v]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc


def export_vtk(path, mesh: Mesh, solution: DiscreteSolution, indicators=None):
    """Velocities at points; pressure, subdomain, ``Theta_T`` and ``zeta_T`` per cell."""
    cells = {"pressure": solution.p, "subdomain": mesh.subdomain.astype(np.int64)}
    if indicators is not None:
        cells["theta"] = indicators.theta
        cells["zeta"] = np.sqrt(indicators.zeta_sq)
    write_vtk(path, mesh, {"velocity": nodal_velocity(solution)}, cells)


@dataclass
class VtkGrid:
    points: np.ndarray
    cells: np.ndarray
    cell_types: np.ndarray
    point_data: dict = field(default_factory=dict)
    cell_data: dict = field(default_factory=dict)


def read_vtk(path) -> VtkGrid:
    """Reader for the subset of the legacy format written by ``write_vtk``."""
    with open(path) as fh:
        tok = fh.read().split("\n")
    i = 4
    if not tok[3].startswith("DATASET UNSTRUCTURED_GRID"):
        raise ValueError(f"{path}: not an unstructured grid")

    def take(n):
        nonlocal i
        out = tok[i:i + n]
        i += n
        return out

    n = int(take(1)[0].split()[1])
    pts = np.array([[float(c) for c in ln.split()] for ln in take(n)])
    m = int(take(1)[0].split()[1])
    cells = np.array([[int(c) for c in ln.split()[1:]] for ln in take(m)], dtype=np.int64)
    take(1)
    types = np.array([int(c) for c in take(m)], dtype=np.int64)
    grid = VtkGrid(pts, cells, types)
    target = None
    while i < len(tok) and tok[i].strip():
        head = tok[i].split()
        i += 1
        if head[0] == "POINT_DATA":
            target, count = grid.point_data, int(head[1])
        elif head[0] == "CELL_DATA":
            target, count = grid.cell_data, int(head[1])
        elif head[0] == "VECTORS":
            target[head[1]] = np.array([[float(c) for c in ln.split()] for ln in take(count)])
        elif head[0] == "SCALARS":
            take(1)
            conv = int if head[2] == "int" else float
            target[head[1]] = np.array([conv(c) for c in take(count)])
        else:
            raise ValueError(f"{path}: unexpected section {head[0]!r}")
    return grid
