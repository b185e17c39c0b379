import numpy as np
import pytest
from scipy.integrate import dblquad

from nsdarcy.discretization import DiscreteSolution, build_dof_map, interpolate
from nsdarcy.estimator import (D_TERMS, S_TERMS, TERMS, assemble_indicators, darcy_curl,
                               efficiency_norm, element_residual_D, element_residual_S,
                               interface_terms, local_efficiency_ratios, pressure_jumps,
                               project_data, stress_jumps, write_indicator_csv)
from nsdarcy.mesh import D, S, Mesh, build_structured_mesh, refine, refine_uniform
from nsdarcy.model import ManufacturedCase, ProblemData, make_manufactured
from nsdarcy.norms import h_half_norm, slobodeckij_seminorm_sq
from nsdarcy.quadrature import triangle_rule
from nsdarcy.solver import solve_stationary

from oracles import (BROracle, consistency_problem, oracle_indicators, perturbed_mesh,
                     polynomial_data)

RNG = np.random.default_rng(11)


def mesh_dofs(n0=2, marks=()):
    m = build_structured_mesh(1.0, n0)
    if marks:
        m = refine(m, marks)
    return m, build_dof_map(m)


def zero_fields():
    z2 = lambda x: np.zeros(np.shape(x)[:-1] + (2,))
    z22 = lambda x: np.zeros(np.shape(x)[:-1] + (2, 2))
    z = lambda x: np.zeros(np.shape(x)[:-1])
    one = lambda x: np.ones(np.shape(x)[:-1])
    return z2, z22, z, one


# -- data projection ----------------------------------------------------------------------

def test_projection_of_quadratic_on_reference_triangle():
    m = Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [S])
    data = ProblemData(f_S=lambda x: np.stack([x[..., 0] ** 2, 0 * x[..., 0]], -1))
    proj = project_data(m, data)
    assert np.allclose(proj.f_S_mean, [[1 / 6, 0.0]], atol=1e-15)


def test_projection_reproduces_constants_and_linears():
    m, d = mesh_dofs(2, (3,))
    lin = lambda x: np.stack([1 + 2 * x[..., 0] - x[..., 1], 0.5 * x[..., 1]], -1)
    data = ProblemData(f_S=lambda x: np.broadcast_to([1.5, -2.0], np.shape(x)).copy(),
                       f_D=lin, curl_f_D=lambda x: np.ones(np.shape(x)[:-1]))
    proj = project_data(m, data, d.s_elems, d.d_elems)
    assert np.allclose(proj.f_S_mean, [1.5, -2.0])
    assert np.allclose(proj.f_D_nodal, lin(m.nodes[m.triangles[d.d_elems]]), atol=1e-13)
    field, summary = assemble_indicators(m, DiscreteSolution(d, np.zeros(d.ndof)), data)
    assert summary.zeta < 1e-13 and np.all(field.zeta_sq < 1e-26)


def test_oscillation_decreases_under_refinement():
    data = make_manufactured("smooth_trig").data
    m = build_structured_mesh(1.0, 2)
    zetas = []
    for _ in range(4):
        d = build_dof_map(m)
        zetas.append(assemble_indicators(m, DiscreteSolution(d, np.zeros(d.ndof)), data)[1].zeta)
        m = refine_uniform(m)
    assert all(a > b for a, b in zip(zetas, zetas[1:]))


# -- element residuals -------------------------------------------------------------------------

def test_fluid_residual_of_linear_field_is_projected_data():
    m, d = mesh_dofs(2)
    x = np.zeros(d.ndof)
    x[:2 * len(d.s_nodes)] = RNG.normal(size=2 * len(d.s_nodes))
    data = ProblemData(f_S=lambda y: np.stack([y[..., 1], 1 + 0 * y[..., 0]], -1))
    proj = project_data(m, data, d.s_elems, d.d_elems)
    bary = RNG.dirichlet(np.ones(3), 4)
    r = element_residual_S(DiscreteSolution(d, x), data, proj, np.arange(len(d.s_elems)), bary)
    assert np.allclose(r, proj.f_S_mean[:, None, :], atol=1e-14)


def test_fluid_residual_of_bubble_matches_finite_differences():
    m, d = mesh_dofs(2)
    mu = 0.9
    data = ProblemData(mu=mu)
    proj = project_data(m, data, d.s_elems, d.d_elems)
    li = 3
    t = d.s_elems[li]
    x = np.zeros(d.ndof)
    x[d.s_l2g[li, 7]] = 1.0
    r = element_residual_S(DiscreteSolution(d, x), data, proj, [li], np.full((5, 3), 1 / 3))[0]
    P = m.nodes[m.triangles[t]]
    ora = BROracle(P, m.edge_normals[m.triangle_edges[t]])
    f = lambda y: ora.values(y)[:, 7, :]
    h = 1e-3
    X = P.mean(0) + RNG.uniform(-0.02, 0.02, (5, 2))
    e1, e2 = np.array([h, 0]), np.array([0, h])
    lap = (f(X + e1) + f(X - e1) + f(X + e2) + f(X - e2) - 4 * f(X)) / h ** 2
    dxx = lambda c, e, g: (f(X + e + g)[:, c] - f(X + e - g)[:, c] - f(X - e + g)[:, c]
                           + f(X - e - g)[:, c]) / (4 * h * h)
    grad_div = np.stack([(f(X + e1)[:, 0] - 2 * f(X)[:, 0] + f(X - e1)[:, 0]) / h ** 2
                         + dxx(1, e1, e2),
                         dxx(0, e1, e2) + (f(X + e2)[:, 1] - 2 * f(X)[:, 1] + f(X - e2)[:, 1])
                         / h ** 2], -1)
    ref = mu * (lap + grad_div)          # 2 mu div e(v) = mu (lap v + grad div v)
    assert np.abs(ref - r[0]).max() < 1e-6 * max(1.0, np.abs(ref).max())
    assert np.abs(r).max() > 0


def test_darcy_residual_and_curl():
    m, d = mesh_dofs(2)
    lin = lambda y: np.stack([y[..., 0] + 2, 3 * y[..., 1]], -1)
    data = ProblemData(kappa=2.5, f_D=lin, curl_f_D=lambda y: np.zeros(np.shape(y)[:-1]))
    proj = project_data(m, data, d.s_elems, d.d_elems)
    ld = np.arange(len(d.d_elems))
    X = triangle_rule(4).physical_points(m.nodes[m.triangles[d.d_elems]])
    zero = DiscreteSolution(d, np.zeros(d.ndof))
    assert np.allclose(element_residual_D(zero, data, proj, ld, X), lin(X), atol=1e-13)
    # scalar constant permeability: every RT0 field is curl free after scaling
    x = np.zeros(d.ndof)
    x[d.block_slice("u_D")] = RNG.normal(size=d.n_uD)
    c = darcy_curl(DiscreteSolution(d, x), ProblemData(kappa=2.5), project_data(
        m, ProblemData(kappa=2.5), d.s_elems, d.d_elems), ld, X)
    assert np.abs(c).max() < 1e-12


# -- edge terms ---------------------------------------------------------------------------------

def test_unit_pressure_jump():
    m, d = mesh_dofs(2)
    e = m.edges_of_kind(0)[0]
    t0, t1 = m.edge_triangles[e]
    x = np.zeros(d.ndof)
    x[d.offsets["p"] + t1] = 1.0
    sol = DiscreteSolution(d, x)
    edges, _, w, jump = stress_jumps(sol, 1.0, [e])
    assert np.allclose(jump[0], -m.edge_normals[e])
    assert np.sum(w * np.sum(jump ** 2, -1)) == pytest.approx(m.edge_lengths[e])
    assert pressure_jumps(sol, [e])[0] == 1.0 and pressure_jumps(sol, [e], flip=True)[0] == -1.0


def test_jumps_vanish_for_global_linear_field():
    m, d = mesh_dofs(3)
    A = np.array([[0.3, -1.2], [0.7, -0.3]])       # trace free is not needed here
    ns = len(d.s_nodes)
    x = np.zeros(d.ndof)
    v = m.nodes[d.s_nodes] @ A.T
    x[0:2 * ns:2], x[1:2 * ns:2] = v[:, 0], v[:, 1]
    x[d.block_slice("p")] = 0.4
    _, _, w, jump = stress_jumps(DiscreteSolution(d, x), 1.3)
    assert np.abs(jump).max() < 1e-13


def test_orientation_flip_leaves_terms_unchanged():
    m, d = mesh_dofs(2, (0, 5))
    sol = DiscreteSolution(d, RNG.normal(size=d.ndof))
    _, _, w, j1 = stress_jumps(sol, 0.8)
    _, _, _, j2 = stress_jumps(sol, 0.8, flip=True)
    assert np.allclose(np.sum(w * np.sum(j1 ** 2, -1), 1), np.sum(w * np.sum(j2 ** 2, -1), 1),
                       rtol=1e-12, atol=0)


def test_indicators_invariant_under_node_renumbering():
    m, d = mesh_dofs(2, (1, 6))
    data = polynomial_data()
    perm = RNG.permutation(m.num_nodes)
    nodes = np.empty_like(m.nodes)
    nodes[perm] = m.nodes
    m2 = Mesh(nodes, perm[m.triangles], m.subdomain, m.refinement_edge)
    d2 = build_dof_map(m2)
    flipped = np.sum(m.edge_normals[m.triangle_edges] * m2.edge_normals[m2.triangle_edges], -1)
    assert np.any(flipped < 0)           # some global orientations really changed
    s1, _ = solve_stationary(m, d, data)
    s2, _ = solve_stationary(m2, d2, data)
    f1, _ = assemble_indicators(m, s1, data)
    f2, _ = assemble_indicators(m2, s2, data)
    for t in TERMS:
        assert np.allclose(f1.terms[t], f2.terms[t], rtol=1e-9, atol=1e-13), t


def test_mass_term_of_unit_normal_flux():
    m, d = mesh_dofs(4)
    x = np.zeros(d.ndof)
    x[1:2 * len(d.s_nodes):2] = -1.0           # u_S = (0, -1): u_S . n_S = 1
    it = interface_terms(DiscreteSolution(d, x), ProblemData())
    assert np.allclose(it.mass, m.edge_lengths[it.edges])


# -- global estimator --------------------------------------------------------------------------

def test_zero_problem_gives_exact_zero():
    m, d = mesh_dofs(2, (4,))
    field, summary = assemble_indicators(m, DiscreteSolution(d, np.zeros(d.ndof)), ProblemData())
    assert summary.theta == 0.0 and summary.zeta == 0.0
    assert all(np.all(field.terms[t] == 0.0) for t in TERMS)


@pytest.mark.parametrize("classic", [False, True])
def test_consistency_field_has_zero_estimator(classic):
    m, d = mesh_dofs(2, (2, 9))
    data, x = consistency_problem(m, d)
    _, summary = assemble_indicators(m, DiscreteSolution(d, x), data, classic)
    assert summary.theta <= 1e-10 and summary.zeta <= 1e-10
    sol, rep = solve_stationary(m, d, data)
    assert rep.converged and np.abs(sol.x - x).max() < 1e-10


def test_bookkeeping_identity(tmp_path):
    m, d = mesh_dofs(2, (3, 8))
    data = make_manufactured("smooth_poly", rho=0.2).data
    sol, _ = solve_stationary(m, d, data)
    field, summary = assemble_indicators(m, sol, data)
    parts = sum(field.terms[t] for t in TERMS)
    assert np.allclose(field.theta_sq, parts, rtol=1e-12, atol=0)
    assert summary.theta ** 2 == pytest.approx(sum(summary.term_totals.values()), rel=1e-12)
    assert np.all(field.terms["S_residual"][m.subdomain == D] == 0)
    assert all(np.all(field.terms[t][m.subdomain == S] == 0) for t in D_TERMS)
    assert all(np.all(field.terms[t][m.subdomain == D] == 0) for t in S_TERMS)
    # removing one element strictly lowers the total
    k = int(np.argmax(field.theta_sq))
    assert field.theta_sq.sum() - field.theta_sq[k] < summary.theta ** 2
    path = tmp_path / "ind.csv"
    write_indicator_csv(path, field)
    rows = np.genfromtxt(path, delimiter=",", skip_header=1, usecols=range(2, 3 + len(TERMS)))
    assert np.allclose(rows[:, 0], rows[:, 1:].sum(1), rtol=1e-12)


def test_classic_weights_scale_fluid_terms():
    m, d = mesh_dofs(2, (1,))
    data = make_manufactured("smooth_poly").data
    sol, _ = solve_stationary(m, d, data)
    f0, _ = assemble_indicators(m, sol, data)
    f1, _ = assemble_indicators(m, sol, data, classic_weights=True)
    h = m.diameters
    assert np.allclose(f1.terms["S_residual"], h ** 2 * f0.terms["S_residual"])
    assert np.allclose(f1.terms["S_div"], f0.terms["S_div"])
    for t in D_TERMS:
        assert np.array_equal(f1.terms[t], f0.terms[t])
    assert np.all(f1.terms["S_bjs"] <= f0.terms["S_bjs"] + 1e-15)


@pytest.mark.parametrize("rho", [0.0, 0.9])
def test_indicators_match_oracle(rho):
    m = perturbed_mesh()
    d = build_dof_map(m)
    data = polynomial_data(rho=rho)
    x = RNG.normal(size=d.ndof)
    field, _ = assemble_indicators(m, DiscreteSolution(d, x), data)
    ref, zeta = oracle_indicators(m, d, data, x)
    for t in TERMS:
        scale = max(1.0, np.abs(ref[t]).max())
        assert np.abs(field.terms[t] - ref[t]).max() <= 1e-12 * scale, t
    assert np.abs(field.zeta_sq - zeta).max() <= 1e-12 * max(1.0, zeta.max())


# -- trace norm and efficiency norm -------------------------------------------------------------

def test_slobodeckij_closed_form():
    # |x^2|_{1/2}^2 on (0, 1) = int int (x + y)^2 = 7/6
    seg = np.array([[[0.0, 1.0], [0.5, 1.0]], [[0.5, 1.0], [1.0, 1.0]]])
    vals = lambda i, s: (0.5 * (i + np.asarray(s))) ** 2
    assert slobodeckij_seminorm_sq(seg, vals) == pytest.approx(7 / 6, rel=1e-10)
    assert h_half_norm(seg, lambda i, s: np.ones_like(np.asarray(s, float))) == pytest.approx(1.0)


def test_slobodeckij_random_piecewise_linear_against_dense_quadrature():
    xs = np.array([0.0, 0.2, 0.45, 0.7, 1.0])
    ys = RNG.normal(size=len(xs))
    seg = np.stack([np.column_stack([xs[:-1], np.ones(4)]), np.column_stack([xs[1:], np.ones(4)])],
                   axis=1)
    vals = lambda i, s: ys[i] + (ys[i + 1] - ys[i]) * np.asarray(s)
    f = lambda x: np.interp(x, xs, ys)
    ref = 0.0
    for i in range(4):
        for j in range(4):
            if i == j:
                slope = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
                ref += slope ** 2 * (xs[i + 1] - xs[i]) ** 2
            else:
                ref += dblquad(lambda y, x: ((f(x) - f(y)) / (x - y)) ** 2, xs[i], xs[i + 1],
                               xs[j], xs[j + 1], epsabs=1e-12, epsrel=1e-12)[0]
    assert slobodeckij_seminorm_sq(seg, vals) == pytest.approx(ref, rel=1e-6)


def test_efficiency_norm_of_unit_multiplier_error():
    m, d = mesh_dofs(2)
    z2, z22, z, one = zero_fields()
    case = ManufacturedCase("unit", ProblemData(), z2, z22, z2, z, z, one)
    x = np.zeros(d.ndof)
    assert efficiency_norm(DiscreteSolution(d, x), ManufacturedCase(
        "zero", ProblemData(), z2, z22, z2, z, z, z), range(m.num_triangles)) == 0.0
    x[d.offsets["p"] + d.d_elems] = 1.0          # p_h matches p_D, lambda_h = 0
    val = efficiency_norm(DiscreteSolution(d, x), case, range(m.num_triangles))
    assert val == pytest.approx(1.0, rel=1e-12)


def test_local_efficiency_ratios_are_finite():
    case = make_manufactured("smooth_poly")
    m, d = mesh_dofs(2)
    sol, _ = solve_stationary(m, d, case.data)
    field, _ = assemble_indicators(m, sol, case.data)
    r = local_efficiency_ratios(sol, case, field)
    assert r.shape == (m.num_triangles,) and np.all(np.isfinite(r)) and np.all(r > 0)
    assert interpolate(case, m, d).x.shape == sol.x.shape
