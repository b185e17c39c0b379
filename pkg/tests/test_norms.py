import numpy as np
import pytest

from nsdarcy.discretization import DiscreteSolution, build_dof_map, interpolate, to_barycentric
from nsdarcy.mesh import build_structured_mesh, refine
from nsdarcy.model import ManufacturedCase, make_manufactured
from nsdarcy.norms import error_contributions, error_norms
from nsdarcy.solver import solve_stationary

from oracles import consistency_problem, tri_points


def test_interpolation_errors_are_positive():
    case = make_manufactured("smooth_trig")
    m = build_structured_mesh(1.0, 2)
    d = build_dof_map(m)
    err = error_norms(interpolate(case, m, d), case)
    assert min(err.u_S_h1, err.u_D_div, err.p_l2, err.lam_half) > 0
    assert err.composite == pytest.approx(err.u_S_h1 + err.u_D_div + err.p_l2 + err.lam_half)


def test_discrete_exact_fields_have_zero_error():
    m = refine(build_structured_mesh(1.0, 2), [4])
    d = build_dof_map(m)
    a, b, ps = np.array([0.4, -0.3]), np.array([0.2, 0.5]), 0.8
    data, x = consistency_problem(m, d, a, b, ps)
    const = lambda v: (lambda y: np.broadcast_to(v, np.shape(y)[:-1] + np.shape(v)).copy())
    case = ManufacturedCase("const", data, const(a), const(np.zeros((2, 2))), const(b),
                            const(0.0), const(ps), const(-ps))
    err = error_norms(DiscreteSolution(d, x), case)
    assert err.composite <= 1e-10


def test_doubling_quadrature_changes_errors_below_1e8():
    case = make_manufactured("smooth_trig", rho=0.3)
    m = build_structured_mesh(1.0, 4)
    d = build_dof_map(m)
    sol, _ = solve_stationary(m, d, case.data)
    e1 = error_norms(sol, case, degree=10, order=16)
    e2 = error_norms(sol, case, degree=20, order=32)
    for f in ("u_S_h1", "u_D_div", "p_l2", "lam_half"):
        assert abs(getattr(e1, f) - getattr(e2, f)) <= 1e-8 * getattr(e2, f), f


def test_contributions_match_collapsed_gauss_oracle():
    case = make_manufactured("smooth_poly")
    m = build_structured_mesh(1.0, 2)
    d = build_dof_map(m)
    sol, _ = solve_stationary(m, d, case.data)
    c = error_contributions(sol, case)
    for li, t in enumerate(d.s_elems[:4]):
        P = m.nodes[m.triangles[t]]
        X, W = tri_points(P, 10)
        u, G = sol.u_S_at([li], to_barycentric(P[None], X[None]))
        ref = np.sum(W * np.sum((case.grad_u_S(X) - G[0]) ** 2, axis=(-1, -2)))
        assert c.u_h1semi[t] == pytest.approx(ref, rel=1e-8)
        ref = np.sum(W * np.sum((case.u_S(X) - u[0]) ** 2, -1))
        assert c.u_l2[t] == pytest.approx(ref, rel=1e-8)
    for li, t in enumerate(d.d_elems[:4]):
        P = m.nodes[m.triangles[t]]
        X, W = tri_points(P, 10)
        v, div = sol.u_D_at([li], X[None])
        ref = np.sum(W * (case.div_u_D(X) - div[0]) ** 2)
        assert c.u_div[t] == pytest.approx(ref, rel=1e-8, abs=1e-20)
        ref = np.sum(W * (case.p_D(X) - sol.p[t]) ** 2)
        assert c.p_l2[t] == pytest.approx(ref, rel=1e-8)
