import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsdarcy.adaptivity import (AdaptiveTrace, MarkingConfig, NonConvergenceError, dofs_to_reach,
                                mark, run_adaptive)
from nsdarcy.mesh import build_structured_mesh
from nsdarcy.model import ProblemData, make_manufactured
from nsdarcy.solver import SolverConfig


def dorfler(theta):
    return MarkingConfig(theta=theta)


def test_dorfler_examples():
    assert list(mark([4, 3, 2, 1], dorfler(0.6))) == [0]
    assert list(mark([0, 2, 0, 1], dorfler(1.0))) == [1, 3]
    assert len(mark(np.ones(8), dorfler(0.5))) == 2
    assert list(mark(np.ones(8), dorfler(0.5))) == [0, 1]          # ties by ascending id
    assert list(mark([1, 3, 3, 1], dorfler(0.7))) == [1, 2]
    assert mark(np.zeros(5), dorfler(0.5)).size == 0


def test_maximum_strategy():
    cfg = MarkingConfig(theta=0.5, strategy="maximum")
    # Theta_T = 2, 1.5, 0.9, 1 against 0.5 * 2
    assert list(mark([4, 2.25, 0.81, 1], cfg)) == [0, 1, 3]


def test_invalid_inputs():
    with pytest.raises(ValueError):
        mark([1, -1], dorfler(0.5))
    with pytest.raises(ValueError):
        mark([1, np.nan], dorfler(0.5))
    for kw in (dict(theta=0), dict(theta=1.2), dict(strategy="random"), dict(max_levels=-1)):
        with pytest.raises(ValueError):
            MarkingConfig(**kw)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40),
       st.floats(0.05, 1.0))
def test_dorfler_bulk_and_minimality(values, theta):
    eta = np.array(values)
    M = mark(eta, dorfler(theta))
    assert np.array_equal(M, mark(eta.copy(), dorfler(theta)))     # deterministic
    if eta.sum() == 0:
        assert M.size == 0
        return
    target = theta ** 2 * eta.sum() * (1 - 1e-14)
    assert eta[M].sum() >= target
    assert np.all(eta[M] > 0)
    # no set of fewer elements reaches the target
    best = np.sort(eta)[::-1][:len(M) - 1].sum()
    assert best < target
    # dropping any member breaks the criterion
    for k in M:
        assert eta[M].sum() - eta[k] < target


def test_stop_at_level_zero():
    m = build_structured_mesh(1.0, 2)
    data = make_manufactured("smooth_poly").data
    res, trace = run_adaptive(m, data, MarkingConfig(stop_theta=1e6))
    assert len(trace) == 1 and trace.marked == [0] and res.mesh is m


def test_zero_problem_stops_without_marking():
    m = build_structured_mesh(1.0, 2)
    _, trace = run_adaptive(m, ProblemData(), MarkingConfig(max_levels=3))
    assert len(trace) == 1 and trace.theta == [0.0]


def test_smooth_case_trace():
    m = build_structured_mesh(1.0, 2)
    data = make_manufactured("smooth_poly").data
    seen = []
    _, trace = run_adaptive(m, data, MarkingConfig(max_levels=5),
                            callback=lambda k, r: seen.append(k))
    assert seen == list(range(6)) and len(trace) == 6
    assert all(a < b for a, b in zip(trace.ndof, trace.ndof[1:]))
    assert trace.marked[-1] == 0 and all(k > 0 for k in trace.marked[:-1])
    _, again = run_adaptive(m, data, MarkingConfig(max_levels=5))
    assert again.rows() == trace.rows()


@pytest.mark.parametrize("classic", [False, True], ids=["verbatim", "classic"])
def test_smooth_case_theta_non_increasing(classic):
    m = build_structured_mesh(1.0, 2)
    data = make_manufactured("smooth_poly").data
    _, trace = run_adaptive(m, data, MarkingConfig(max_levels=8), classic_weights=classic)
    rises = [b / a for a, b in zip(trace.theta, trace.theta[1:])]
    assert max(rises) <= 1.05, rises


def test_uniform_mode_and_dofs_to_reach():
    data = make_manufactured("smooth_poly").data
    m = build_structured_mesh(1.0, 2)
    _, tr = run_adaptive(m, data, MarkingConfig(max_levels=2), uniform=True)
    assert tr.nelem == [16, 64, 256]
    assert dofs_to_reach(tr, tr.theta[1]) == tr.ndof[1]
    assert dofs_to_reach(tr, 0.0) is None


def test_nonconvergence_raises_with_trace():
    m = build_structured_mesh(1.0, 2)
    data = make_manufactured("smooth_poly", rho=50.0).data
    with pytest.raises(NonConvergenceError) as info:
        run_adaptive(m, data, MarkingConfig(max_levels=2), SolverConfig(picard_max_iters=2))
    assert isinstance(info.value.trace, AdaptiveTrace) and len(info.value.trace) == 0
