"""Quadrature rules on the reference triangle and on line segments.

Triangle rules are returned in barycentric form: ``points`` has shape
``(nq, 3)`` and ``weights`` are fractions of the element area (they sum
to 1), so ``sum(w * f(x)) * |T|`` approximates ``int_T f``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # barycentric, (nq, 3)
    weights: np.ndarray  # (nq,), sum 1
    degree: int

    def physical_points(self, vertices):
        """Map to physical coordinates; ``vertices`` has shape (..., 3, 2)."""
        return np.einsum("qk,...kd->...qd", self.points, vertices)


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)], [w] * 3


def _dunavant4():
    a1 = 0.44594849091596488632
    a2 = 0.091576213509770743460
    w1 = 0.22338158967801146570
    w2 = 0.10995174365532186764
    pts, wts = [], []
    for a, w in ((a1, w1), (a2, w2)):
        p, q = _orbit3(a, w)
        pts += p
        wts += q
    return np.array(pts), np.array(wts)


def _dunavant5():
    r = np.sqrt(15.0)
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [0.225]
    for a, w in (((6 - r) / 21, (155 - r) / 1200), ((6 + r) / 21, (155 + r) / 1200)):
        p, q = _orbit3(a, w)
        pts += p
        wts += q
    return np.array(pts), np.array(wts)


def _collapsed(degree):
    """Conical product Gauss rule exact for polynomials of ``degree``."""
    n = degree // 2 + 1
    xg, wg = roots_legendre(n)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (xj + 1.0)        # collapsed direction, weight (1 - s)
    t = 0.5 * (xg + 1.0)
    ws = wj / 4.0               # int_0^1 (1-s) g(s) ds
    wt = wg / 2.0
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    x = S.ravel()
    y = ((1.0 - S) * T).ravel()
    pts = np.stack([1.0 - x - y, x, y], axis=1)
    w = 2.0 * W.ravel()         # reference area is 1/2
    return pts, w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree ``degree``."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if degree <= 1:
        pts, wts = np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    elif degree == 2:
        pts = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        wts = np.full(3, 1 / 3)
    elif degree in (3, 4):
        pts, wts = _dunavant4()
    elif degree == 5:
        pts, wts = _dunavant5()
    else:
        pts, wts = _collapsed(degree)
    pts = np.ascontiguousarray(pts)
    wts = np.ascontiguousarray(wts)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, max(degree, 1))


@lru_cache(maxsize=None)
def line_rule(degree: int):
    """Gauss-Legendre on ``[0, 1]``: returns ``(s, w)`` with ``sum(w) = 1``."""
    n = max(1, (degree + 2) // 2)
    x, w = roots_legendre(n)
    s = 0.5 * (x + 1.0)
    w = 0.5 * w
    s.setflags(write=False)
    w.setflags(write=False)
    return s, w
