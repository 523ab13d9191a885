"""Closed-form space-time fields with exact derivatives.

Backed by sympy so that manufactured solutions, compatibility sources, and
weighted-operator decompositions can be evaluated with analytically exact
derivatives on any grid.  Expressions use symbols ``t, x1, x2`` in the bulk
and ``t, theta`` on the boundary circle.
"""

from __future__ import annotations

import numpy as np
import sympy as sp

T, X1, X2, TH = sp.symbols("t x1 x2 theta", real=True)

_NAMESPACE = {
    "t": T, "x1": X1, "x2": X2, "theta": TH,
    "sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "sqrt": sp.sqrt,
    "pi": sp.pi, "log": sp.log, "tanh": sp.tanh,
}


def _lambdify(args, expr):
    fn = sp.lambdify(args, expr, modules="numpy")

    def wrapped(*vals):
        out = fn(*vals)
        return np.broadcast_to(np.asarray(out, dtype=float),
                               np.broadcast_shapes(*[np.shape(v) for v in vals])).copy()
    return wrapped


class SpaceTimeField:
    """Scalar field f(t, x1, x2) with lambdified exact derivatives."""

    def __init__(self, expr):
        if isinstance(expr, str):
            expr = sp.sympify(expr, locals=_NAMESPACE)
        self.expr = sp.sympify(expr)
        self._value = _lambdify((T, X1, X2), self.expr)
        self._dt = _lambdify((T, X1, X2), sp.diff(self.expr, T))
        self._d1 = _lambdify((T, X1, X2), sp.diff(self.expr, X1))
        self._d2 = _lambdify((T, X1, X2), sp.diff(self.expr, X2))
        self._lap = _lambdify(
            (T, X1, X2),
            sp.diff(self.expr, X1, 2) + sp.diff(self.expr, X2, 2),
        )

    def value(self, t, xy):
        return self._value(t, xy[..., 0], xy[..., 1])

    def dt(self, t, xy):
        return self._dt(t, xy[..., 0], xy[..., 1])

    def grad(self, t, xy):
        return np.stack(
            [self._d1(t, xy[..., 0], xy[..., 1]),
             self._d2(t, xy[..., 0], xy[..., 1])], axis=-1)

    def laplacian(self, t, xy):
        return self._lap(t, xy[..., 0], xy[..., 1])

    def on_circle(self, R: float = 1.0) -> "CircleField":
        """Restriction to the circle of radius R, parametrized by angle."""
        sub = self.expr.subs({X1: R * sp.cos(TH), X2: R * sp.sin(TH)})
        return CircleField(sub, R=R)

    def normal_derivative_expr(self, R: float = 1.0):
        """Symbolic d_nu f on the circle of radius R, as a (t, theta) expr."""
        dn = (sp.diff(self.expr, X1) * X1 + sp.diff(self.expr, X2) * X2) / sp.sqrt(X1**2 + X2**2)
        return dn.subs({X1: R * sp.cos(TH), X2: R * sp.sin(TH)})


class CircleField:
    """Scalar field g(t, theta) on a circle, with arc-length derivatives."""

    def __init__(self, expr, R: float = 1.0):
        if isinstance(expr, str):
            expr = sp.sympify(expr, locals=_NAMESPACE)
        self.expr = sp.sympify(expr)
        self.R = float(R)
        self._value = _lambdify((T, TH), self.expr)
        self._dt = _lambdify((T, TH), sp.diff(self.expr, T))
        self._ds = _lambdify((T, TH), sp.diff(self.expr, TH) / self.R)

    def value(self, t, theta):
        return self._value(t, theta)

    def dt(self, t, theta):
        return self._dt(t, theta)

    def ds(self, t, theta):
        return self._ds(t, theta)


def divergence_a_grad(a_expr, f_expr):
    """Symbolic div(a(x) grad f) for a scalar diffusivity expression."""
    a_expr = sp.sympify(a_expr, locals=_NAMESPACE) if isinstance(a_expr, str) else sp.sympify(a_expr)
    return (sp.diff(a_expr * sp.diff(f_expr, X1), X1)
            + sp.diff(a_expr * sp.diff(f_expr, X2), X2))


def surface_divergence_d_grad(d_theta_expr, g_expr, R: float = 1.0):
    """Symbolic div_s(d(s) d/ds g) on a circle of radius R, in theta."""
    d_theta_expr = (sp.sympify(d_theta_expr, locals=_NAMESPACE)
                    if isinstance(d_theta_expr, str) else sp.sympify(d_theta_expr))
    return sp.diff(d_theta_expr * sp.diff(g_expr, TH) / R, TH) / R
