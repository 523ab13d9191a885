"""Weighted-operator decompositions of the conjugated heat operators.

For psi = e^{-s alpha} xi^{tau/2} z the conjugated bulk operator splits as

    M1 psi = 2 lam (s xi + tau/2) A grad eta0 . grad psi + dt psi
    M2 psi = -lam^2 s^2 xi^2 sigma psi - div(A grad psi)
             + (tau/2 - s alpha)(dt log gamma) psi

and M1 psi + M2 psi equals the weighted right side

    f~ = e^{-s alpha} xi^{tau/2} Lz - lam (s xi + tau/2) div(A grad eta0) psi
         + [lam^2 tau^2/4 - s lam^2 xi (1 - tau)] sigma psi,

with the surface analogue N1 + N2 = e^{-s alpha} xi^{tau/2} L_Gamma(z_G, z).
Note the xi^{tau/2} factor on the right sides: the identities hold with the
same weight that defines psi (for tau = 0 this reduces to the plain
e^{-s alpha} form).  Everything here is evaluated from one symbolic
expression tree per component, so the residual tests the printed grouping,
not the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .carleman import CarlemanConfig
from .fields import _NAMESPACE, T, TH, X1, X2, SpaceTimeField
from .geometry import Mesh


def _sym(expr):
    return sp.sympify(expr, locals=_NAMESPACE) if isinstance(expr, str) else sp.sympify(expr)


@dataclass
class Decomposition:
    """Componentwise evaluation of the M/N splittings on a space-time grid."""

    times: np.ndarray
    components: dict = field(default_factory=dict)   # name -> (nt, n) array
    f_tilde: np.ndarray | None = None
    g: np.ndarray | None = None
    residual_bulk: float = 0.0
    residual_surface: float = 0.0

    @property
    def m_sum(self) -> np.ndarray:
        return sum(self.components[k] for k in ("M11", "M12", "M21", "M22", "M23"))

    @property
    def n_sum(self) -> np.ndarray:
        return sum(self.components[k] for k in ("N11", "N12", "N21", "N22", "N23"))


def _rel_residual(total: np.ndarray, target: np.ndarray, parts: list) -> float:
    """L2 residual of total-target, relative to the component magnitude."""
    num = float(np.sqrt(np.mean((total - target) ** 2)))
    scale = float(np.sqrt(np.mean(sum(np.abs(p) for p in parts) ** 2)))
    return num / scale if scale > 0 else 0.0


def mn_decomposition(tau: float, z_field: SpaceTimeField, cfg: CarlemanConfig,
                     mesh: Mesh, a_expr=1, d_expr=1,
                     times: np.ndarray | None = None) -> Decomposition:
    """Evaluate every component of the M/N splitting for a closed-form z.

    ``a_expr`` is the isotropic bulk diffusivity as an (x1, x2) expression,
    ``d_expr`` the surface diffusivity as a theta expression.  Each component
    is lambdified from its own symbolic expression (derivatives of psi are
    taken symbolically), so the returned residuals measure how exactly the
    splitting reproduces the weighted heat operators.
    """
    if not isinstance(z_field, SpaceTimeField):
        raise TypeError("mn_decomposition needs a closed-form field, "
                        "not a sampled trajectory")
    lam = sp.Float(cfg.lam)
    s = sp.Float(cfg.s)
    tau_s = sp.Rational(tau) if float(tau).is_integer() else sp.Float(tau)
    half_tau = tau_s / 2
    t0, t1 = sp.Float(cfg.t0), sp.Float(cfg.t1)

    a = _sym(a_expr)
    d = _sym(d_expr)
    z = z_field.expr
    eta0 = 1 - X1**2 - X2**2
    gamma = (T - t0) * (t1 - T)
    K = sp.exp(2 * lam * sp.Float(cfg.eta0_sup))
    E = sp.exp(lam * eta0)
    alpha = (K - E) / gamma
    xi = E / gamma
    psi = sp.exp(-s * alpha) * xi**half_tau * z
    sig = a * (sp.diff(eta0, X1) ** 2 + sp.diff(eta0, X2) ** 2)
    dlog = sp.diff(gamma, T) / gamma

    adv = a * (sp.diff(eta0, X1) * sp.diff(psi, X1)
               + sp.diff(eta0, X2) * sp.diff(psi, X2))
    div_a_grad_psi = (sp.diff(a * sp.diff(psi, X1), X1)
                      + sp.diff(a * sp.diff(psi, X2), X2))
    div_a_grad_eta = (sp.diff(a * sp.diff(eta0, X1), X1)
                      + sp.diff(a * sp.diff(eta0, X2), X2))

    bulk_parts = {
        "M11": 2 * lam * (s * xi + half_tau) * adv,
        "M12": sp.diff(psi, T),
        "M21": -(lam**2) * s**2 * xi**2 * sig * psi,
        "M22": -div_a_grad_psi,
        "M23": (half_tau - s * alpha) * dlog * psi,
    }
    Lz = sp.diff(z, T) - (sp.diff(a * sp.diff(z, X1), X1)
                          + sp.diff(a * sp.diff(z, X2), X2))
    f_tilde = (sp.exp(-s * alpha) * xi**half_tau * Lz
               - lam * (s * xi + half_tau) * div_a_grad_eta * psi
               + (lam**2 * tau_s**2 / 4 - s * lam**2 * xi * (1 - tau_s)) * sig * psi)

    circle = {X1: sp.cos(TH), X2: sp.sin(TH)}
    psi_g = psi.subs(circle)
    alpha_g = alpha.subs(circle)
    xi_g = xi.subs(circle)
    a_g = a.subs(circle)
    # A grad eta0 . nu = -2 a on the unit circle
    surf_parts = {
        "N11": sp.diff(psi_g, T),
        "N12": -lam * (s * xi_g + half_tau) * (-2 * a_g) * psi_g,
        "N21": -sp.diff(d * sp.diff(psi_g, TH), TH),
        "N22": (half_tau - s * alpha_g) * dlog * psi_g,
        "N23": (a * (X1 * sp.diff(psi, X1) + X2 * sp.diff(psi, X2))).subs(circle),
    }
    z_g = z.subs(circle)
    conormal_z = (a * (X1 * sp.diff(z, X1) + X2 * sp.diff(z, X2))).subs(circle)
    LGz = sp.diff(z_g, T) - sp.diff(d * sp.diff(z_g, TH), TH) + conormal_z
    g_sym = sp.exp(-s * alpha_g) * xi_g**half_tau * LGz

    if times is None:
        w = cfg.t1 - cfg.t0
        times = np.linspace(cfg.t0 + 0.15 * w, cfg.t1 - 0.15 * w, 9)
    times = np.asarray(times, dtype=float)

    xy = mesh.cell_xy
    tt_b = times[:, None]
    x1, x2 = xy[:, 0][None, :], xy[:, 1][None, :]
    th = mesh.surface_theta[None, :]

    out = Decomposition(times=times)
    for name, expr in bulk_parts.items():
        fn = sp.lambdify((T, X1, X2), expr, modules="numpy")
        out.components[name] = np.broadcast_to(
            np.asarray(fn(tt_b, x1, x2), dtype=float),
            (len(times), mesh.n_cells)).copy()
    fn = sp.lambdify((T, X1, X2), f_tilde, modules="numpy")
    out.f_tilde = np.broadcast_to(np.asarray(fn(tt_b, x1, x2), dtype=float),
                                  (len(times), mesh.n_cells)).copy()
    for name, expr in surf_parts.items():
        fn = sp.lambdify((T, TH), expr, modules="numpy")
        out.components[name] = np.broadcast_to(
            np.asarray(fn(tt_b, th), dtype=float),
            (len(times), mesh.n_theta)).copy()
    fn = sp.lambdify((T, TH), g_sym, modules="numpy")
    out.g = np.broadcast_to(np.asarray(fn(tt_b, th), dtype=float),
                            (len(times), mesh.n_theta)).copy()

    out.residual_bulk = _rel_residual(
        out.m_sum, out.f_tilde,
        [out.components[k] for k in ("M11", "M12", "M21", "M22", "M23")]
        + [out.f_tilde])
    out.residual_surface = _rel_residual(
        out.n_sum, out.g,
        [out.components[k] for k in ("N11", "N12", "N21", "N22", "N23")]
        + [out.g])
    return out


def field_to_trajectory(z_field: SpaceTimeField, mesh: Mesh,
                        times: np.ndarray) -> "Trajectory":
    """Sample a closed-form field into a trajectory (z pair only)."""
    from .forward import Trajectory

    times = np.asarray(times, dtype=float)
    xy = mesh.cell_xy
    th = mesh.surface_theta
    zg_field = z_field.on_circle(mesh.R_domain)
    z = np.stack([z_field.value(t, xy) for t in times])
    zg = np.stack([zg_field.value(t, th) for t in times])
    zeros_b = np.zeros_like(z)
    zeros_s = np.zeros_like(zg)
    return Trajectory(times=times, y=zeros_b, z=z, y_gamma=zeros_s,
                      z_gamma=zg, dt=float(times[1] - times[0]))
