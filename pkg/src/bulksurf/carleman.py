"""Carleman weight system: weights, weighted norms, decompositions, ratios.

The weight ingredients are closed forms on the unit disk:

    eta0(x) = 1 - |x|^2,   gamma(t) = (t - t0)(t1 - t),
    alpha   = (e^{2 lam} - e^{lam eta0}) / gamma,
    xi      = e^{lam eta0} / gamma.

Weighted space-time quadratures share a common exponent shift (the grid
minimum of alpha), so left/right-hand-side ratios stay well defined at
parameter values where the raw weight e^{-2 s alpha} underflows; absolute
magnitudes carry the shift as ``log_scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Mesh, RegionSet
from .operators import SparseOp, assemble_bulk_diffusion, \
    assemble_surface_diffusion, conormal_flux
from .forward import Trajectory

_EXP_CLAMP = -700.0   # exponents below this evaluate to exact zero


def default_s1(lam: float, t0: float, t1: float, eta0_sup: float = 1.0) -> float:
    """Default large-parameter floor 2 * gamma_max * e^{2 lam |eta0|_inf}."""
    gamma_max = (t1 - t0) ** 2 / 4.0
    return 2.0 * gamma_max * math.exp(2.0 * lam * eta0_sup)


DEFAULT_LAMBDA1 = 2.0


@dataclass(frozen=True)
class CarlemanConfig:
    """Weight parameters; defaults target the unit disk (eta0_sup = 1)."""

    lam: float
    s: float
    t0: float
    t1: float
    tau: float = 0.0
    epsilon: float = 0.5
    eta0_sup: float = 1.0
    c_floor: float = 2.0      # -d_nu eta0 on the unit circle
    C0: float = 0.0           # gradient floor of |grad eta0| outside omega'

    def __post_init__(self):
        if self.lam < 1.0:
            raise ValueError("lambda must be >= 1")
        if self.s <= 0.0:
            raise ValueError("s must be positive")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if not (self.t0 < self.t1):
            raise ValueError("need t0 < t1")

    @property
    def gamma_max(self) -> float:
        return (self.t1 - self.t0) ** 2 / 4.0

    def with_params(self, **kw) -> "CarlemanConfig":
        from dataclasses import replace
        return replace(self, **kw)


def eta0_and_gradient(xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """eta0 = 1 - |x|^2 and its gradient -2x; exact radial form on the disk."""
    xy = np.asarray(xy, dtype=float)
    val = 1.0 - np.sum(xy**2, axis=-1)
    return val, -2.0 * xy


def gamma_value(t, cfg: CarlemanConfig):
    return (t - cfg.t0) * (cfg.t1 - t)


def weights(t: float, xy: np.ndarray, cfg: CarlemanConfig) -> dict:
    """Closed-form weight values and derivatives at time t and points xy.

    Returns alpha, xi, dalpha_dt, dxi_dt, grad_alpha, grad_xi; the gradient
    identities grad alpha = -grad xi = -lam xi grad eta0 hold by
    construction.
    """
    if not (cfg.t0 < t < cfg.t1):
        raise ValueError(f"t={t} outside the open window ({cfg.t0}, {cfg.t1})")
    eta, grad_eta = eta0_and_gradient(xy)
    gamma = gamma_value(t, cfg)
    dgamma = cfg.t0 + cfg.t1 - 2.0 * t
    K = math.exp(2.0 * cfg.lam * cfg.eta0_sup)
    E = np.exp(cfg.lam * eta)
    alpha = (K - E) / gamma
    xi = E / gamma
    dlog = dgamma / gamma
    grad_xi = cfg.lam * xi[..., None] * grad_eta
    return {
        "alpha": alpha,
        "xi": xi,
        "dalpha_dt": -alpha * dlog,
        "dxi_dt": -xi * dlog,
        "grad_alpha": -grad_xi,
        "grad_xi": grad_xi,
    }


def exp_weight(s: float, alpha: np.ndarray, shift: float = 0.0) -> np.ndarray:
    """e^{-2 s (alpha - shift)} with clamped underflow to exact zero."""
    expo = -2.0 * s * (np.asarray(alpha, dtype=float) - shift)
    return np.where(expo < _EXP_CLAMP, 0.0, np.exp(np.maximum(expo, _EXP_CLAMP)))


def weight_property_margins(cfg: CarlemanConfig, times: np.ndarray,
                            eta_values: np.ndarray) -> dict:
    """Empirical constants of the weight inequalities on a sample grid.

    The weights depend on x only through eta0(x), so the spatial samples are
    eta0 values in [0, sup eta0].  Passes iff every empirical constant is
    finite and inf xi * (t1-t0)^2 / 4 >= 1.
    """
    times = np.asarray(times, dtype=float)
    if times.min() <= cfg.t0 or times.max() >= cfg.t1:
        raise ValueError("sample times must lie strictly inside (t0, t1)")
    eta = np.asarray(eta_values, dtype=float)[None, :]
    tt = times[:, None]
    gamma = (tt - cfg.t0) * (cfg.t1 - tt)
    dgamma = cfg.t0 + cfg.t1 - 2.0 * tt
    K = math.exp(2.0 * cfg.lam * cfg.eta0_sup)
    E = np.exp(cfg.lam * eta)
    alpha = (K - E) / gamma
    xi = E / gamma
    dlog = dgamma / gamma
    dalpha = -alpha * dlog
    dxi = -xi * dlog
    s, tau = cfg.s, cfg.tau

    c_quot = np.abs((tau / 2.0 - s * alpha) * dlog)
    # d/dt[(tau/2 - s alpha) dlog gamma]; gamma'' = -2
    ddlog = (-2.0 * gamma - dgamma**2) / gamma**2
    d_quot = np.abs(-s * dalpha * dlog + (tau / 2.0 - s * alpha) * ddlog)

    window2 = (cfg.t1 - cfg.t0) ** 2
    report = {
        "sup_dalpha_over_xi2": float(np.max(np.abs(dalpha) / xi**2)),
        "sup_dxi_over_xi2": float(np.max(np.abs(dxi) / xi**2)),
        "inf_xi_times_window": float(np.min(xi) * window2 / 4.0),
        "sup_xi_over_xi3": float(np.max(xi / xi**3) * 16.0 / window2**2),
        "sup_c_quotient": float(np.max(c_quot / (s * xi**2))),
        "sup_d_quotient": float(np.max(d_quot / (s * xi**3))),
    }
    finite = all(np.isfinite(v) for v in report.values())
    report["passed"] = bool(finite and report["inf_xi_times_window"] >= 1.0 - 1e-12
                            and report["sup_xi_over_xi3"] <= 1.0 + 1e-12)
    return report


def sigma(xy: np.ndarray, a: np.ndarray) -> np.ndarray:
    """sigma = a |grad eta0|^2 = 4 a |x|^2 for isotropic diffusivity."""
    xy = np.asarray(xy, dtype=float)
    return np.asarray(a, dtype=float) * 4.0 * np.sum(xy**2, axis=-1)


def sigma_bounds_report(mesh: Mesh, a: np.ndarray, beta: float) -> dict:
    """Check beta |grad eta0|^2 <= sigma <= C1 with C1 = 4 sup a."""
    xy = mesh.cell_xy
    sig = sigma(xy, a)
    grad2 = 4.0 * np.sum(xy**2, axis=-1)
    C1 = 4.0 * float(np.max(a))
    lower_margin = float(np.min(sig - beta * grad2))
    upper_margin = float(np.min(C1 - sig))
    return {"passed": bool(lower_margin >= -1e-12 and upper_margin >= -1e-12),
            "lower_margin": lower_margin, "upper_margin": upper_margin,
            "C1": C1}


# --- shared weighted-quadrature machinery ----------------------------------

@dataclass(frozen=True)
class DiffusionPair:
    """One (bulk, surface) diffusion pair with its assembled operators."""

    a: np.ndarray
    d: np.ndarray
    op_bulk: SparseOp
    op_surf: SparseOp

    @classmethod
    def from_fields(cls, mesh: Mesh, a, d) -> "DiffusionPair":
        a = np.asarray(a, dtype=float) if np.ndim(a) else np.full(mesh.n_cells, float(a))
        d = np.asarray(d, dtype=float) if np.ndim(d) else np.full(mesh.n_theta, float(d))
        return cls(a=a, d=d, op_bulk=assemble_bulk_diffusion(mesh, a),
                   op_surf=assemble_surface_diffusion(mesh, d))


class WeightEvaluator:
    """Weight tables over window-interior trajectory nodes, with the shift.

    All quantities returned by ``bulk_weight``/``surf_weight`` carry the
    common factor e^{+2 s alpha_ref}; ``log_scale`` = -2 s alpha_ref restores
    absolute magnitudes.
    """

    def __init__(self, cfg: CarlemanConfig, mesh: Mesh, traj: Trajectory):
        self.cfg = cfg
        self.mesh = mesh
        tol = 1e-9 * max(traj.dt, 1e-30)
        ks = [k for k in range(1, traj.n_nodes - 1)
              if traj.times[k - 1] > cfg.t0 + tol
              and traj.times[k + 1] < cfg.t1 - tol]
        if not ks:
            raise ValueError("trajectory has no interior nodes in the window")
        self.k_idx = np.asarray(ks)
        self.times = traj.times[self.k_idx]
        self.dt = traj.dt

        eta, _ = eta0_and_gradient(mesh.cell_xy)
        gamma = gamma_value(self.times, cfg)
        K = math.exp(2.0 * cfg.lam * cfg.eta0_sup)
        E = np.exp(cfg.lam * eta)
        self.alpha_bulk = (K - E)[None, :] / gamma[:, None]
        self.xi_bulk = E[None, :] / gamma[:, None]
        self.alpha_surf = (K - 1.0) / gamma
        self.xi_surf = 1.0 / gamma
        self.alpha_ref = float(min(self.alpha_bulk.min(), self.alpha_surf.min()))
        self.W_bulk = exp_weight(cfg.s, self.alpha_bulk, shift=self.alpha_ref)
        self.W_surf = exp_weight(cfg.s, self.alpha_surf, shift=self.alpha_ref)

    @property
    def log_scale(self) -> float:
        return -2.0 * self.cfg.s * self.alpha_ref

    def bulk_weight(self, power: float) -> np.ndarray:
        """(shifted weight) * (s xi)^power, shape (n_times, n_cells)."""
        return self.W_bulk * (self.cfg.s * self.xi_bulk) ** power

    def surf_weight(self, power: float) -> np.ndarray:
        return self.W_surf * (self.cfg.s * self.xi_surf) ** power


def _grad_quadrature(mesh: Mesh, z: np.ndarray, z_gamma: np.ndarray,
                     w_cell: np.ndarray, w_surf: np.ndarray) -> float:
    """Face-based quadrature of int w |grad z|^2 including boundary faces."""
    du = z[mesh.faces_a] - z[mesh.faces_b]
    wf = 0.5 * (w_cell[mesh.faces_a] + w_cell[mesh.faces_b])
    total = float(np.dot(mesh.faces_geom * wf, du**2))
    dub = z_gamma - z[mesh.bnd_cells]
    wb = 0.5 * (w_cell[mesh.bnd_cells] + w_surf)
    total += float(np.dot(mesh.bnd_geom * wb, dub**2))
    return total


def _surf_grad_quadrature(mesh: Mesh, zg: np.ndarray, w: np.ndarray) -> float:
    ds = mesh.surface_weights[0]
    du = np.roll(zg, -1) - zg
    wf = 0.5 * (w + np.roll(w, -1))
    return float(np.sum(wf * du**2 / ds))


@dataclass
class WeightedNorms:
    i_omega: float
    i_gamma: float
    log_scale: float
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.i_omega + self.i_gamma


def weighted_norms(tau: float, traj: Trajectory, cfg: CarlemanConfig,
                   mesh: Mesh, pair: DiffusionPair, which: str = "z",
                   evaluator: WeightEvaluator | None = None) -> WeightedNorms:
    """Weighted space-time energies of one field pair over the window.

    Bulk terms carry (s xi)^{tau-1}, lam^2 (s xi)^{tau+1}, lam^4 (s xi)^{tau+3};
    surface terms carry lam-powers (1, lam, lam^3) plus the lam (s xi)^{tau+1}
    conormal-flux term.  Endpoint nodes are excluded (the weight vanishes
    faster than any polynomial there).  Values share the evaluator's shift.
    """
    ev = evaluator or WeightEvaluator(cfg, mesh, traj)
    if which == "z":
        zb, zg = traj.z, traj.z_gamma
    elif which == "y":
        zb, zg = traj.y, traj.y_gamma
    else:
        raise ValueError("which must be 'y' or 'z'")
    lam, dt = cfg.lam, ev.dt
    areas, ds = mesh.cell_areas, mesh.surface_weights

    w_te_b = ev.bulk_weight(tau - 1.0)
    w_gr_b = ev.bulk_weight(tau + 1.0)
    w_z_b = ev.bulk_weight(tau + 3.0)
    w_te_s = ev.surf_weight(tau - 1.0)
    w_gr_s = ev.surf_weight(tau + 1.0)
    w_z_s = ev.surf_weight(tau + 3.0)

    t_time = t_ell = t_grad = t_zero = 0.0
    s_time = s_ell = s_grad = s_zero = s_con = 0.0
    for row, k in enumerate(ev.k_idx):
        dtz = (zb[k + 1] - zb[k - 1]) / (2.0 * dt)
        dtzg = (zg[k + 1] - zg[k - 1]) / (2.0 * dt)
        div_b = pair.op_bulk.apply(zb[k], zg[k])
        div_s = pair.op_surf.apply(zg[k])
        flux = conormal_flux(mesh, pair.a, zb[k], zg[k])

        t_time += dt * float(np.dot(areas, w_te_b[row] * dtz**2))
        t_ell += dt * float(np.dot(areas, w_te_b[row] * div_b**2))
        t_grad += dt * lam**2 * _grad_quadrature(mesh, zb[k], zg[k],
                                                 w_gr_b[row],
                                                 np.full(mesh.n_theta, w_gr_s[row]))
        t_zero += dt * lam**4 * float(np.dot(areas, w_z_b[row] * zb[k]**2))

        s_time += dt * float(np.dot(ds, w_te_s[row] * dtzg**2))
        s_ell += dt * float(np.dot(ds, w_te_s[row] * div_s**2))
        s_grad += dt * lam * _surf_grad_quadrature(
            mesh, zg[k], np.full(mesh.n_theta, w_gr_s[row]))
        s_zero += dt * lam**3 * float(np.dot(ds, w_z_s[row] * zg[k]**2))
        s_con += dt * lam * float(np.dot(ds, w_gr_s[row] * flux**2))

    terms = {
        "bulk_time": t_time, "bulk_elliptic": t_ell,
        "bulk_gradient": t_grad, "bulk_zeroth": t_zero,
        "surf_time": s_time, "surf_elliptic": s_ell,
        "surf_gradient": s_grad, "surf_zeroth": s_zero,
        "surf_conormal": s_con,
    }
    return WeightedNorms(
        i_omega=t_time + t_ell + t_grad + t_zero,
        i_gamma=s_time + s_ell + s_grad + s_zero + s_con,
        log_scale=ev.log_scale, terms=terms)


def carleman_ratio(tau: float, traj: Trajectory, cfg: CarlemanConfig,
                   mesh: Mesh, pair: DiffusionPair, regions: RegionSet) -> dict:
    """Left/right sides of the single-pair weighted estimate, constant-free.

    lhs = I_Omega + I_Gamma; rhs = lam^4 observation term + (s xi)^tau
    weighted residual terms of the heat operators.  Both sides share one
    exponent shift, so the ratio is shift-invariant.
    """
    ev = WeightEvaluator(cfg, mesh, traj)
    norms = weighted_norms(tau, traj, cfg, mesh, pair, "z", evaluator=ev)
    lam, dt = cfg.lam, ev.dt
    areas, ds = mesh.cell_areas, mesh.surface_weights

    w_obs = ev.bulk_weight(tau + 3.0)
    w_res_b = ev.bulk_weight(tau)
    w_res_s = ev.surf_weight(tau)
    obs = res_b = res_s = 0.0
    cells = regions.omega
    for row, k in enumerate(ev.k_idx):
        obs += dt * lam**4 * float(
            np.dot(areas[cells], w_obs[row][cells] * traj.z[k][cells] ** 2))
        dtz = (traj.z[k + 1] - traj.z[k - 1]) / (2.0 * dt)
        Lz = dtz - pair.op_bulk.apply(traj.z[k], traj.z_gamma[k])
        res_b += dt * float(np.dot(areas, w_res_b[row] * Lz**2))
        dtzg = (traj.z_gamma[k + 1] - traj.z_gamma[k - 1]) / (2.0 * dt)
        Lzg = dtzg - pair.op_surf.apply(traj.z_gamma[k]) \
            + conormal_flux(mesh, pair.a, traj.z[k], traj.z_gamma[k])
        res_s += dt * float(np.dot(ds, w_res_s[row] * Lzg**2))

    lhs = norms.total
    rhs = obs + res_b + res_s
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = math.inf if lhs > 0 else math.nan
    return {"lhs": lhs, "rhs": rhs, "ratio": ratio, "log_scale": ev.log_scale,
            "parts": {"observation": obs, "bulk_residual": res_b,
                      "surface_residual": res_s, **norms.terms}}


def shifted_ratio(traj: Trajectory, sources: dict, cfg: CarlemanConfig,
                  mesh: Mesh, pair1: DiffusionPair, pair2: DiffusionPair,
                  regions: RegionSet, potentials, p0: float | None = None) -> dict:
    """One-observation estimate for the coupled linear system with sources.

    lhs = lam^{-4+eps} [I(-3) of the y pair] + [I(0) of the z pair];
    rhs = s^4 lam^{4+eps} observation(z) + s^{-3} lam^{-4+eps} xi^{-3}
    weighted (f1, g1) terms + lam^{2 eps} (f2, g2) terms.  Refuses to run
    unless p21 and q21 sit above the coercivity floor.
    """
    floor = p0 if p0 is not None else potentials.p0
    if floor <= 0 or potentials.p21.min() < floor or potentials.q21.min() < floor:
        raise ValueError(
            "shifted estimate needs p21, q21 >= p0 > 0 "
            f"(floor {floor}, min p21 {potentials.p21.min():.3g}, "
            f"min q21 {potentials.q21.min():.3g})")

    ev = WeightEvaluator(cfg, mesh, traj)
    eps, lam, s = cfg.epsilon, cfg.lam, cfg.s
    n_y = weighted_norms(-3.0, traj, cfg, mesh, pair1, "y", evaluator=ev)
    n_z = weighted_norms(0.0, traj, cfg, mesh, pair2, "z", evaluator=ev)
    lhs = lam ** (-4.0 + eps) * n_y.total + n_z.total

    dt = ev.dt
    areas, ds = mesh.cell_areas, mesh.surface_weights
    from .forward import _normalize_sources
    srcs = _normalize_sources(sources or {}, mesh)

    def src_at(key, t, n):
        fn = srcs.get(key) if srcs else None
        return np.zeros(n) if fn is None else np.asarray(fn(t), dtype=float)

    xi_m3_b = ev.W_bulk * ev.xi_bulk ** (-3.0)
    xi_m3_s = ev.W_surf * ev.xi_surf ** (-3.0)
    xi4_b = ev.W_bulk * ev.xi_bulk ** 4.0
    obs = f1_term = g1_term = f2_term = g2_term = 0.0
    cells = regions.omega
    for row, k in enumerate(ev.k_idx):
        t = float(ev.times[row])
        obs += dt * float(np.dot(areas[cells],
                                 xi4_b[row][cells] * traj.z[k][cells] ** 2))
        f1 = src_at("f1", t, mesh.n_cells)
        g1 = src_at("g1", t, mesh.n_theta)
        f2 = src_at("f2", t, mesh.n_cells)
        g2 = src_at("g2", t, mesh.n_theta)
        f1_term += dt * float(np.dot(areas, xi_m3_b[row] * f1**2))
        g1_term += dt * float(np.dot(ds, xi_m3_s[row] * g1**2))
        f2_term += dt * float(np.dot(areas, ev.W_bulk[row] * f2**2))
        g2_term += dt * float(np.dot(ds, ev.W_surf[row] * g2**2))

    rhs = (s**4 * lam ** (4.0 + eps) * obs
           + s ** (-3.0) * lam ** (-4.0 + eps) * (f1_term + g1_term)
           + lam ** (2.0 * eps) * (f2_term + g2_term))
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = math.inf if lhs > 0 else math.nan
    return {"lhs": lhs, "rhs": rhs, "ratio": ratio, "log_scale": ev.log_scale,
            "parts": {"observation": s**4 * lam ** (4.0 + eps) * obs,
                      "f1_g1": s ** (-3.0) * lam ** (-4.0 + eps) * (f1_term + g1_term),
                      "f2_g2": lam ** (2.0 * eps) * (f2_term + g2_term),
                      "norms_y": n_y.total, "norms_z": n_z.total}}


# --- weight invariant checks ------------------------------------------------

def alpha_time_minimum_margin(cfg: CarlemanConfig, times: np.ndarray,
                              eta_values: np.ndarray) -> float:
    """min over the grid of alpha(t, .) - alpha(theta, .), >= 0 pointwise."""
    theta = 0.5 * (cfg.t0 + cfg.t1)
    eta = np.asarray(eta_values, dtype=float)
    K = math.exp(2.0 * cfg.lam * cfg.eta0_sup)
    num = K - np.exp(cfg.lam * eta)
    a_theta = num / gamma_value(theta, cfg)
    margins = []
    for t in np.asarray(times, dtype=float):
        margins.append(np.min(num / gamma_value(t, cfg) - a_theta))
    return float(min(margins))


def weight_vanishing_report(cfg: CarlemanConfig, dt: float,
                            powers=(-3.0, 0.0, 4.0)) -> dict:
    """Raw clamped weight e^{-2 s alpha} xi^k at the first/last interior nodes.

    For s above the default floor these values drop below 1e-300 (they
    underflow to exact zero), realizing the endpoint degeneracy.
    """
    out = {}
    worst = 0.0
    for t in (cfg.t0 + dt, cfg.t1 - dt):
        gamma = gamma_value(t, cfg)
        for eta in (0.0, cfg.eta0_sup):
            K = math.exp(2.0 * cfg.lam * cfg.eta0_sup)
            E = math.exp(cfg.lam * eta)
            alpha = (K - E) / gamma
            xi = E / gamma
            for k in powers:
                v = float(exp_weight(cfg.s, np.array([alpha]))[0] * xi**k)
                worst = max(worst, v)
    out["max_endpoint_weight"] = worst
    out["passed"] = bool(worst < 1e-300)
    return out


def sum_identity_residual(cfg: CarlemanConfig, t: float, xy: np.ndarray) -> float:
    """alpha + xi - e^{2 lam sup}/gamma, zero in exact arithmetic."""
    w = weights(t, xy, cfg)
    K = math.exp(2.0 * cfg.lam * cfg.eta0_sup)
    target = K / gamma_value(t, cfg)
    return float(np.abs(w["alpha"] + w["xi"] - target).max())
