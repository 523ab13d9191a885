"""Nonnegativity diagnostics for the general coupled reaction system.

Quasi-positivity of the reactions plus componentwise nonnegative data keeps
the solution componentwise nonnegative; the discrete counterpart is checked
empirically (minimum over all fields and times, and monotonicity of the
negative-part energy), backed by the sufficient off-diagonal sign condition
on the implicit matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ReactionSet, SemilinearSystem, Trajectory
from .geometry import Mesh
from .model import DiffusionSpec, InitialData


@dataclass
class QPReport:
    f1_ok: bool
    f2_ok: bool
    g1_ok: bool
    g2_ok: bool
    worst_violation: tuple | None = None  # (function id, sample point, value)

    @property
    def passed(self) -> bool:
        return self.f1_ok and self.f2_ok and self.g1_ok and self.g2_ok

    def as_dict(self) -> dict:
        d = {"f1_ok": self.f1_ok, "f2_ok": self.f2_ok,
             "g1_ok": self.g1_ok, "g2_ok": self.g2_ok}
        if self.worst_violation is not None:
            fid, pt, val = self.worst_violation
            d["worst_violation"] = {"function": fid, "at": float(pt), "value": float(val)}
        return d


def check_qp(reactions: ReactionSet, samples: np.ndarray) -> QPReport:
    """Evaluate the quasi-positivity sign conditions on a nonnegative grid.

    Checks f1(0, v) >= 0 and g1(0, v) >= 0 over sample values v, and
    f2(u, 0) >= 0 and g2(u, 0) >= 0 over sample values u.
    """
    v = np.asarray(samples, dtype=float)
    if v.size == 0 or v.min() < 0:
        raise ValueError("samples must be a nonempty nonnegative grid")
    zero = np.zeros_like(v)

    flags = {}
    worst = None
    for fid, fn, args in (
        ("f1", reactions.f1, (zero, v)),
        ("g1", reactions.g1, (zero, v)),
        ("f2", reactions.f2, (v, zero)),
        ("g2", reactions.g2, (v, zero)),
    ):
        if fn is None:
            flags[fid] = True
            continue
        vals = np.asarray(fn(*args), dtype=float)
        ok = bool(vals.min() >= 0)
        flags[fid] = ok
        if not ok:
            i = int(np.argmin(vals))
            if worst is None or vals[i] < worst[2]:
                worst = (fid, float(v[i]), float(vals[i]))
    return QPReport(f1_ok=flags["f1"], f2_ok=flags["f2"],
                    g1_ok=flags["g1"], g2_ok=flags["g2"],
                    worst_violation=worst)


def negative_part_energy(traj: Trajectory, mesh: Mesh) -> dict:
    """Series E-(t) = |u-|^2_{L2(Omega)} + |u_gamma-|^2_{L2(Gamma)} per pair."""
    ym = np.minimum(traj.y, 0.0)
    ygm = np.minimum(traj.y_gamma, 0.0)
    zm = np.minimum(traj.z, 0.0)
    zgm = np.minimum(traj.z_gamma, 0.0)
    ey = (ym**2) @ mesh.cell_areas + (ygm**2) @ mesh.surface_weights
    ez = (zm**2) @ mesh.cell_areas + (zgm**2) @ mesh.surface_weights
    return {"times": traj.times, "E_y": ey, "E_z": ez}


def negative_part_energy_monotone(traj: Trajectory, mesh: Mesh,
                                  tol_scale: float = 1e-8) -> dict:
    """Check E-(t_{n+1}) <= E-(t_n) + tol*dt for both field pairs.

    tol is 1e-8 times the squared field scale, so identically nonnegative
    trajectories pass trivially and genuine growth is flagged.
    """
    series = negative_part_energy(traj, mesh)
    scale = max(np.abs(traj.y).max(), np.abs(traj.z).max(),
                np.abs(traj.y_gamma).max(), np.abs(traj.z_gamma).max(), 1e-300)
    tol = tol_scale * scale**2 * traj.dt
    out = {"times": series["times"], "tol_per_step": tol}
    for key in ("E_y", "E_z"):
        e = series[key]
        growth = np.diff(e)
        out[key] = e
        out[f"{key}_monotone"] = bool(growth.max(initial=0.0) <= tol)
        out[f"{key}_max_growth"] = float(growth.max(initial=0.0))
    out["passed"] = out["E_y_monotone"] and out["E_z_monotone"]
    return out


def implicit_offdiagonal_report(system: SemilinearSystem, dt: float) -> dict:
    """Sufficient sign condition for an inverse-positive implicit matrix."""
    S = system.implicit_matrix(dt).tocoo()
    off = S.data[S.row != S.col]
    max_off = float(off.max(initial=0.0))
    diag = S.diagonal()
    return {
        "offdiag_nonpositive": bool(max_off <= 0.0),
        "max_offdiagonal": max_off,
        "min_diagonal": float(diag.min()),
    }


def positivity_experiment(mesh: Mesh, diffusion: DiffusionSpec,
                          init: InitialData, reactions: ReactionSet,
                          t_end: float, dt: float,
                          qp_samples: np.ndarray | None = None) -> dict:
    """Solve the general system from nonnegative data with clipped reactions.

    Mirrors the positive-part construction: reactions are evaluated at the
    componentwise nonnegative parts of the state.  Refuses to run when the
    quasi-positivity check fails or the data has a negative component.
    """
    if qp_samples is None:
        qp_samples = np.linspace(0.0, 2.0, 41)
    qp = check_qp(reactions, qp_samples)
    if not qp.passed:
        raise ValueError(f"quasi-positivity fails: {qp.worst_violation}")
    floor = min(init.y0.min(), init.z0.min(),
                init.y0_gamma.min(), init.z0_gamma.min())
    if floor < 0:
        raise ValueError(f"initial data has a negative component ({floor:.3g})")

    clipped = ReactionSet(f1=reactions.f1, f2=reactions.f2,
                          g1=reactions.g1, g2=reactions.g2,
                          lipschitz_bound=reactions.lipschitz_bound, clip=True)
    system = SemilinearSystem(mesh, diffusion)
    traj = system.solve(init, t_end, dt, reactions=clipped)

    min_series = np.minimum.reduce([traj.y.min(axis=1), traj.z.min(axis=1),
                                    traj.y_gamma.min(axis=1),
                                    traj.z_gamma.min(axis=1)])
    energy = negative_part_energy(traj, mesh)
    return {
        "qp": qp.as_dict(),
        "min_value": float(min_series.min()),
        "min_series": min_series,
        "energy_times": energy["times"],
        "E_y": energy["E_y"],
        "E_z": energy["E_z"],
        "matrix_check": implicit_offdiagonal_report(system, dt),
        "trajectory": traj,
    }
