"""IMEX time stepping of the coupled four-field bulk-surface systems.

One monolithic sparse solve advances (y, z, y_gamma, z_gamma) together:
diffusion, the conormal coupling, and all linear potential terms are
implicit (single LU factorization reused across steps); reaction terms and
sources are explicit.  The integrated (area/arc-weighted) form keeps the
diffusion + coupling block symmetric, which is what makes bulk-surface mass
conservation exact for zero potentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh, RegionSet
from .model import DiffusionSpec, InitialData, Nonlinearity, PotentialSet
from .operators import SparseOp, assemble_bulk_diffusion, assemble_surface_diffusion


class SolverError(RuntimeError):
    """Numerical failure inside a solve (singular system, NaN state)."""


@dataclass(frozen=True)
class SystemState:
    y: np.ndarray
    z: np.ndarray
    y_gamma: np.ndarray
    z_gamma: np.ndarray
    t: float

    def validate(self, mesh: Mesh) -> None:
        for name, arr, n in (("y", self.y, mesh.n_cells), ("z", self.z, mesh.n_cells),
                             ("y_gamma", self.y_gamma, mesh.n_theta),
                             ("z_gamma", self.z_gamma, mesh.n_theta)):
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")


@dataclass
class Trajectory:
    """Uniformly spaced states; row k of each table is the state at times[k]."""

    times: np.ndarray
    y: np.ndarray        # (n_nodes, n_cells)
    z: np.ndarray
    y_gamma: np.ndarray  # (n_nodes, n_theta)
    z_gamma: np.ndarray
    dt: float
    sources: dict | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.times)

    def index_at(self, t: float) -> int:
        k = int(round((t - self.times[0]) / self.dt)) if self.dt > 0 else 0
        if k < 0 or k >= self.n_nodes:
            raise ValueError(f"time {t} outside trajectory range")
        return k

    def state(self, k: int) -> SystemState:
        return SystemState(self.y[k].copy(), self.z[k].copy(),
                           self.y_gamma[k].copy(), self.z_gamma[k].copy(),
                           float(self.times[k]))

    def difference(self, other: "Trajectory") -> "Trajectory":
        if self.n_nodes != other.n_nodes or abs(self.dt - other.dt) > 1e-14:
            raise ValueError("trajectories are not on the same time grid")
        return Trajectory(times=self.times.copy(), dt=self.dt,
                          y=self.y - other.y, z=self.z - other.z,
                          y_gamma=self.y_gamma - other.y_gamma,
                          z_gamma=self.z_gamma - other.z_gamma)


@dataclass
class ObservationRecord:
    """Time derivative of z sampled on omega cells inside a time window."""

    values: np.ndarray        # (n_times, n_omega_cells)
    cell_indices: np.ndarray
    time_indices: np.ndarray
    times: np.ndarray
    cell_weights: np.ndarray  # cell areas restricted to omega
    dt: float

    def norm(self) -> float:
        """L2(omega x window) norm of the sampled time derivative."""
        per_time = self.values**2 @ self.cell_weights
        return float(np.sqrt(per_time.sum() * self.dt))

    @property
    def quadrature_weights(self) -> np.ndarray:
        """Per-sample space-time weights (cell areas times dt)."""
        return self.cell_weights * self.dt


@dataclass(frozen=True)
class ReactionSet:
    """General per-equation reactions for the positivity-type system.

    With ``clip`` set, arguments are replaced by their positive parts, which
    is the construction used to propagate nonnegativity.
    """

    f1: Callable | None = None
    f2: Callable | None = None
    g1: Callable | None = None
    g2: Callable | None = None
    lipschitz_bound: float = 0.0
    clip: bool = False

    def rates(self, y, z, yg, zg):
        if self.clip:
            y, z = np.maximum(y, 0.0), np.maximum(z, 0.0)
            yg, zg = np.maximum(yg, 0.0), np.maximum(zg, 0.0)
        zero_b = 0.0
        out = []
        for fn, args in ((self.f1, (y, z)), (self.f2, (y, z)),
                         (self.g1, (yg, zg)), (self.g2, (yg, zg))):
            out.append(fn(*args) if fn is not None else zero_b)
        return out


def _normalize_sources(sources, mesh: Mesh):
    """Turn a {f1,f2,g1,g2} spec of arrays/callables into callables of t."""
    if sources is None:
        return None
    sizes = {"f1": mesh.n_cells, "f2": mesh.n_cells,
             "g1": mesh.n_theta, "g2": mesh.n_theta}
    out = {}
    for key, n in sizes.items():
        val = sources.get(key)
        if val is None:
            out[key] = None
        elif callable(val):
            out[key] = val
        else:
            arr = np.asarray(val, dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"source {key} has shape {arr.shape}, expected ({n},)")
            out[key] = (lambda a: (lambda t: a))(arr)
    return out


class SemilinearSystem:
    """Assembled coupled system: operators, implicit matrix, IMEX stepping."""

    def __init__(self, mesh: Mesh, diffusion: DiffusionSpec,
                 potentials: PotentialSet | None = None,
                 nl_f: Nonlinearity | None = None,
                 nl_g: Nonlinearity | None = None):
        self.mesh = mesh
        self.diffusion = diffusion
        self.potentials = potentials or PotentialSet.from_values(mesh)
        self.nl_f = nl_f
        self.nl_g = nl_g

        self.op_bulk1 = assemble_bulk_diffusion(mesh, diffusion.a1)
        self.op_bulk2 = assemble_bulk_diffusion(mesh, diffusion.a2)
        self.op_surf1 = assemble_surface_diffusion(mesh, diffusion.d1)
        self.op_surf2 = assemble_surface_diffusion(mesh, diffusion.d2)

        nb, ns = mesh.n_cells, mesh.n_theta
        self.n_dof = 2 * nb + 2 * ns
        self.offsets = (0, nb, 2 * nb, 2 * nb + ns)
        self.mass = np.concatenate([mesh.cell_areas, mesh.cell_areas,
                                    mesh.surface_weights, mesh.surface_weights])
        self._K = self._assemble_coupling()
        self._lu_cache: dict[float, spla.SuperLU] = {}
        self._S_cache: dict[float, sp.csc_matrix] = {}

    def _assemble_coupling(self) -> sp.csc_matrix:
        """Integrated linear operator K: diffusion + trace coupling + potentials."""
        mesh, pot = self.mesh, self.potentials
        nb, ns = mesh.n_cells, mesh.n_theta
        oy, oz, oyg, ozg = self.offsets
        areas, ds = mesh.cell_areas, mesh.surface_weights
        blocks = []

        def add(op_rows, op_cols, matrix):
            blocks.append((op_rows, op_cols, sp.coo_matrix(matrix)))

        # bulk diffusion + flux to the surface unknowns
        add(oy, oy, self.op_bulk1.matrix)
        add(oy, oyg, self.op_bulk1.boundary)
        add(oz, oz, self.op_bulk2.matrix)
        add(oz, ozg, self.op_bulk2.boundary)
        # surface diffusion and the returning conormal flux
        t1, t2 = self.op_bulk1.bnd_t, self.op_bulk2.bnd_t
        j = np.arange(ns)
        add(oyg, oyg, self.op_surf1.matrix - sp.diags(t1))
        add(oyg, oy, sp.coo_matrix((t1, (j, mesh.trace_map)), shape=(ns, nb)))
        add(ozg, ozg, self.op_surf2.matrix - sp.diags(t2))
        add(ozg, oz, sp.coo_matrix((t2, (j, mesh.trace_map)), shape=(ns, nb)))
        # linear potential terms, area-weighted
        add(oy, oy, sp.diags(areas * pot.p11))
        add(oy, oz, sp.diags(areas * pot.p12))
        add(oz, oy, sp.diags(areas * pot.p21))
        add(oz, oz, sp.diags(areas * pot.p22))
        add(oyg, oyg, sp.diags(ds * pot.q11))
        add(oyg, ozg, sp.diags(ds * pot.q12))
        add(ozg, oyg, sp.diags(ds * pot.q21))
        add(ozg, ozg, sp.diags(ds * pot.q22))

        rows, cols, vals = [], [], []
        for orow, ocol, m in blocks:
            rows.append(m.row + orow)
            cols.append(m.col + ocol)
            vals.append(m.data)
        K = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dof, self.n_dof))
        return K

    def implicit_matrix(self, dt: float) -> sp.csc_matrix:
        key = float(dt)
        if key not in self._S_cache:
            S = sp.diags(self.mass / dt) - self._K
            self._S_cache[key] = S.tocsc()
        return self._S_cache[key]

    def factorization(self, dt: float) -> spla.SuperLU:
        key = float(dt)
        if key not in self._lu_cache:
            try:
                self._lu_cache[key] = spla.splu(self.implicit_matrix(dt))
            except RuntimeError as exc:  # singular factorization
                raise SolverError(f"implicit factorization failed: {exc}") from exc
        return self._lu_cache[key]

    def stability_lipschitz(self, reactions: ReactionSet | None = None) -> float:
        """Lipschitz scale of the explicit part plus potential magnitudes."""
        pot = self.potentials
        L = 0.0
        if self.nl_f is not None:
            L = max(L, float(np.abs(pot.p13).max()) * self.nl_f.lipschitz_bound)
        if self.nl_g is not None:
            L = max(L, float(np.abs(pot.q13).max()) * self.nl_g.lipschitz_bound)
        for name in ("p11", "p12", "p21", "p22", "q11", "q12", "q21", "q22"):
            L = max(L, float(np.abs(getattr(pot, name)).max()))
        if reactions is not None:
            L = max(L, reactions.lipschitz_bound)
        return L

    def explicit_rate(self, y, z, yg, zg, t, sources=None,
                      reactions: ReactionSet | None = None):
        pot = self.potentials
        nb, ns = self.mesh.n_cells, self.mesh.n_theta
        ey = np.zeros(nb)
        ez = np.zeros(nb)
        eg = np.zeros(ns)
        ezg = np.zeros(ns)
        if self.nl_f is not None:
            ey += pot.p13 * self.nl_f(y, z)
        if self.nl_g is not None:
            eg += pot.q13 * self.nl_g(yg, zg)
        if reactions is not None:
            r1, r2, r3, r4 = reactions.rates(y, z, yg, zg)
            ey = ey + r1
            ez = ez + r2
            eg = eg + r3
            ezg = ezg + r4
        if sources is not None:
            if sources["f1"] is not None:
                ey = ey + sources["f1"](t)
            if sources["f2"] is not None:
                ez = ez + sources["f2"](t)
            if sources["g1"] is not None:
                eg = eg + sources["g1"](t)
            if sources["g2"] is not None:
                ezg = ezg + sources["g2"](t)
        return ey, ez, eg, ezg

    def _pack(self, y, z, yg, zg):
        return np.concatenate([y, z, yg, zg])

    def _unpack(self, x):
        nb, ns = self.mesh.n_cells, self.mesh.n_theta
        return x[:nb], x[nb:2 * nb], x[2 * nb:2 * nb + ns], x[2 * nb + ns:]

    def step_imex(self, state: SystemState, dt: float, sources=None,
                  reactions: ReactionSet | None = None) -> SystemState:
        """One IMEX step; ``sources`` must already be normalized callables."""
        L = self.stability_lipschitz(reactions)
        if L > 0 and dt > 0.5 / L:
            raise ValueError(
                f"dt={dt} exceeds the explicit-part stability bound 0.5/L={0.5 / L:.3g}")
        lu = self.factorization(dt)
        x = self._pack(state.y, state.z, state.y_gamma, state.z_gamma)
        ey, ez, eg, ezg = self.explicit_rate(state.y, state.z, state.y_gamma,
                                             state.z_gamma, state.t,
                                             sources=sources, reactions=reactions)
        rhs = self.mass * (x / dt + self._pack(ey, ez, eg, ezg))
        x_new = lu.solve(rhs)
        if not np.isfinite(x_new).all():
            raise SolverError(f"non-finite state after step at t={state.t:.6g}")
        y, z, yg, zg = self._unpack(x_new)
        return SystemState(y, z, yg, zg, state.t + dt)

    def solve(self, init: InitialData, t_end: float, dt: float,
              sources=None, reactions: ReactionSet | None = None,
              t_start: float = 0.0,
              init_state: SystemState | None = None) -> Trajectory:
        """Integrate from t_start to t_end; returns all intermediate states.

        ``init_state`` overrides ``init`` when restarting mid-trajectory.
        """
        mesh = self.mesh
        srcs = _normalize_sources(sources, mesh)
        if init_state is not None:
            state = init_state
        else:
            state = SystemState(init.y0.copy(), init.z0.copy(),
                                init.y0_gamma.copy(), init.z0_gamma.copy(), t_start)
        state.validate(mesh)
        n_steps = max(0, math.ceil((t_end - t_start) / dt - 1e-9)) if t_end > t_start else 0

        y = np.empty((n_steps + 1, mesh.n_cells))
        z = np.empty((n_steps + 1, mesh.n_cells))
        yg = np.empty((n_steps + 1, mesh.n_theta))
        zg = np.empty((n_steps + 1, mesh.n_theta))
        times = t_start + dt * np.arange(n_steps + 1)
        y[0], z[0], yg[0], zg[0] = state.y, state.z, state.y_gamma, state.z_gamma
        for k in range(n_steps):
            try:
                state = self.step_imex(state, dt, sources=srcs, reactions=reactions)
            except SolverError as exc:
                raise SolverError(f"step {k + 1} (t={times[k]:.6g}): {exc}") from exc
            y[k + 1], z[k + 1] = state.y, state.z
            yg[k + 1], zg[k + 1] = state.y_gamma, state.z_gamma
        return Trajectory(times=times, y=y, z=z, y_gamma=yg, z_gamma=zg,
                          dt=float(dt), sources=sources)


def observe(traj: Trajectory, regions: RegionSet, mesh: Mesh,
            t0: float | None = None, t1: float | None = None) -> ObservationRecord:
    """Sample the centered time derivative of z on omega inside (t0, t1).

    Only nodes whose full centered stencil lies strictly inside the open
    window are used, so the record depends on the trajectory only through
    its restriction to omega x (t0, t1).
    """
    t0 = regions.t0 if t0 is None else t0
    t1 = regions.t1 if t1 is None else t1
    tol = 1e-9 * max(traj.dt, 1e-30)
    k_idx = [k for k in range(1, traj.n_nodes - 1)
             if traj.times[k - 1] > t0 + tol and traj.times[k + 1] < t1 - tol]
    if not k_idx:
        raise ValueError(
            f"window ({t0}, {t1}) leaves no interior stencil nodes in the trajectory")
    k_idx = np.asarray(k_idx)
    cells = regions.omega
    dz = (traj.z[k_idx + 1][:, cells] - traj.z[k_idx - 1][:, cells]) / (2 * traj.dt)
    return ObservationRecord(values=dz, cell_indices=cells, time_indices=k_idx,
                             times=traj.times[k_idx],
                             cell_weights=mesh.cell_areas[cells], dt=traj.dt)


def mass_series(traj: Trajectory, mesh: Mesh) -> np.ndarray:
    """Total bulk+surface content of the y pair per node (conserved when
    potentials, reactions, and sources vanish)."""
    return traj.y @ mesh.cell_areas + traj.y_gamma @ mesh.surface_weights


def write_checkpoints(traj: Trajectory, path: str, fmt: str = "npz") -> None:
    """Persist per-node state snapshots for later adjoint/restart use.

    ``npz`` writes one compressed binary file; ``csv`` writes one file per
    time node under ``path`` with rows (cell index, y, z) plus a matching
    surface file with rows (node index, y_gamma, z_gamma).
    """
    import os

    if fmt == "npz":
        np.savez_compressed(path, times=traj.times, y=traj.y, z=traj.z,
                            y_gamma=traj.y_gamma, z_gamma=traj.z_gamma,
                            dt=traj.dt)
        return
    if fmt != "csv":
        raise ValueError(f"unknown checkpoint format {fmt!r}")
    os.makedirs(path, exist_ok=True)
    for k in range(traj.n_nodes):
        with open(os.path.join(path, f"state_{k:06d}.csv"), "w") as fh:
            fh.write("cell,y,z\n")
            for i in range(traj.y.shape[1]):
                fh.write(f"{i},{traj.y[k, i]:.17g},{traj.z[k, i]:.17g}\n")
        with open(os.path.join(path, f"surface_{k:06d}.csv"), "w") as fh:
            fh.write("node,y_gamma,z_gamma\n")
            for j in range(traj.y_gamma.shape[1]):
                fh.write(f"{j},{traj.y_gamma[k, j]:.17g},"
                         f"{traj.z_gamma[k, j]:.17g}\n")


def load_checkpoints(path: str) -> Trajectory:
    """Rehydrate a trajectory saved with ``write_checkpoints(..., "npz")``."""
    data = np.load(path)
    return Trajectory(times=data["times"], y=data["y"], z=data["z"],
                      y_gamma=data["y_gamma"], z_gamma=data["z_gamma"],
                      dt=float(data["dt"]))


# --- manufactured-solution verification -----------------------------------

def manufactured_problem(mesh: Mesh, diffusion: DiffusionSpec,
                         potentials: PotentialSet, y_expr: str, z_expr: str,
                         nl_f: Nonlinearity | None = None,
                         nl_g: Nonlinearity | None = None,
                         nl_f_expr=None, nl_g_expr=None):
    """Compensating sources so that (y_expr, z_expr) solves the full system.

    Nonlinearities must be given as sympy expression builders
    (``nl_f_expr(Y, Z) -> expr``) when active; potentials must be spatially
    constant for the symbolic source to be exact.
    """
    import sympy as sym

    from .fields import T as SYM_T
    from .fields import TH as SYM_TH
    from .fields import SpaceTimeField, divergence_a_grad, surface_divergence_d_grad

    Y = SpaceTimeField(y_expr)
    Z = SpaceTimeField(z_expr)
    pot = {name: float(np.asarray(getattr(potentials, name)).ravel()[0])
           for name in ("p11", "p12", "p13", "p21", "p22",
                        "q11", "q12", "q13", "q21", "q22")}
    for name in pot:
        arr = getattr(potentials, name)
        if np.ptp(arr) != 0:
            raise ValueError("manufactured sources need constant potentials")
    a1 = float(diffusion.a1[0])
    a2 = float(diffusion.a2[0])
    d1 = float(diffusion.d1[0])
    d2 = float(diffusion.d2[0])
    for nm, arr in (("a1", diffusion.a1), ("a2", diffusion.a2),
                    ("d1", diffusion.d1), ("d2", diffusion.d2)):
        if np.ptp(arr) != 0:
            raise ValueError("manufactured sources need constant diffusivities")

    R = mesh.R_domain
    f_term = nl_f_expr(Y.expr, Z.expr) if nl_f_expr is not None else 0
    src_f1 = (sym.diff(Y.expr, SYM_T) - divergence_a_grad(a1, Y.expr)
              - pot["p11"] * Y.expr - pot["p12"] * Z.expr - pot["p13"] * f_term)
    src_f2 = (sym.diff(Z.expr, SYM_T) - divergence_a_grad(a2, Z.expr)
              - pot["p21"] * Y.expr - pot["p22"] * Z.expr)

    Yg, Zg = Y.on_circle(R), Z.on_circle(R)
    g_term = nl_g_expr(Yg.expr, Zg.expr) if nl_g_expr is not None else 0
    src_g1 = (sym.diff(Yg.expr, SYM_T) - surface_divergence_d_grad(d1, Yg.expr, R)
              + a1 * Y.normal_derivative_expr(R)
              - pot["q11"] * Yg.expr - pot["q12"] * Zg.expr - pot["q13"] * g_term)
    src_g2 = (sym.diff(Zg.expr, SYM_T) - surface_divergence_d_grad(d2, Zg.expr, R)
              + a2 * Z.normal_derivative_expr(R)
              - pot["q21"] * Yg.expr - pot["q22"] * Zg.expr)

    xy = mesh.cell_xy
    th = mesh.surface_theta
    sf1 = SpaceTimeField(src_f1)
    sf2 = SpaceTimeField(src_f2)
    g1_fn = sym.lambdify((SYM_T, SYM_TH), src_g1, modules="numpy")
    g2_fn = sym.lambdify((SYM_T, SYM_TH), src_g2, modules="numpy")

    sources = {
        "f1": lambda t: sf1.value(t, xy),
        "f2": lambda t: sf2.value(t, xy),
        "g1": lambda t: np.broadcast_to(np.asarray(g1_fn(t, th), dtype=float), th.shape).copy(),
        "g2": lambda t: np.broadcast_to(np.asarray(g2_fn(t, th), dtype=float), th.shape).copy(),
    }

    def exact_state(t):
        return SystemState(Y.value(t, xy), Z.value(t, xy),
                           Yg.value(t, th), Zg.value(t, th), t)

    init = InitialData(y0=Y.value(0.0, xy), z0=Z.value(0.0, xy),
                       y0_gamma=Yg.value(0.0, th), z0_gamma=Zg.value(0.0, th))
    return init, sources, exact_state


def _state_error(mesh: Mesh, state: SystemState, exact: SystemState) -> float:
    e = 0.0
    e += np.dot(mesh.cell_areas, (state.y - exact.y) ** 2)
    e += np.dot(mesh.cell_areas, (state.z - exact.z) ** 2)
    e += np.dot(mesh.surface_weights, (state.y_gamma - exact.y_gamma) ** 2)
    e += np.dot(mesh.surface_weights, (state.z_gamma - exact.z_gamma) ** 2)
    return float(np.sqrt(e))


_MMS_Y = "(exp(-t)*(1 - x1**2 - x2**2) + 1) * (1 + x1/4)"
_MMS_Z = "(exp(-t/2)*(1 - (x1**2 + x2**2)/2)) * (1 + x2/4) + 1"


def mms_convergence(levels, t_end: float = 0.4, potentials_const=None,
                    y_expr: str = _MMS_Y, z_expr: str = _MMS_Z) -> dict:
    """Refinement study against a smooth manufactured solution.

    Each level is (n_r, n_theta, dt).  When the mesh varies across levels the
    error is measured against the exact solution at t_end; when all levels
    share one mesh, a dt/8 reference run on that mesh isolates the temporal
    order (self-convergence).  Returns errors and pairwise observed orders.
    """
    if len(levels) < 3:
        raise ValueError("need at least 3 refinement levels")
    meshes_vary = len({(nr, nt) for nr, nt, _ in levels}) > 1
    errors = []
    for n_r, n_theta, dt in levels:
        mesh = build_mesh_cached(n_r, n_theta)
        diffusion = DiffusionSpec.from_values(mesh)
        pot = PotentialSet.from_values(mesh, **(potentials_const or {}))
        init, sources, exact_state = manufactured_problem(
            mesh, diffusion, pot, y_expr, z_expr)
        system = SemilinearSystem(mesh, diffusion, pot)
        traj = system.solve(init, t_end, dt, sources=sources)
        if meshes_vary:
            errors.append(_state_error(mesh, traj.state(traj.n_nodes - 1),
                                       exact_state(traj.times[-1])))
        else:
            ref = system.solve(init, t_end, min(l[2] for l in levels) / 8,
                               sources=sources)
            errors.append(_state_error(mesh, traj.state(traj.n_nodes - 1),
                                       ref.state(ref.n_nodes - 1)))
    orders = [float(np.log2(errors[i] / errors[i + 1]))
              for i in range(len(errors) - 1)]
    return {"levels": list(levels), "errors": errors, "orders": orders,
            "mode": "spatial" if meshes_vary else "temporal"}


_mesh_cache: dict[tuple, Mesh] = {}


def build_mesh_cached(n_r: int, n_theta: int, R: float = 1.0) -> Mesh:
    key = (n_r, n_theta, R)
    if key not in _mesh_cache:
        from .geometry import build_polar_mesh
        _mesh_cache[key] = build_polar_mesh(n_r, n_theta, R)
    return _mesh_cache[key]
