"""Polar finite-volume mesh of the unit disk and its boundary circle.

The bulk grid is cell-centered: ring ``i`` (1-based) has centers at
``r_i = (i - 1/2) dr``, sector ``j`` at ``theta_j = j dtheta``.  The innermost
ring covers the origin, so there is no degenerate center cell.  The boundary
circle carries a matched periodic grid of ``n_theta`` nodes, one per angular
sector, linked to the outermost ring by ``trace_map``.

Cell areas are exact: ``r_i * dr * dtheta`` equals the true sector-annulus
area, so the total is ``pi R^2`` to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Mesh:
    """Polar finite-volume grid on a disk plus its matched surface grid.

    All arrays are laid out ring-major: bulk cell (i, j) with ring index
    i = 1..n_r and sector index j = 0..n_theta-1 lives at flat index
    ``(i - 1) * n_theta + j``.  Surface node j sits at angle ``theta_j``.
    """

    n_r: int
    n_theta: int
    R_domain: float
    cell_centers: np.ndarray      # (n_cells, 2) as (r, theta)
    cell_areas: np.ndarray        # (n_cells,)
    surface_nodes: np.ndarray     # (n_theta,) arc-length positions R*theta_j
    surface_weights: np.ndarray   # (n_theta,) arc lengths
    trace_map: np.ndarray         # (n_theta,) flat index of adjacent bulk cell
    outward_normal: np.ndarray    # (n_theta, 2) unit vectors (cos, sin)

    # face connectivity for divergence-form operators; geom = length/distance
    faces_a: np.ndarray = field(repr=False, default=None)
    faces_b: np.ndarray = field(repr=False, default=None)
    faces_geom: np.ndarray = field(repr=False, default=None)
    bnd_cells: np.ndarray = field(repr=False, default=None)
    bnd_geom: np.ndarray = field(repr=False, default=None)

    @property
    def n_cells(self) -> int:
        return self.n_r * self.n_theta

    @property
    def dr(self) -> float:
        return self.R_domain / self.n_r

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.n_theta

    @property
    def cell_r(self) -> np.ndarray:
        return self.cell_centers[:, 0]

    @property
    def cell_theta(self) -> np.ndarray:
        return self.cell_centers[:, 1]

    @property
    def cell_xy(self) -> np.ndarray:
        """Cartesian cell centers, shape (n_cells, 2)."""
        r, th = self.cell_r, self.cell_theta
        return np.column_stack([r * np.cos(th), r * np.sin(th)])

    @property
    def surface_theta(self) -> np.ndarray:
        return self.surface_nodes / self.R_domain

    @property
    def surface_xy(self) -> np.ndarray:
        th = self.surface_theta
        return self.R_domain * np.column_stack([np.cos(th), np.sin(th)])

    def flat_index(self, ring: int, sector: int) -> int:
        """Flat index of cell (ring, sector); ring is 1-based."""
        return (ring - 1) * self.n_theta + sector % self.n_theta

    def bulk_integral(self, u: np.ndarray) -> float:
        return float(np.dot(self.cell_areas, u))

    def surface_integral(self, u: np.ndarray) -> float:
        return float(np.dot(self.surface_weights, u))

    def bulk_l2(self, u: np.ndarray) -> float:
        return float(np.sqrt(np.dot(self.cell_areas, u * u)))

    def surface_l2(self, u: np.ndarray) -> float:
        return float(np.sqrt(np.dot(self.surface_weights, u * u)))


@dataclass(frozen=True)
class RegionSet:
    """Nested observation regions (concentric disks) and the time window."""

    omega_prime: np.ndarray   # cell indices with r < rho_prime
    omega_dprime: np.ndarray  # cell indices with r < rho_dprime
    omega: np.ndarray         # cell indices with r < rho_omega
    t0: float
    t1: float
    theta: float
    rho_prime: float
    rho_dprime: float
    rho_omega: float

    @property
    def window(self) -> tuple[float, float, float]:
        return (self.t0, self.t1, self.theta)


def build_polar_mesh(n_r: int, n_theta: int, R_domain: float = 1.0) -> Mesh:
    """Build the polar finite-volume mesh.

    Parameters
    ----------
    n_r : int
        Radial cell count, at least 4.
    n_theta : int
        Angular cell count, at least 8 and even.
    R_domain : float
        Disk radius.
    """
    if n_r < 4:
        raise ValueError(f"n_r={n_r} below minimum 4: resolution unusable")
    if n_theta < 8 or n_theta % 2 != 0:
        raise ValueError(f"n_theta={n_theta} must be even and >= 8")
    if R_domain <= 0:
        raise ValueError("R_domain must be positive")

    dr = R_domain / n_r
    dth = 2.0 * np.pi / n_theta

    ring = np.arange(1, n_r + 1)
    r_centers = (ring - 0.5) * dr
    theta_centers = np.arange(n_theta) * dth

    rr, tt = np.meshgrid(r_centers, theta_centers, indexing="ij")
    cell_centers = np.column_stack([rr.ravel(), tt.ravel()])
    # exact sector-annulus area: ((i dr)^2 - ((i-1) dr)^2)/2 * dth = r_i dr dth
    cell_areas = (rr * dr * dth).ravel()

    surface_nodes = R_domain * theta_centers
    surface_weights = np.full(n_theta, R_domain * dth)
    trace_map = (n_r - 1) * n_theta + np.arange(n_theta)
    outward_normal = np.column_stack([np.cos(theta_centers), np.sin(theta_centers)])

    # interior faces: radial (between rings i, i+1) and angular (periodic in j)
    fa, fb, fg = [], [], []
    j_all = np.arange(n_theta)
    for i in range(1, n_r):
        a = (i - 1) * n_theta + j_all
        b = i * n_theta + j_all
        fa.append(a)
        fb.append(b)
        # face at radius i*dr: length i*dr*dth, center distance dr
        fg.append(np.full(n_theta, i * dth))
    for i in range(1, n_r + 1):
        a = (i - 1) * n_theta + j_all
        b = (i - 1) * n_theta + (j_all + 1) % n_theta
        fa.append(a)
        fb.append(b)
        # radial face: length dr, arc distance r_i*dth
        fg.append(np.full(n_theta, dr / (r_centers[i - 1] * dth)))
    faces_a = np.concatenate(fa)
    faces_b = np.concatenate(fb)
    faces_geom = np.concatenate(fg)

    # boundary faces: outermost cell to its surface node over half a cell
    bnd_cells = trace_map.copy()
    bnd_geom = np.full(n_theta, (R_domain * dth) / (0.5 * dr))

    return Mesh(
        n_r=n_r,
        n_theta=n_theta,
        R_domain=R_domain,
        cell_centers=cell_centers,
        cell_areas=cell_areas,
        surface_nodes=surface_nodes,
        surface_weights=surface_weights,
        trace_map=trace_map,
        outward_normal=outward_normal,
        faces_a=faces_a,
        faces_b=faces_b,
        faces_geom=faces_geom,
        bnd_cells=bnd_cells,
        bnd_geom=bnd_geom,
    )


def build_regions(
    mesh: Mesh,
    rho_prime: float,
    rho_dprime: float,
    rho_omega: float,
    t0: float,
    t1: float,
) -> RegionSet:
    """Build nested observation disks omega' < omega'' < omega and the window."""
    if not (0.0 < rho_prime < rho_dprime < rho_omega < mesh.R_domain):
        raise ValueError(
            "region radii must satisfy 0 < rho_prime < rho_dprime < rho_omega "
            f"< R_domain, got ({rho_prime}, {rho_dprime}, {rho_omega}, "
            f"{mesh.R_domain})"
        )
    if not (0.0 < t0 < t1):
        raise ValueError(f"time window must satisfy 0 < t0 < t1, got ({t0}, {t1})")

    r = mesh.cell_r
    omega_prime = np.flatnonzero(r < rho_prime)
    omega_dprime = np.flatnonzero(r < rho_dprime)
    omega = np.flatnonzero(r < rho_omega)
    for name, idx, rho in (
        ("omega_prime", omega_prime, rho_prime),
        ("omega_dprime", omega_dprime, rho_dprime),
        ("omega", omega, rho_omega),
    ):
        if idx.size == 0:
            raise ValueError(
                f"{name} (r < {rho}) contains no cell centers: mesh too coarse"
            )

    return RegionSet(
        omega_prime=omega_prime,
        omega_dprime=omega_dprime,
        omega=omega,
        t0=float(t0),
        t1=float(t1),
        theta=0.5 * (t0 + t1),
        rho_prime=float(rho_prime),
        rho_dprime=float(rho_dprime),
        rho_omega=float(rho_omega),
    )
