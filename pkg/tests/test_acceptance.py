"""Acceptance suite: one pass/fail line per criterion, run with pytest.

Every tolerance is pinned here; the reference configuration is the package
default (16 x 32 disk mesh, 200 time steps, window (0.2, 0.8), observation
disk r < 0.6).
"""

import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from bulksurf.carleman import (
    CarlemanConfig,
    DiffusionPair,
    carleman_ratio,
    default_s1,
    shifted_ratio,
    weight_property_margins,
    weights,
)
from bulksurf.decomposition import field_to_trajectory, mn_decomposition
from bulksurf.fields import SpaceTimeField
from bulksurf.forward import (
    ReactionSet,
    SemilinearSystem,
    mass_series,
    mms_convergence,
)
from bulksurf.geometry import build_polar_mesh, build_regions
from bulksurf.inverse import (
    InverseProblem,
    build_patch_basis,
    simulate_twin,
    stability_ensemble,
)
from bulksurf.model import (
    DiffusionSpec,
    InitialData,
    PotentialSet,
    make_power_nonlinearity,
)
from bulksurf.operators import (
    assemble_bulk_diffusion,
    assemble_surface_diffusion,
    green_identity_residual,
    conormal_identity_residual,
    operator_invariant_report,
    surface_divergence_residual,
)
from bulksurf.positivity import (
    negative_part_energy_monotone,
    positivity_experiment,
)

SEED = 1234
T0, T1 = 0.2, 0.8
DT = 0.005
T_END = 1.0


def _report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def mesh():
    return build_polar_mesh(16, 32, 1.0)


@pytest.fixture(scope="module")
def regions(mesh):
    return build_regions(mesh, 0.25, 0.4, 0.6, T0, T1)


@pytest.fixture(scope="module")
def problem(mesh, regions):
    diffusion = DiffusionSpec.from_values(mesh)
    base = PotentialSet.from_values(
        mesh, p11=0.2, p12=0.1, p21=2.0, p22=-0.1,
        q11=0.1, q12=0.05, q21=1.0, q22=-0.05, q13=0.3,
        R_bound=10.0, p0=0.3)
    nl = make_power_nonlinearity(1, 1, (12.0, 12.0))
    init = InitialData.from_values(mesh, y0=1.5, z0=1.0)
    basis = build_patch_basis(mesh, 4, 4, 8)
    return InverseProblem(mesh=mesh, regions=regions, diffusion=diffusion,
                          base_potentials=base, nl_f=nl, nl_g=nl, init=init,
                          t_end=T_END, dt=DT, basis=basis,
                          r_floor=1.5, r1_floor=0.05)


@pytest.fixture(scope="module")
def truth(problem):
    rng = np.random.default_rng(SEED)
    raw_p = rng.standard_normal(problem.basis.n_bulk)
    raw_q = rng.standard_normal(problem.basis.n_arcs)
    return problem.coefficient_vector(
        p13=0.8 + 0.3 * raw_p / np.abs(raw_p).max(),
        q21=1.0 + 0.2 * raw_q / np.abs(raw_q).max(),
        free=("p13", "q21")).project()


@pytest.fixture(scope="module")
def twin_data(problem, truth):
    return simulate_twin(problem, truth, noise_level=0.0, seed=SEED)


def test_criterion_01_discrete_structure(mesh):
    rng = np.random.default_rng(SEED)
    a = 1.0 + rng.random(mesh.n_cells)
    d = 1.0 + rng.random(mesh.n_theta)
    op_b = assemble_bulk_diffusion(mesh, a)
    op_s = assemble_surface_diffusion(mesh, d)

    ok = True
    details = []
    for op, label in ((op_b, "bulk"), (op_s, "surface")):
        rep = operator_invariant_report(op)
        sym_ok = rep["symmetry_error"] == 0.0
        row_ok = rep["max_row_sum"] <= 1e-12 * rep["scale"]
        lam_max = spla.eigsh(op.matrix, k=1, which="LA",
                             return_eigenvectors=False)[0]
        nsd_ok = lam_max <= 1e-10 * rep["scale"]
        ok = ok and sym_ok and row_ok and nsd_ok
        details.append(f"{label}: sym={rep['symmetry_error']:.1e} "
                       f"row={rep['max_row_sum']:.1e} eig={lam_max:.1e}")

    worst_green = 0.0
    for _ in range(5):
        u = rng.standard_normal(mesh.n_cells)
        v = rng.standard_normal(mesh.n_cells)
        ug = rng.standard_normal(mesh.n_theta)
        vg = rng.standard_normal(mesh.n_theta)
        scale = max(abs(op_b.energy_pairing(u, v, ug, vg)), 1.0)
        worst_green = max(worst_green,
                          green_identity_residual(mesh, op_b, u, v, ug, vg) / scale)
        us = rng.standard_normal(mesh.n_theta)
        vs = rng.standard_normal(mesh.n_theta)
        scale_s = max(abs(op_s.energy_pairing(us, vs)), 1.0)
        worst_green = max(worst_green,
                          green_identity_residual(mesh, op_s, us, vs) / scale_s)
    worst_div = max(
        surface_divergence_residual(mesh, rng.standard_normal(mesh.n_theta),
                                    rng.standard_normal(mesh.n_theta))
        for _ in range(5))
    green_ok = worst_green <= 1e-10 and worst_div <= 1e-10
    _report("criterion 1: discrete operator structure and Green identities",
            ok and green_ok,
            "; ".join(details) + f"; green={worst_green:.1e} div={worst_div:.1e}")


def test_criterion_02_solver_verification(mesh):
    pots = dict(p11=0.2, p12=0.1, p21=0.3, p22=-0.1,
                q11=0.1, q12=0.05, q21=0.2, q22=-0.05)
    spatial = mms_convergence([(8, 16, 0.02), (16, 32, 0.01), (32, 64, 0.005)],
                              t_end=0.4, potentials_const=pots)
    temporal = mms_convergence([(16, 32, 0.04), (16, 32, 0.02), (16, 32, 0.01)],
                               t_end=0.4)
    so = min(spatial["orders"])
    to = min(temporal["orders"])

    diffusion = DiffusionSpec.from_values(mesh)
    system = SemilinearSystem(mesh, diffusion)
    rng = np.random.default_rng(SEED)
    init = InitialData.from_values(mesh, y0=1 + rng.random(mesh.n_cells))
    traj = system.solve(init, 0.3, DT)
    m = mass_series(traj, mesh)
    drift = np.abs(np.diff(m)).max() / abs(m[0])

    _report("criterion 2: manufactured-solution orders and mass conservation",
            so >= 0.9 and to >= 0.9 and drift <= 1e-10,
            f"spatial order {so:.2f}, temporal order {to:.2f}, "
            f"mass drift {drift:.2e}")


def test_criterion_03_positivity(mesh):
    diffusion = DiffusionSpec.from_values(mesh)
    rng = np.random.default_rng(SEED)
    worst_min = 0.0
    all_ok = True
    for _ in range(20):
        c = rng.uniform(0.0, 0.5, size=6)
        reactions = ReactionSet(
            f1=lambda y, z, c=c: c[0] * z - c[1] * y,
            f2=lambda y, z, c=c: c[2] * y - c[3] * z,
            g1=lambda yg, zg, c=c: c[4] * zg,
            g2=lambda yg, zg, c=c: c[5] * yg,
            lipschitz_bound=1.0)
        init = InitialData.from_values(
            mesh, y0=rng.random(mesh.n_cells), z0=rng.random(mesh.n_cells),
            y0_gamma=rng.random(mesh.n_theta), z0_gamma=rng.random(mesh.n_theta))
        out = positivity_experiment(mesh, diffusion, init, reactions,
                                    t_end=0.2, dt=DT)
        scale = max(abs(out["trajectory"].y).max(),
                    abs(out["trajectory"].z).max(), 1.0)
        mono = negative_part_energy_monotone(out["trajectory"], mesh)
        worst_min = min(worst_min, out["min_value"] / scale)
        all_ok = all_ok and out["min_value"] >= -1e-10 * scale and mono["passed"]
    _report("criterion 3: positivity over 20 randomized QP draws",
            all_ok, f"worst scaled minimum {worst_min:.2e}")


def test_criterion_04_algebraic_identities():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(1000):
        B = rng.standard_normal((2, 2))
        A = B @ B.T + 0.1 * np.eye(2)
        ang = rng.uniform(0, 2 * np.pi)
        nu = np.array([np.cos(ang), np.sin(ang)])
        g = rng.standard_normal(2) * rng.uniform(0.1, 10)
        scale = max(1.0, np.linalg.norm(A) ** 2 * np.dot(g, g))
        worst = max(worst, conormal_identity_residual(A, nu, g) / scale)
    id_ok = worst <= 1e-12

    cfg = CarlemanConfig(lam=1.0, s=2.0, t0=T0, t1=T1)
    K = math.exp(2 * cfg.lam)

    def alpha_xi(t, x1, x2):
        gamma = (t - cfg.t0) * (cfg.t1 - t)
        E = np.exp(cfg.lam * (1 - x1**2 - x2**2))
        return (K - E) / gamma, E / gamma

    h = 1e-30
    grad_worst = 0.0
    for _ in range(100):
        t = rng.uniform(T0 + 0.05, T1 - 0.05)
        r = rng.uniform(0, 1)
        ang = rng.uniform(0, 2 * np.pi)
        x = np.array([r * np.cos(ang), r * np.sin(ang)])
        w = weights(t, x, cfg)
        for i, dx in ((0, 1), (1, 1)):
            xc = x.astype(complex)
            xc[i] += 1j * h
            cs = (alpha_xi(t, xc[0], xc[1])[0]).imag / h
            grad_worst = max(grad_worst,
                             abs(w["grad_alpha"][i] - cs) / max(abs(cs), 1.0))
        cs_xi = (alpha_xi(t, x[0] + 1j * h, x[1])[1]).imag / h
        grad_worst = max(grad_worst,
                         abs(w["grad_xi"][0] - cs_xi) / max(abs(cs_xi), 1.0))
    a5_ok = grad_worst <= 1e-10

    margins = weight_property_margins(
        cfg, np.linspace(T0 + 0.006, T1 - 0.006, 151), np.linspace(0, 1, 41))
    _report("criterion 4: pointwise conormal identity and weight properties",
            id_ok and a5_ok and margins["passed"],
            f"identity {worst:.1e}, gradient {grad_worst:.1e}, "
            f"inf xi*(t1-t0)^2/4 = {margins['inf_xi_times_window']:.4f}")


def test_criterion_05_decomposition_identities(mesh):
    cfg = CarlemanConfig(lam=1.0, s=2.0, t0=T0, t1=T1)
    fields = [
        ("radial", SpaceTimeField(
            f"sin(pi*(t-{T0})/{T1 - T0})*(1 - x1**2 - x2**2)"), "1", "1"),
        ("general", SpaceTimeField(
            f"sin(pi*(t-{T0})/{T1 - T0})*(1 + x1/2 + x2**2/3)"),
         "1 + (x1**2 + x2**2)/4", "1 + sin(theta)/3"),
    ]
    worst = 0.0
    for tau in (-3.0, 0.0, 2.0):
        for _, fld, a_expr, d_expr in fields:
            dec = mn_decomposition(tau, fld, cfg, mesh,
                                   a_expr=a_expr, d_expr=d_expr)
            worst = max(worst, dec.residual_bulk, dec.residual_surface)
    _report("criterion 5: conjugated-operator decomposition identities",
            worst <= 1e-8, f"worst relative residual {worst:.2e} "
            "over tau in {-3, 0, 2}")


def test_criterion_06_ratio_non_growth(mesh, regions, problem, truth):
    pair = DiffusionPair.from_fields(mesh, 1.0, 1.0)
    times = np.arange(0.0, T_END + DT / 2, DT)
    W = T1 - T0
    analytic = {
        "radial": f"sin(pi*(t - {T0})/{W})*(1 - x1**2 - x2**2)",
        "skew": f"sin(pi*(t - {T0})/{W})*(1 + x1/3 + x2**2/5)",
        "offcenter": f"sin(pi*(t - {T0})/{W})*exp(-8*((x1 - 0.4)**2 + x2**2))",
        "angular": f"sin(pi*(t - {T0})/{W})*(1 + (x1**2 - x2**2)/2)",
        "time_osc": f"sin(2*pi*(t - {T0})/{W})*(1 + x2/4) + 1",
    }
    trajs = {name: field_to_trajectory(SpaceTimeField(expr), mesh, times)
             for name, expr in analytic.items()}

    # discrete solution family: the coupled linear system with sources
    xy = mesh.cell_xy
    th = mesh.surface_theta
    sources = {
        "f1": 0.5 + 0.3 * xy[:, 0],
        "f2": 0.4 - 0.2 * xy[:, 1],
        "g1": 0.2 + 0.1 * np.cos(th),
        "g2": 0.3 + 0.1 * np.sin(th),
    }
    pot = problem.to_potentials(truth)
    lin_system = SemilinearSystem(mesh, problem.diffusion, pot)
    lin_traj = lin_system.solve(problem.init, T_END, DT, sources=sources)
    trajs["discrete_solution"] = lin_traj

    lam1 = 2.0
    worst_growth = 0.0
    all_finite = True
    for name, traj in trajs.items():
        for lam in (lam1, 2 * lam1):
            s1 = default_s1(lam, T0, T1)
            ratios = []
            for fac in (1.0, 2.0, 4.0):
                cfg = CarlemanConfig(lam=lam, s=fac * s1, t0=T0, t1=T1)
                out = carleman_ratio(0.0, traj, cfg, mesh, pair, regions)
                ratios.append(out["ratio"])
            if not all(np.isfinite(r) for r in ratios):
                all_finite = False
                continue
            worst_growth = max(worst_growth, ratios[1] / ratios[0],
                               ratios[2] / ratios[0])

    worst_shifted = 0.0
    for lam in (lam1, 2 * lam1):
        s1 = default_s1(lam, T0, T1)
        ratios = []
        for fac in (1.0, 2.0, 4.0):
            cfg = CarlemanConfig(lam=lam, s=fac * s1, t0=T0, t1=T1, epsilon=0.5)
            out = shifted_ratio(lin_traj, sources, cfg, mesh, pair, pair,
                                regions, pot)
            ratios.append(out["ratio"])
        if not all(np.isfinite(r) for r in ratios):
            all_finite = False
            continue
        worst_shifted = max(worst_shifted, ratios[1] / ratios[0],
                            ratios[2] / ratios[0])

    _report("criterion 6: weighted-estimate ratio non-growth under s-doubling",
            all_finite and worst_growth <= 2.0 and worst_shifted <= 2.0,
            f"max growth single-pair {worst_growth:.3f}, "
            f"one-observation {worst_shifted:.3f}")


def test_criterion_07_adjoint_correctness(problem, truth, twin_data):
    rng = np.random.default_rng(SEED + 1)
    h = 1e-5
    worst = 0.0
    for _ in range(3):
        x0 = truth.pack() + 0.2 * rng.standard_normal(truth.pack().size)
        c0 = truth.unpack(x0).project()
        x0 = c0.pack()
        _, g = problem.objective_and_gradient(c0, twin_data)
        for _ in range(20):
            v = rng.standard_normal(x0.size)
            v /= np.linalg.norm(v)
            jp = problem.objective(truth.unpack(x0 + h * v), twin_data)
            jm = problem.objective(truth.unpack(x0 - h * v), twin_data)
            fd = (jp - jm) / (2 * h)
            worst = max(worst, abs(fd - np.dot(g, v)) / max(abs(fd), 1e-12))
    _report("criterion 7: adjoint gradient vs central differences",
            worst <= 1e-5, f"worst relative deviation {worst:.2e} "
            "(20 directions x 3 points)")


def test_criterion_08_twin_recovery(problem, truth, twin_data):
    guess = problem.coefficient_vector(p13=0.5, q21=1.0, free=("p13", "q21"))
    out = problem.reconstruct(twin_data, guess, max_iter=100, tolerance=1e-13)
    zero = problem.coefficient_vector(p13=0.0, q21=0.0, free=("p13", "q21"))
    rel = out["coeffs"].l2_distance(truth, problem.basis) \
        / truth.l2_distance(zero, problem.basis)
    objs = [h["objective"] for h in out["history"]]
    monotone = all(b <= a + 1e-15 for a, b in zip(objs, objs[1:]))
    _report("criterion 8: noiseless twin recovery of 16-patch and 8-arc "
            "coefficients", rel <= 0.05 and len(objs) <= 100 and monotone,
            f"relative error {rel:.3%} in {len(objs)} iterations")


def test_criterion_09_stability_harness(problem, truth):
    scale = 1e-3
    rep = stability_ensemble(problem, truth, n_draws=20,
                             perturbation_scale=scale, seed=SEED)
    rep_half = stability_ensemble(problem, truth, n_draws=20,
                                  perturbation_scale=scale / 2, seed=SEED)
    usable = [r for r in rep.records if not r.get("skipped")]
    assert len(usable) >= 20

    kappa = 4.0 * float(problem.diffusion.a2.max()) / problem.mesh.dr**2
    ident_tol = (problem.dt / 64.0) * kappa + 100 * scale**2
    worst_ident = max(max(r["v_rel_err"], r["u_rel_err"],
                          r["v_gamma_rel_err"], r["u_gamma_rel_err"])
                      for r in usable)
    ident_ok = worst_ident <= ident_tol

    worst_lin = max(abs(rh["obs_norm"] / r["obs_norm"] - 0.5)
                    for r, rh in zip(rep.records, rep_half.records)
                    if not r.get("skipped") and r["obs_norm"] > 0)
    linear_ok = worst_lin <= 0.05  # within 10% of exact halving

    spread_ok = rep.spread <= 10.0
    _report("criterion 9: empirical stability harness",
            ident_ok and linear_ok and spread_ok,
            f"identity err {worst_ident:.3f} (tol {ident_tol:.3f}), "
            f"response dev {worst_lin:.4f}, "
            f"max/median ratio {rep.spread:.2f}")
