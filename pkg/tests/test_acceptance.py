"""Acceptance criteria 1-9, one printed PASS/FAIL line each.

Every criterion is checked at its stated tolerance and runtime budget; a
failing sub-check fails the test and is reported with the measured values.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from crowdscale.fluid_hydro import equilibrium_velocity, fixed_point_dti, hydro_bank, hydro_state, step_hydro
from crowdscale.fluid_second_order import (
    CausticError,
    FluidField,
    make_vmf_bank,
    step_mono,
    step_vmf,
    vmf_flux_tensor,
)
from crowdscale.geometry import binary_encounter, elementary_dti_inverse, unit
from crowdscale.grid import Grid
from crowdscale.harness.runner import run
from crowdscale.harness.scenario import from_dict
from crowdscale.ibm import Crowd, step_continuous
from crowdscale.kernels import build_iso_kernel, build_kernel_table, iso_kernel_direct
from crowdscale.kinetic import KineticField, KineticSolver, moments
from crowdscale.params import CutoffParams, ModelParams
from crowdscale.specialmath import (
    VmfParams,
    beta_of_speed,
    gamma_coefficients,
    order_parameter,
    theta_grid,
    vmf_density,
)

P = ModelParams()
PH = P.with_(kappa=-1.0)  # the hydrodynamic level is isotropic
CUT = CutoffParams()


def report(n, checks, elapsed):
    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{label} {'ok' if good else 'FAILED'} ({info})" for label, good, info in checks)
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} [{elapsed:.1f} s] {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def gaussian_groups(grid, speed):
    X, Y = grid.centers()
    cx, cy = grid.lx / 2, grid.ly / 2
    rho = np.stack([0.1 + 2.0 * np.exp(-((X - cx + 4) ** 2 + (Y - cy) ** 2) / 18),
                    0.1 + 2.0 * np.exp(-((X - cx - 4) ** 2 + (Y - cy) ** 2) / 18)])
    U = np.zeros(rho.shape + (2,))
    U[0, ..., 0], U[1, ..., 0] = speed, -speed
    return rho, U


# ------------------------------------------------------------------------ 1


def test_criterion_1_encounter_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n, R, dt = 1000, 0.5, 1e-4
    x_j = rng.uniform(-3, 3, (n, 2))
    v_i = unit(rng.uniform(-math.pi, math.pi, n)) * rng.uniform(0.2, 1.5, (n, 1))
    v_j = unit(rng.uniform(-math.pi, math.pi, n)) * rng.uniform(0.2, 1.5, (n, 1))
    keep = np.linalg.norm(v_j - v_i, axis=1) > 0.05
    x_j, v_i, v_j = x_j[keep][:n], v_i[keep][:n], v_j[keep][:n]
    t_call = time.perf_counter()
    res = binary_encounter(np.zeros_like(x_j), v_i, x_j, v_j, R)
    t_call = time.perf_counter() - t_call
    md_err = tti_err = 0.0
    predicate_mismatch = 0
    for k in range(len(x_j)):
        rel = v_j[k] - v_i[k]
        # the closest approach lies within |x| / |rel| of t = 0 in either direction
        horizon = np.linalg.norm(x_j[k]) / np.linalg.norm(rel) + 1.0
        t = np.arange(-horizon, horizon + dt, dt)
        sep = x_j[k][None, :] + t[:, None] * rel[None, :]
        dist = np.hypot(sep[:, 0], sep[:, 1])
        md_err = max(md_err, abs(dist.min() - res.md[k]))
        future = t >= 0
        i_star = int(np.argmin(dist[future]))
        approaching = i_star > 0
        threat = approaching and dist[future][i_star] <= R
        if threat != math.isfinite(res.tti[k]):
            predicate_mismatch += 1
        if threat:
            tti_err = max(tti_err, abs(t[future][i_star] - res.tti[k]))
    elapsed = time.perf_counter() - t0
    report(1, [
        ("MD", md_err < 1e-3, f"max err {md_err:.2e}"),
        ("TTI", tti_err < 1e-3, f"max err {tti_err:.2e}"),
        ("no-interaction predicate", predicate_mismatch == 0, f"{predicate_mismatch} mismatches of {len(x_j)}"),
        ("runtime", t_call < 10.0, f"closed form {t_call * 1e3:.2f} ms"),
    ], elapsed)


# ------------------------------------------------------------------------ 2


def test_criterion_2_bessel_and_vmf():
    t0 = time.perf_counter()
    betas = np.geomspace(0.1, 50.0, 200)
    rt = np.max(np.abs(beta_of_speed(order_parameter(betas)) / betas - 1.0))
    speeds = order_parameter(betas)
    om = unit(np.linspace(0, 2 * math.pi, 200, endpoint=False))
    U = speeds[:, None] * om
    rho = np.linspace(0.1, 5.0, 200)
    sig = vmf_flux_tensor(rho, U)
    trace = np.max(np.abs(np.trace(sig, axis1=-2, axis2=-1) - rho) / rho)
    g_par, g_perp = gamma_coefficients(speeds)
    gsum = np.max(np.abs((g_par + g_perp) * speeds**2 - 1.0))
    n = 128
    th = theta_grid(n)
    u = unit(th)
    h = 2 * math.pi / n
    quad = 0.0
    for b, o in zip(betas[::10], om[::10]):
        dens = vmf_density(u, VmfParams(float(b), (float(o[0]), float(o[1]))))
        m1 = (dens[:, None] * u).sum(0) * h
        m2 = np.einsum("j,jc,jd->cd", dens, u, u) * h
        quad = max(quad, np.max(np.abs(m1 - order_parameter(b) * o)),
                   np.max(np.abs(m2 - vmf_flux_tensor(1.0, order_parameter(b) * o))))
    elapsed = time.perf_counter() - t0
    report(2, [
        ("beta(c1) round trip", rt < 1e-8, f"max rel err {rt:.1e}"),
        ("trace Sigma = rho", trace < 1e-14, f"max rel err {trace:.1e}"),
        ("gamma sum = 1/|U|^2", gsum < 1e-14, f"max rel err {gsum:.1e}"),
        ("quadrature moments n=128", quad < 1e-8, f"max err {quad:.1e}"),
        ("runtime", elapsed < 5.0, f"{elapsed:.2f} s"),
    ], elapsed)


# ------------------------------------------------------------------------ 3


def test_criterion_3_kernels():
    t0 = time.perf_counter()
    delta = 2.0
    full = build_kernel_table(-1.0, delta, CUT, 256)
    iso = build_iso_kernel(delta, CUT, 256)
    iso_gap = np.max(np.abs(full.values - iso.values[None, :]))
    cone = build_kernel_table(0.0, delta, CUT, 256)
    build_time = time.perf_counter() - t0
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        i, j = rng.integers(0, 256, 2)
        mu, s = cone.mu[i], max(cone.s[j], 1e-6)
        r = delta * np.sqrt(rng.random(10**6))
        ang = rng.uniform(-math.pi / 2, math.pi / 2, 10**6)
        xi = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        rel = s * np.array([mu, math.sqrt(max(1 - mu * mu, 0.0))])
        vals = elementary_dti_inverse(xi, rel, CUT)
        se = vals.std() / 1e3
        worst = max(worst, abs(vals.mean() - cone.values[i, j]) / max(se, 1e-300))
    s = np.geomspace(1e-3, 1e-2, 20)
    ratio = iso_kernel_direct(delta, CUT, s) / (s * np.abs(np.log(s / CUT.ell)))
    spread = ratio.max() / ratio.min() - 1
    elapsed = time.perf_counter() - t0
    report(3, [
        ("kappa=-1 vs isotropic", iso_gap < 1e-6, f"max gap {iso_gap:.1e}"),
        ("Monte Carlo 20 nodes", worst <= 3.0, f"worst {worst:.2f} sigma"),
        ("s|ln(s/l)| proportionality", spread < 0.25, f"ratio spread {spread:.1%}"),
        ("runtime 256^2", build_time < 120.0, f"{build_time:.1f} s for three tables"),
    ], elapsed)


# ------------------------------------------------------------------------ 4


def test_criterion_4_free_walking_equilibrium():
    t0 = time.perf_counter()
    target = 0.4
    c1 = order_parameter(P.free_beta)
    errs = {}
    # hydro at low density, where the fixed point is D = L
    prof = fixed_point_dti([0.01], [target], PH, n_theta=128)
    assert np.all(prof.D == PH.big_l)
    errs["hydro"] = abs(np.linalg.norm(equilibrium_velocity(prof, PH, target)) - c1)
    # kinetic, no interactions
    grid = Grid(2, 2, 2.0, 2.0, 128)
    rng = np.random.default_rng(5)
    fld = KineticField(grid, [target], 0.1 + rng.random((128, 1, 2, 2)))
    solver = KineticSolver(P, grid, "free")
    for _ in range(400):
        fld = solver.step(fld, dt=0.1)
    U = moments(fld).U[0]
    errs["kinetic"] = np.max(np.abs(np.hypot(U[..., 0], U[..., 1]) - c1))
    # VMF fluid stationary state
    ff = FluidField(grid, [target], np.ones((1, 2, 2)), np.tile([0.3, -0.2], (1, 2, 2, 1)))
    for _ in range(800):
        ff = step_vmf(ff, P, 0.05, "free")
    errs["vmf"] = np.max(np.abs(np.hypot(ff.U[..., 0], ff.U[..., 1]) - c1))
    # IBM, 10^4 walkers
    n = 10_000
    crowd = Crowd(np.zeros((n, 2)), rng.uniform(-math.pi, math.pi, n), target)
    for _ in range(600):
        crowd = step_continuous(crowd, P, seed=17, interactions=False)
    errs["ibm"] = abs(abs(np.mean(np.exp(1j * crowd.theta))) - c1)
    elapsed = time.perf_counter() - t0
    report(4, [
        *[(m, errs[m] < 1e-3, f"|U| err {errs[m]:.1e}") for m in ("hydro", "kinetic", "vmf")],
        ("ibm", errs["ibm"] < 0.05, f"|U| err {errs['ibm']:.3f}"),
        ("runtime", elapsed < 120.0, f"{elapsed:.1f} s"),
    ], elapsed)


# ------------------------------------------------------------------------ 5


def _conservation_runs():
    grid = Grid(64, 64, 32.0, 32.0, 128)
    targets = [0.0, math.pi]
    rho, U = gaussian_groups(grid, 0.8)

    solver = KineticSolver(P, grid, "local")
    state = KineticField.from_moments(grid, targets, rho, U)
    yield "kinetic", state.mass(), lambda s: solver.step(s), state, lambda s: s.mass()

    unit_U = U / np.linalg.norm(U, axis=-1, keepdims=True)
    state = FluidField(grid, targets, rho, unit_U)
    yield "fluid-mono", state.mass(), lambda s: step_mono(s, P), state, lambda s: s.mass()

    bank = make_vmf_bank(P, grid)
    state = FluidField(grid, targets, rho, U)
    yield "fluid-vmf", state.mass(), lambda s: step_vmf(s, P, bank=bank), state, lambda s: s.mass()

    hb = hydro_bank(PH, 128)
    state = hydro_state(grid, targets, rho, PH, bank=hb)
    yield "hydro", state.mass(), lambda s: step_hydro(s, PH, PH.dt, hb), state, lambda s: s.mass()


def test_criterion_5_conservation():
    t0 = time.perf_counter()
    checks = []
    for name, m0, step, state, mass in _conservation_runs():
        start = time.perf_counter()
        for _ in range(1000):
            state = step(state)
        took = time.perf_counter() - start
        drift = float(np.max(np.abs(mass(state) - m0) / m0))
        checks.append((f"{name} mass", drift < 1e-10, f"max rel drift {drift:.1e}"))
        checks.append((f"{name} runtime", took < 60.0, f"{took:.0f} s / 1000 steps"))
    report(5, checks, time.perf_counter() - t0)


# ------------------------------------------------------------------------ 6


def test_criterion_6_monokinetic_constraint():
    t0 = time.perf_counter()
    grid = Grid(32, 32, 16.0, 16.0, 64)
    rho, U = gaussian_groups(grid, 1.0)
    fld = FluidField(grid, [0.0, math.pi], rho, U)
    worst = 0.0
    for _ in range(1000):
        fld = step_mono(fld, P)
        live = fld.rho > 1e-12
        worst = max(worst, float(np.max(np.abs(np.hypot(fld.U[..., 0], fld.U[..., 1])[live] - 1.0))))
    # two streams converging on x = 5 pile up mass without bound
    cg = Grid(40, 2, 10.0, 0.5, 16)
    cU = np.zeros((1, 40, 2, 2))
    cU[0, :20, :, 0], cU[0, 20:, :, 0] = 1.0, -1.0
    caustic = FluidField(cg, [0.0], np.ones((1, 40, 2)), cU)
    fired, where = False, "none"
    try:
        for _ in range(400):
            caustic = step_mono(caustic, P.with_(k=0.0), interactions=False)
    except CausticError as err:
        fired, where = True, f"t={err.t:.2f} cell={tuple(err.cell)} rho={err.rho:.1f}"
    report(6, [
        ("| |U| - 1 | over 1000 steps", worst < 1e-8, f"max {worst:.1e}"),
        ("caustic detection", fired, where),
    ], time.perf_counter() - t0)


# ------------------------------------------------------------------------ 7


def test_criterion_7_hydro_fixed_point():
    t0 = time.perf_counter()
    n = 128
    checks = []
    iso = fixed_point_dti(np.full(n, 0.5), 2 * math.pi * np.arange(n) / n, PH, n_theta=n)
    checks.append(("isotropic rho", np.ptp(iso.D) < 1e-6 * P.big_l, f"spread {np.ptp(iso.D):.1e}"))
    low = fixed_point_dti([0.05, 0.05], [0.0, math.pi], PH.with_(delta=5.0), n_theta=n)
    checks.append(("low density D = L", bool(np.all(low.D == P.big_l)), f"max |D - L| {np.max(np.abs(low.D - 4)):.0e}"))
    slowest = 0.0
    cases = {"own/oncoming 1:20": [1.0, 20.0], "equal 10:10": [10.0, 10.0]}
    for label, rho in cases.items():
        start = time.perf_counter()
        prof = fixed_point_dti(rho, [0.0, math.pi], PH, n_theta=n)
        slowest = max(slowest, time.perf_counter() - start)
        checks.append((f"{label} residual", prof.residual < 1e-8 * P.big_l, f"{prof.residual:.1e}"))
        ahead, side = prof.D[0], prof.D[n // 4]
        checks.append((f"{label} D toward stream < lateral", ahead < side,
                       f"D(0)={ahead:.3f} D(pi/2)={side:.3f}"))
    checks.append(("runtime per solve", slowest < 30.0, f"{slowest:.1f} s"))
    report(7, checks, time.perf_counter() - t0)


# ------------------------------------------------------------------------ 8


def test_criterion_8_damping_law():
    t0 = time.perf_counter()
    grid = Grid(1, 1, 1.0, 1.0, 128)
    p = P.with_(k=0.0, d=0.5)
    fld = KineticField.from_moments(grid, [0.0], np.ones((1, 1, 1)), np.array([[[[0.6, 0.0]]]]))
    solver = KineticSolver(p, grid, "free")
    dt, ts, amp = 0.01, [0.0], [np.linalg.norm(moments(fld).U[0, 0, 0])]
    while ts[-1] < 1.0 / p.d - 1e-12:
        fld = solver.step(fld, dt=dt)
        ts.append(ts[-1] + dt)
        amp.append(np.linalg.norm(moments(fld).U[0, 0, 0]))
    rate = -np.polyfit(ts, np.log(amp), 1)[0]
    report(8, [("fitted rate", abs(rate / p.d - 1) < 0.05, f"{rate:.4f} vs d={p.d}")], time.perf_counter() - t0)


# ------------------------------------------------------------------------ 9


@pytest.fixture(scope="module")
def det_scenario():
    return from_dict({
        "domain": {"lx": 16, "ly": 16}, "grid": {"nx": 16, "ny": 16, "n_theta": 32}, "seed": 12,
        "groups": [{"target": 0.0, "heading": {"speed": 0.8},
                    "density": {"kind": "gaussian", "peak": 2.0, "center": [6, 8], "sigma": 1.5, "background": 0.05}},
                   {"target": math.pi, "heading": {"speed": 0.8},
                    "density": {"kind": "gaussian", "peak": 2.0, "center": [10, 8], "sigma": 1.5, "background": 0.05}}],
        "output": {"every": 0.5, "until": 1.0}})


def test_criterion_9_determinism(tmp_path, det_scenario):
    t0 = time.perf_counter()
    checks = []
    for model in ("ibm-discrete", "ibm-continuous", "kinetic", "fluid-mono", "fluid-vmf", "hydro"):
        until = 8.0 if model == "ibm-discrete" else None
        run(det_scenario, model, tmp_path / f"{model}-1", until=until, threads=1)
        run(det_scenario, model, tmp_path / f"{model}-2", until=until, threads=2)
        files = sorted(f.name for f in (tmp_path / f"{model}-1").iterdir())
        same = all((tmp_path / f"{model}-1" / f).read_bytes() == (tmp_path / f"{model}-2" / f).read_bytes()
                   for f in files)
        checks.append((model, same, f"{len(files)} files"))
    report(9, checks, time.perf_counter() - t0)
