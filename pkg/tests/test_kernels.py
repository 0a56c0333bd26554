import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from crowdscale.geometry import elementary_dti_inverse, unit
from crowdscale.kernels import (
    IsoKernelTable,
    KernelTable,
    build_iso_kernel,
    build_kernel_table,
    build_vmf_kernel,
    cached_table,
    eval_kernel,
    iso_kernel_direct,
    kernel_direct,
    load_table,
    save_table,
    vmf_kernel_direct,
)
from crowdscale.params import CutoffParams
from crowdscale.specialmath import VmfParams, vmf_density

CUT = CutoffParams()


@pytest.fixture(scope="module")
def cone_table():
    return build_kernel_table(0.0, 2.0, CUT, 256)


@pytest.fixture(scope="module")
def iso_table():
    return build_iso_kernel(2.0, CUT, 256)


def monte_carlo(kappa, delta, mu, s, n, rng):
    """Uniform samples in the cone about u = (1, 0)."""
    alpha = math.acos(kappa)
    r = delta * np.sqrt(rng.random(n))
    th = rng.uniform(-alpha, alpha, n)
    xi = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
    rel = s * np.array([mu, math.sqrt(max(1 - mu * mu, 0.0))])
    vals = elementary_dti_inverse(xi, rel, CUT)
    return vals.mean(), vals.std() / math.sqrt(n)


def polar_grid(kappa, delta, u, rel, n=800):
    """Midpoint rule on the cone in absolute coordinates."""
    alpha = math.acos(kappa)
    th0 = math.atan2(u[1], u[0])
    r = (np.arange(n) + 0.5) / n * delta
    t = th0 - alpha + (np.arange(n) + 0.5) / n * 2 * alpha
    rr, tt = np.meshgrid(r, t, indexing="ij")
    xi = np.stack([rr * np.cos(tt), rr * np.sin(tt)], -1)
    vals = elementary_dti_inverse(xi, np.asarray(rel), CUT)
    return (vals * rr).sum() * (delta / n) * (2 * alpha / n) / (alpha * delta**2)


def test_zero_relative_speed_row(cone_table, iso_table):
    assert np.all(cone_table.values[:, 0] == 0.0)
    assert iso_table.values[0] == 0.0


def test_bounds(cone_table, iso_table):
    for t in (cone_table, iso_table):
        assert np.all(t.values >= 0)
        assert np.all(t.values <= 1 / CUT.ell)


@pytest.mark.parametrize("delta", [0.3, 1.0, 2.0, 5.0])
def test_full_disk_matches_isotropic(delta):
    full = build_kernel_table(-1.0, delta, CUT, 128)
    iso = build_iso_kernel(delta, CUT, 128)
    assert np.max(np.abs(full.values - iso.values[None, :])) < 1e-6
    assert np.max(np.ptp(full.values, axis=0)) < 1e-12


def test_monte_carlo_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        mu, s, kappa = rng.uniform(-1, 1), rng.uniform(0.01, 2), rng.uniform(-1, 0.9)
        mean, se = monte_carlo(kappa, 2.0, mu, s, 10**6, rng)
        assert abs(mean - kernel_direct(kappa, 2.0, CUT, mu, s)) <= 3 * se + 1e-12


@pytest.mark.parametrize("s", [0.05, 0.4, 1.2, 1.9])
def test_isotropic_against_nested_quadrature(s):
    delta = 2.0

    def radial(phi):
        c, sn = abs(math.cos(phi)), abs(math.sin(phi))
        rmax = min(delta, CUT.R / sn) if sn > 0 else delta
        f = lambda r: min(s / (r * c), 1 / CUT.ell) * r
        return integrate.quad(f, 0, rmax, points=[min(s * CUT.ell / c, rmax)], epsabs=0, epsrel=1e-12)[0]

    pts = [math.pi - math.asin(CUT.R / delta), math.pi - math.atan(CUT.R / (s * CUT.ell))]
    if s * CUT.ell < delta:
        pts.append(math.pi - math.acos(s * CUT.ell / delta))
    half = integrate.quad(radial, math.pi / 2, math.pi, points=sorted(pts), epsabs=0,
                          epsrel=1e-11, limit=200)[0]
    ref = 2 * half / (math.pi * delta**2)
    assert iso_kernel_direct(delta, CUT, s) == pytest.approx(ref, rel=1e-9)
    assert kernel_direct(-1.0, delta, CUT, 0.2, s) == pytest.approx(ref, rel=1e-9)


def test_rotation_reduction():
    rng = np.random.default_rng(0)
    for _ in range(4):
        th = rng.uniform(0, 2 * np.pi)
        u = unit(th)
        rel = rng.uniform(-1, 1, 2)
        kappa = rng.uniform(-1, 0.8)
        s = np.linalg.norm(rel)
        ref = kernel_direct(kappa, 2.0, CUT, u @ rel / s, s)
        assert polar_grid(kappa, 2.0, u, rel) == pytest.approx(ref, abs=2e-4)


@pytest.mark.parametrize("delta", [1.0, 2.0])
def test_small_speed_asymptote(delta):
    # for s -> 0 every slice is uncapped except a thin strip; closed form
    psi_m = math.asin(min(CUT.R / delta, 1.0))
    j = integrate.quad(lambda p: math.cos(p) * math.log(math.cos(p)), 0, psi_m)[0]
    for s in (1e-3, 1e-4):
        asym = 2 * s / (math.pi * delta) * ((1 + math.log(delta / (s * CUT.ell))) * math.sin(psi_m) + j)
        assert iso_kernel_direct(delta, CUT, s) == pytest.approx(asym, rel=1e-10)


@pytest.mark.parametrize("delta", [1.0, 2.0])
def test_small_speed_proportionality(delta):
    s = np.geomspace(1e-3, 1e-2, 12)
    ratio = iso_kernel_direct(delta, CUT, s) / (s * np.abs(np.log(s / CUT.ell)))
    assert ratio.max() / ratio.min() - 1 < 0.25


@pytest.mark.parametrize("delta", [2.0, 5.0])
def test_monotone_at_small_speed(delta):
    vals = build_iso_kernel(delta, CUT, 256).values
    s = np.linspace(0, 2, 256)
    assert np.all(np.diff(vals[s <= 0.5]) >= 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 2), st.floats(-1, 1), st.floats(0.05, 10))
def test_values_bounded(mu, s, kappa, delta):
    v = kernel_direct(kappa, delta, CUT, mu, s)
    assert 0.0 <= v <= 1 / CUT.ell


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(1e-3, 2), st.floats(-1, 0.9), st.floats(0.4, 8))
def test_doubling_delta(mu, s, kappa, delta):
    # the numerator cannot shrink, the area grows fourfold
    small = kernel_direct(kappa, delta, CUT, mu, s)
    big = kernel_direct(kappa, 2 * delta, CUT, mu, s)
    assert big >= small / 4 - 1e-15
    assert big <= small + 1e-15


def test_eval_nodes_and_midpoints(cone_table, iso_table):
    mu, s = cone_table.mu, cone_table.s
    rel = s[40] * np.array([mu[100], math.sqrt(1 - mu[100] ** 2)])
    assert eval_kernel(cone_table, (1.0, 0.0), rel) == pytest.approx(cone_table.values[100, 40], abs=1e-12)
    mid_s = 0.5 * (s[40] + s[41])
    rel = mid_s * np.array([mu[100], math.sqrt(1 - mu[100] ** 2)])
    expect = 0.5 * (cone_table.values[100, 40] + cone_table.values[100, 41])
    assert eval_kernel(cone_table, (1.0, 0.0), rel) == pytest.approx(expect, abs=1e-12)
    assert eval_kernel(iso_table, iso_table.s[7]) == iso_table.values[7]
    assert eval_kernel(iso_table, 0.5 * (iso_table.s[7] + iso_table.s[8])) == pytest.approx(
        0.5 * (iso_table.values[7] + iso_table.values[8]))


def test_eval_random_points_against_direct(cone_table):
    rng = np.random.default_rng(5)
    th = rng.uniform(0, 2 * np.pi, 300)
    u = unit(rng.uniform(0, 2 * np.pi, 300))
    w = unit(th + rng.uniform(0, 2 * np.pi, 300))
    v = unit(rng.uniform(0, 2 * np.pi, 300))
    rel = v - w
    s = np.hypot(rel[:, 0], rel[:, 1])
    mu = np.einsum("ij,ij->i", u, rel) / s
    approx = eval_kernel(cone_table, u, rel)
    assert np.max(np.abs(approx - kernel_direct(0.0, 2.0, CUT, mu, s))) <= 1e-3


def test_eval_rejects_large_speed(iso_table):
    with pytest.raises(ValueError):
        eval_kernel(iso_table, 2.5)


def test_resolution_guard():
    with pytest.raises(ValueError):
        build_kernel_table(0.0, 1.0, CUT, 32)


def test_table_round_trip(tmp_path, cone_table, iso_table):
    p1 = save_table(cone_table, tmp_path / "cone.ktab")
    back = load_table(p1)
    assert isinstance(back, KernelTable)
    assert np.array_equal(back.values, cone_table.values)
    assert (back.kappa, back.delta, back.cut) == (cone_table.kappa, cone_table.delta, cone_table.cut)
    p2 = save_table(iso_table, tmp_path / "iso.ktab")
    back = load_table(p2)
    assert isinstance(back, IsoKernelTable)
    assert np.array_equal(back.values, iso_table.values)
    meta = json.loads((tmp_path / "iso.ktab.json").read_text())
    assert meta["kind"] == "iso" and meta["n_mu"] == 1 and meta["delta"] == 2.0
    assert p2.read_bytes()[:5] == b"KTAB1"


def test_rebuild_is_byte_identical(tmp_path):
    a = save_table(build_kernel_table(0.2, 1.5, CUT, 64), tmp_path / "a.ktab")
    b = save_table(build_kernel_table(0.2, 1.5, CUT, 64), tmp_path / "b.ktab")
    assert a.read_bytes() == b.read_bytes()


def test_cache_uses_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CROWDSCALE_TABLE_DIR", str(tmp_path))
    t1 = cached_table(-1.0, 1.0, CUT, 64)
    files = list(tmp_path.glob("*.ktab"))
    assert len(files) == 1
    t2 = cached_table(-1.0, 1.0, CUT, 64)
    assert np.array_equal(t1.values, t2.values)


def rectangle_vmf(delta, angle, beta, n=4096):
    th = 2 * np.pi * np.arange(n) / n
    v = unit(th)
    s = np.linalg.norm(v - unit(angle), axis=1)
    dens = vmf_density(v, VmfParams(beta, (1.0, 0.0)))
    return np.sum(iso_kernel_direct(delta, CUT, s) * dens) * 2 * np.pi / n


@pytest.mark.parametrize("angle, beta", [(0.7, 2.0), (2.0, 5.0), (1.3, 0.5)])
def test_vmf_kernel_refinement_oracle(angle, beta):
    assert vmf_kernel_direct(2.0, CUT, angle, beta) == pytest.approx(rectangle_vmf(2.0, angle, beta), abs=1e-6)


def test_vmf_kernel_isotropic_at_zero_concentration():
    vals = vmf_kernel_direct(2.0, CUT, np.linspace(0, np.pi, 9), 0.0)
    assert np.ptp(vals) < 1e-12


def test_vmf_kernel_concentrated_limit():
    angle = np.array([0.1, 0.3, 1.0, 2.0, 3.0])
    direct = iso_kernel_direct(2.0, CUT, 2 * np.sin(angle / 2))
    assert np.max(np.abs(vmf_kernel_direct(2.0, CUT, angle, 200.0) - direct)) < 1e-2
    # at w = U the kernel behaves like s log s, so the limit is slow: gap ~ beta^-1/2 log beta
    gaps = [float(vmf_kernel_direct(2.0, CUT, 0.0, b)) for b in (200.0, 2000.0, 20000.0)]
    assert gaps[0] > gaps[1] > gaps[2] > 0
    assert gaps[2] < 5e-3


def test_vmf_table(iso_table):
    betas = np.array([0.0, 0.5, 1.0, 2.0, 4.0])
    table = build_vmf_kernel(iso_table, betas, n_angle=33)
    assert np.ptp(table.values[:, 0]) < 1e-12
    assert np.all(table.values >= 0) and np.all(table.values <= 1 / CUT.ell)
    # node lookup through (w, U)
    from crowdscale.specialmath import order_parameter

    U = order_parameter(2.0) * np.array([1.0, 0.0])
    w = unit(table.angle[5])
    assert eval_kernel(table, w, U) == pytest.approx(table.values[5, 3], abs=1e-9)
    with pytest.raises(ValueError):
        build_vmf_kernel(build_kernel_table(0.0, 2.0, CUT, 64), betas)
