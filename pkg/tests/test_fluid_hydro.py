import math

import numpy as np
import pytest

from crowdscale.fluid_hydro import (
    FixedPointError,
    equilibrium_velocity,
    fixed_point_dti,
    hydro_state,
    step_hydro,
)
from crowdscale.grid import Grid
from crowdscale.kernels import iso_kernel_direct
from crowdscale.params import ModelParams
from crowdscale.specialmath import lte_from_dti, order_parameter, theta_grid

P = ModelParams(kappa=-1.0)


def direct_map(D, rho, targets, p, delta):
    """Right-hand side of the consistency condition by a plain double sum."""
    n = D.size
    th = theta_grid(n)
    h = 2 * math.pi / n
    M = lte_from_dti(D, np.stack([np.cos(targets), np.sin(targets)], axis=-1), p.k, p.big_l, p.d).values
    g = np.asarray(rho) @ M
    s = 2.0 * np.abs(np.sin(0.5 * (th[:, None] - th[None, :])))
    avg = iso_kernel_direct(delta, p.cut, s) @ g * h / np.sum(rho)
    return 1.0 / np.maximum(avg, 1.0 / p.big_l)


def test_low_density_fixed_point_is_free_distance():
    p = P.with_(delta=5.0)
    rho, targets = [0.05, 0.05], np.array([0.0, math.pi])
    D = np.full(64, p.big_l)
    th = theta_grid(64)
    M = lte_from_dti(D, np.stack([np.cos(targets), np.sin(targets)], -1), p.k, p.big_l, p.d).values
    s = 2.0 * np.abs(np.sin(0.5 * (th[:, None] - th[None, :])))
    avg = iso_kernel_direct(5.0, p.cut, s) @ (np.asarray(rho) @ M) * (2 * math.pi / 64) / 0.1
    assert np.all(avg < 1.0 / p.big_l)
    prof = fixed_point_dti(rho, targets, p, n_theta=64)
    assert np.all(prof.D == p.big_l)
    assert prof.iterations == 0


def test_fixed_point_satisfies_direct_consistency_condition():
    p = P.with_(delta=1.0)
    rho, targets = [8.0, 12.0, 5.0], np.array([0.0, 2.5, 4.0])
    prof = fixed_point_dti(rho, targets, p, n_theta=64)
    assert prof.residual < 1e-8 * p.big_l
    np.testing.assert_allclose(direct_map(prof.D, rho, targets, p, 1.0), prof.D, atol=1e-7 * p.big_l)
    assert np.all(prof.D >= p.ell) and np.all(prof.D <= p.big_l)
    assert prof.D.min() < p.big_l


def test_fixed_point_is_locally_self_consistent():
    p = P.with_(delta=1.0)
    rho, targets = [10.0, 10.0], np.array([0.0, math.pi])
    prof = fixed_point_dti(rho, targets, p, n_theta=32)
    eps = 1e-3
    for j in (0, 5, 16):
        bumped = prof.D.copy()
        bumped[j] += eps
        r = np.max(np.abs(direct_map(bumped, rho, targets, p, 1.0) - bumped))
        assert r > 0.5 * eps


def test_isotropic_density_gives_rotation_invariant_profile():
    n = 64
    prof = fixed_point_dti(np.full(n, 0.5), 2 * math.pi * np.arange(n) / n, P, n_theta=n)
    assert np.ptp(prof.D) < 1e-6 * P.big_l
    assert prof.D[0] < P.big_l


def test_sparse_group_facing_dense_stream_sees_shorter_time_ahead():
    prof = fixed_point_dti([1.0, 20.0], [0.0, math.pi], P, n_theta=64)
    assert prof.D[0] < prof.D[16]


def test_equal_opposing_groups_are_more_threatened_sideways():
    # the isotropic kernel is concave in |v - u|, so a lateral heading meets
    # both streams at |v - u| = sqrt(2) and collides more often on average
    prof = fixed_point_dti([10.0, 10.0], [0.0, math.pi], P, n_theta=64)
    assert prof.D[16] < prof.D[0]
    np.testing.assert_allclose(prof.D, np.roll(prof.D[::-1], 1), rtol=1e-9)


def test_non_convergence_reports_history():
    with pytest.raises(FixedPointError) as err:
        fixed_point_dti([10.0, 10.0], [0.0, math.pi], P, n_theta=32, m_max=3)
    assert err.value.history.shape == (4, 1)
    assert np.all(err.value.history > 1e-8 * P.big_l)


def test_hydro_needs_isotropic_kernel():
    with pytest.raises(ValueError):
        fixed_point_dti([1.0], [0.0], P.with_(kappa=0.0))


def test_free_profile_velocity_is_order_parameter():
    prof = fixed_point_dti([0.01], [0.8], P)
    U = equilibrium_velocity(prof, P, 0.8)
    assert np.linalg.norm(U) == pytest.approx(order_parameter(P.free_beta), rel=1e-12)
    assert math.atan2(U[1], U[0]) == pytest.approx(0.8, abs=1e-12)


def test_strong_noise_kills_mean_velocity():
    p = P.with_(d=1e6)
    prof = fixed_point_dti([0.01], [0.0], p)
    assert np.linalg.norm(equilibrium_velocity(prof, p, 0.0)) < 1e-3


def test_velocity_mirrors_with_profile_and_target():
    prof = fixed_point_dti([1.0, 20.0], [0.3, 2.9], P, n_theta=64)
    mirror = type(prof)(prof.angle, np.roll(prof.D[::-1], 1))
    U = equilibrium_velocity(prof, P, 0.5)
    V = equilibrium_velocity(mirror, P, -0.5)
    np.testing.assert_allclose(V, [U[0], -U[1]], atol=1e-14)


def test_uniform_state_is_stationary():
    grid = Grid(4, 4, 4.0, 4.0, 32)
    rho = np.stack([np.full((4, 4), 8.0), np.full((4, 4), 6.0)])
    st = hydro_state(grid, [0.0, 2.0], rho, P, n_theta=32)
    out = step_hydro(step_hydro(st, P), P)
    np.testing.assert_array_equal(out.rho, rho)
    np.testing.assert_array_equal(out.U, st.U)


def test_mass_conserved_over_many_steps():
    grid = Grid(8, 4, 8.0, 4.0, 32)
    rng = np.random.default_rng(0)
    st = hydro_state(grid, [0.0, math.pi], 5.0 * rng.random((2, 8, 4)), P, n_theta=32)
    m0 = st.mass()
    for _ in range(1000):
        st = step_hydro(st, P)
    np.testing.assert_allclose(st.mass(), m0, rtol=1e-10)
    assert st.rho.min() >= 0
    assert np.all(st.fp_residual < 1e-8 * P.big_l)


def test_low_density_bump_moves_at_free_speed():
    grid = Grid(150, 1, 150.0, 1.0, 32)
    x = (np.arange(150) + 0.5) * grid.dx
    rho = (0.02 * np.exp(-0.5 * ((x - 20.0) / 3.0) ** 2))[None, :, None]
    st = hydro_state(grid, [0.0], rho, P, n_theta=32)
    speed = order_parameter(P.free_beta)
    steps = int(round(100.0 / speed / 0.5))
    for _ in range(steps):
        st = step_hydro(st, P, dt=0.5)
    peak = x[np.argmax(st.rho[0, :, 0])]
    assert abs(peak - (20.0 + speed * st.t)) <= grid.dx


def test_velocity_is_a_function_of_local_density():
    grid = Grid(6, 4, 6.0, 4.0, 32)
    rng = np.random.default_rng(1)
    st = hydro_state(grid, [0.0, 2.0], 8.0 * rng.random((2, 6, 4)), P, n_theta=32)
    st = step_hydro(st, P, warm_start=False)
    fresh = hydro_state(grid, [0.0, 2.0], st.rho, P, n_theta=32)
    assert fresh.U.tobytes() == st.U.tobytes()
    assert fresh.D.tobytes() == st.D.tobytes()


def test_vacuum_cells_take_free_distance():
    grid = Grid(3, 3, 3.0, 3.0, 32)
    rho = np.full((1, 3, 3), 10.0)
    rho[0, 1, 1] = 0.0
    st = hydro_state(grid, [0.0], rho, P, n_theta=32)
    assert np.all(st.D[1, 1] == P.big_l)
    assert st.fp_iters[1, 1] == 0
