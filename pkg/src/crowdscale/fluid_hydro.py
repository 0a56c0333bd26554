"""First-order hydrodynamic model (isotropic kernel, ``kappa = -1``).

At each cell the DTI profile ``D(u)`` solves the consistency condition

    D(u) = 1 / max( (1/N) sum_b rho_b int Delta^{-1}_delta(|v - u|) M_D(v, b) dv, 1/L )

where ``M_D(., b)`` is the local equilibrium built from ``D`` itself. The
mean velocities of those equilibria then drive the continuity equations
``d_t rho_a + div(c rho_a U_a) = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dti import KernelBank, interaction_radius
from .fluid_second_order import VACUUM, _donor_cell
from .geometry import unit
from .grid import Grid
from .kernels import IsoKernelTable
from .kinetic import CflError
from .params import ModelParams
from .specialmath import lte_from_dti, theta_grid

M_MAX = 500
OMEGA = 0.5
OMEGA_MIN = 1.0 / 1024


class FixedPointError(RuntimeError):
    """The damped DTI iteration did not converge; carries the residual history."""

    def __init__(self, message: str, history: np.ndarray, cells=None):
        super().__init__(message)
        self.history = history
        self.cells = cells


@dataclass(frozen=True)
class DtiProfile:
    """``D(u)`` on the uniform heading grid with solver diagnostics."""

    angle: np.ndarray
    D: np.ndarray
    iterations: int = 0
    residual: float = 0.0


def hydro_bank(p: ModelParams, n_theta: int, table: IsoKernelTable | None = None) -> KernelBank:
    if p.kappa != -1.0:
        raise ValueError("the hydrodynamic model is restricted to kappa = -1")
    return KernelBank(-1.0, p.cut, n_theta, (0.0,), pinned=p.delta, table=table)


def _lte(D: np.ndarray, targets: np.ndarray, p: ModelParams) -> np.ndarray:
    """``M_D(u, a)`` for a batch: ``D`` is ``(cells, n)``, result ``(cells, n_a, n)``."""
    n = D.shape[-1]
    th = theta_grid(n)
    ua = np.cos(th[None, :] - targets[:, None])
    Dc = D[:, None, :]
    phi = 0.5 * p.k * (Dc * Dc - 2.0 * p.big_l * Dc * ua + p.big_l**2) / p.d
    w = np.exp(-(phi - phi.min(axis=-1, keepdims=True)))
    return w / (w.sum(axis=-1, keepdims=True) * (2.0 * math.pi / n))


def _consistency_map(D, rho, targets, p, bank, delta, N):
    g = np.einsum("cb,cbj->jc", rho, _lte(D, targets, p))
    avg = bank.average(g, delta)[0]  # (n, cells)
    dinv = np.maximum(avg / N, 1.0 / p.big_l)
    return (1.0 / dinv).T


def solve_dti_batch(rho: np.ndarray, targets, p: ModelParams, bank: KernelBank,
                    diameter: float = math.inf, init: np.ndarray | None = None,
                    omega: float = OMEGA, m_max: int = M_MAX):
    """Damped fixed-point solve for many cells at once.

    ``rho`` is ``(cells, n_a)`` with positive totals. Each cell keeps its
    own damping factor, halved whenever its residual grows, and stops
    updating once ``max_u |G(D) - D| < 1e-8 L``. Returns ``(D, iterations,
    residual)``; raises ``FixedPointError`` listing the failed cells.
    """
    rho = np.asarray(rho, dtype=float)
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    cells, n = rho.shape[0], bank.n_theta
    N = rho.sum(axis=1)
    if np.any(N <= 0):
        raise ValueError("the DTI fixed point needs a positive total density")
    delta, _ = interaction_radius(N, p.big_c, diameter, bank.pinned)
    D = np.full((cells, n), p.big_l) if init is None else np.array(init, dtype=float)
    tol = 1e-8 * p.big_l
    w = np.full(cells, float(omega))
    iters = np.zeros(cells, dtype=int)
    res = np.full(cells, np.inf)
    active = np.arange(cells)
    history = []
    for m in range(m_max + 1):
        G = _consistency_map(D[active], rho[active], targets, p, bank, delta[active], N[active])
        r = np.max(np.abs(G - D[active]), axis=1)
        step = np.full(cells, np.nan)
        step[active] = r
        history.append(step)
        grew = r > res[active]
        w[active[grew]] = np.maximum(0.5 * w[active[grew]], OMEGA_MIN)
        res[active] = r
        done = r < tol
        iters[active] = m
        if m == m_max:
            break
        keep = ~done
        a = active[keep]
        D[a] = (1.0 - w[a, None]) * D[a] + w[a, None] * G[keep]
        active = a
        if active.size == 0:
            break
    if active.size and np.any(res[active] >= tol):
        bad = active[res[active] >= tol]
        raise FixedPointError(f"DTI fixed point did not converge in {m_max} iterations for {bad.size} cell(s); "
                              f"worst residual {res[bad].max():.3g}", np.array(history)[:, bad], bad)
    return D, iters, res


def fixed_point_dti(rho, targets, p: ModelParams, iso_kernel: IsoKernelTable | None = None,
                    n_theta: int = 128, init=None, diameter: float = math.inf,
                    omega: float = OMEGA, m_max: int = M_MAX) -> DtiProfile:
    """Self-consistent DTI profile for bin densities ``rho`` at target angles ``targets``.

    An ``iso_kernel`` pins the interaction radius to the table's; otherwise
    it follows the total density. The iteration starts from ``D = L``
    unless ``init`` is given.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    bank = hydro_bank(p, n_theta, iso_kernel)
    init = None if init is None else np.asarray(init, dtype=float)[None]
    D, iters, res = solve_dti_batch(rho[None], targets, p, bank, diameter, init, omega, m_max)
    return DtiProfile(theta_grid(n_theta), D[0], int(iters[0]), float(res[0]))


def equilibrium_velocity(profile: DtiProfile, p: ModelParams, a) -> np.ndarray:
    """Mean velocity of the local equilibrium toward target ``a`` (angle or unit vector)."""
    a = np.asarray(a, dtype=float)
    vec = unit(float(a)) if a.ndim == 0 else a
    return lte_from_dti(profile.D, vec, p.k, p.big_l, p.d).mean_velocity()[0]


def _velocities(D: np.ndarray, targets: np.ndarray, p: ModelParams) -> np.ndarray:
    n = D.shape[-1]
    M = _lte(D, targets, p)
    return np.einsum("cbj,jk->cbk", M, unit(theta_grid(n))) * (2.0 * math.pi / n)


@dataclass
class HydroState:
    """Bin densities with the cached DTI profiles and velocities they determine.

    ``D`` is ``(nx, ny, n_theta)``, ``U`` is ``(n_a, nx, ny, 2)``; ``fp_iters``
    and ``fp_residual`` are the per-cell fixed-point diagnostics.
    """

    grid: Grid
    targets: np.ndarray
    rho: np.ndarray
    D: np.ndarray
    U: np.ndarray
    fp_iters: np.ndarray
    fp_residual: np.ndarray
    t: float = 0.0
    n_theta: int = field(default=128)

    def mass(self) -> np.ndarray:
        return self.rho.sum(axis=(1, 2)) * self.grid.cell_area


def equilibrate(grid: Grid, targets, rho, p: ModelParams, bank: KernelBank,
                init: np.ndarray | None = None):
    """Per-cell DTI profiles and velocities for ``rho[a, x, y]``.

    Cells with identical densities share one solve; vacuum cells take
    ``D = L``. Returns ``(D, U, iters, residual)`` in grid layout.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    na, nx, ny = rho.shape
    n = bank.n_theta
    flat = rho.reshape(na, -1).T
    D = np.full((nx * ny, n), p.big_l)
    iters = np.zeros(nx * ny, dtype=int)
    res = np.zeros(nx * ny)
    live = flat.sum(axis=1) > VACUUM
    if live.any():
        uniq, first, inverse = np.unique(flat[live], axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        idx = np.flatnonzero(live)
        start = None if init is None else init.reshape(-1, n)[idx[first]]
        try:
            Du, it, r = solve_dti_batch(uniq, targets, p, bank, grid.diameter, start)
        except FixedPointError as err:
            cells = [tuple(int(v) for v in np.unravel_index(idx[first[c]], (nx, ny))) for c in err.cells]
            raise FixedPointError(f"{err} at cells {cells[:10]}", err.history, cells) from None
        D[idx], iters[idx], res[idx] = Du[inverse], it[inverse], r[inverse]
    U = _velocities(D, targets, p)  # (cells, n_a, 2)
    U = np.moveaxis(U, 0, 1).reshape(na, nx, ny, 2)
    return D.reshape(nx, ny, n), U, iters.reshape(nx, ny), res.reshape(nx, ny)


def hydro_state(grid: Grid, targets, rho, p: ModelParams, n_theta: int = 128,
                table: IsoKernelTable | None = None, bank: KernelBank | None = None) -> HydroState:
    """Build a state from densities, solving every cell from ``D = L``."""
    bank = hydro_bank(p, n_theta, table) if bank is None else bank
    rho = np.asarray(rho, dtype=float)
    D, U, iters, res = equilibrate(grid, targets, rho, p, bank)
    return HydroState(grid, np.atleast_1d(np.asarray(targets, dtype=float)), rho, D, U, iters, res,
                      n_theta=bank.n_theta)


def step_hydro(state: HydroState, p: ModelParams, dt: float | None = None,
               bank: KernelBank | None = None, warm_start: bool = True) -> HydroState:
    """Upwind continuity step with the cached velocities, then re-equilibrate.

    The new profiles are warm-started from the previous ones unless
    ``warm_start`` is false.
    """
    dt = p.dt if dt is None else dt
    g = state.grid
    courant = p.c * dt / min(g.dx, g.dy)
    if courant > 0.9:
        raise CflError(f"transport CFL violated: c*dt/min(dx,dy) = {courant:.4g} > 0.9")
    bank = hydro_bank(p, state.n_theta) if bank is None else bank
    rho = _donor_cell(state.rho, p.c * state.U[..., 0], dt / g.dx, axis=1)
    rho = _donor_cell(rho, p.c * state.U[..., 1], dt / g.dy, axis=2)
    D, U, iters, res = equilibrate(g, state.targets, rho, p, bank, state.D if warm_start else None)
    return replace(state, rho=rho, D=D, U=U, fp_iters=iters, fp_residual=res, t=state.t + dt)
