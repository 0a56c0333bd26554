"""Second-order macroscopic models: monokinetic and von Mises-Fisher closures.

Both evolve, per target bin ``a``, a density ``rho`` and a mean velocity
``U`` on the periodic grid. Conservative updates use dimensional splitting
(x sweep, then y sweep) so that each sweep is a convex combination under
``c dt / dx <= 0.9``:

* monokinetic: donor-cell continuity and an upwind advective update of
  ``U`` followed by renormalisation to ``|U| = 1``;
* VMF: Rusanov fluxes for ``(rho, rho U)`` with wave speed ``c`` (all
  characteristic speeds are bounded by ``c``), then the force and damping
  source ``m <- (m + dt rho F) / (1 + d dt)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dti import KernelBank, interaction_radius, potential
from .geometry import elementary_dti_inverse, unit
from .grid import Grid
from .kernels import IsoKernelTable, KernelTable, VmfKernelTable, eval_kernel, kernel_direct
from .kinetic import CflError, force_from_density, make_bank
from .params import ModelParams
from .specialmath import bessel_ratio2, beta_of_speed, vmf_on_grid

VACUUM = 1e-12
RHO_MAX = 10.0
U_CLAMP = 1.0 - 1e-9
MONO_MODES = ("nonlocal", "local", "local_iso")
VMF_MODES = ("nonlocal", "local", "free")


class CausticError(RuntimeError):
    """A monokinetic density exceeded the ceiling: trajectories crossed."""

    def __init__(self, t: float, cell: tuple, rho: float, rho_max: float):
        super().__init__(f"caustic formed at t={t:.6g} in cell {cell}: rho={rho:.6g} > rho_max={rho_max:g}")
        self.t, self.cell, self.rho = t, cell, rho


class NegativeDensityError(RuntimeError):
    pass


@dataclass
class FluidField:
    """Per-bin density ``rho[a, x, y]`` (1/m^2) and mean velocity ``U[a, x, y, :]``."""

    grid: Grid
    targets: np.ndarray
    rho: np.ndarray
    U: np.ndarray
    t: float = 0.0
    clamp_count: int = 0

    def __post_init__(self):
        self.targets = np.atleast_1d(np.asarray(self.targets, dtype=float))
        g = self.grid
        shape = (self.targets.size, g.nx, g.ny)
        self.rho = np.asarray(self.rho, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        if self.rho.shape != shape or self.U.shape != shape + (2,):
            raise ValueError(f"expected rho {shape} and U {shape + (2,)}, "
                             f"got {self.rho.shape} and {self.U.shape}")

    def mass(self) -> np.ndarray:
        return self.rho.sum(axis=(1, 2)) * self.grid.cell_area

    def copy(self) -> "FluidField":
        return replace(self, rho=self.rho.copy(), U=self.U.copy(), targets=self.targets.copy())


def _perp(U: np.ndarray) -> np.ndarray:
    return np.stack([-U[..., 1], U[..., 0]], axis=-1)


def _rotate(U: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([c * U[..., 0] - s * U[..., 1], s * U[..., 0] + c * U[..., 1]], axis=-1)


def _check_cfl(p: ModelParams, grid: Grid, dt: float):
    courant = p.c * dt / min(grid.dx, grid.dy)
    if courant > 0.9:
        raise CflError(f"transport CFL violated: c*dt/min(dx,dy) = {courant:.4g} > 0.9")


def _radius(fld: FluidField, p: ModelParams, pinned=None):
    N = fld.rho.sum(axis=0)
    delta, clamped = interaction_radius(N, p.big_c, fld.grid.diameter, pinned if pinned is not None else p.delta)
    return N, delta, clamped


# ---------------------------------------------------------------- monokinetic


def mono_dti_inverse(fld: FluidField, p: ModelParams, mode: str = "local",
                     table: KernelTable | IsoKernelTable | None = None, offsets=None) -> np.ndarray:
    """``Dbar^{-1}(x, a, w)`` for ``w = U(x, a)`` rotated by each offset.

    Returns shape ``(n_a, n_offsets, nx, ny)``. ``local_iso`` uses the
    isotropic kernel ``Delta_delta(|U_b - w|)``; a ``table`` pins ``delta``.
    """
    if mode not in MONO_MODES:
        raise ValueError(f"unknown monokinetic force mode {mode!r}; expected one of {MONO_MODES}")
    offsets = (-p.fd_step, p.fd_step) if offsets is None else tuple(offsets)
    N, delta, _ = _radius(fld, p, table.delta if table is not None else None)
    Ua = fld.U  # (n_a, nx, ny, 2)
    w = np.stack([_rotate(Ua, o) for o in offsets], axis=1)  # (n_a, n_off, nx, ny, 2)
    Ub = fld.U[None, None]  # (1, 1, n_b, nx, ny, 2)
    rel = Ub - w[:, :, None]  # (n_a, n_off, n_b, nx, ny, 2)
    floor = 1.0 / p.big_l
    if mode == "nonlocal":
        return _mono_nonlocal(fld, p, w, delta)
    kappa = -1.0 if mode == "local_iso" else p.kappa
    if table is not None:
        if table.kappa != kappa:
            raise ValueError(f"kernel table has kappa={table.kappa}, the force needs {kappa}")
        K = np.asarray(eval_kernel(table, Ua[:, None, None], rel))
    else:
        s = np.hypot(rel[..., 0], rel[..., 1])
        along = np.sum(rel * Ua[:, None, None], axis=-1)
        mu = np.divide(along, s, out=np.zeros_like(s), where=s > 0)
        K = kernel_direct(kappa, delta, p.cut, mu, s)
    num = np.sum(K * fld.rho[None, None], axis=2)
    live = N > 0
    return np.where(live, np.maximum(num / np.where(live, N, 1.0), floor), floor)


def _mono_nonlocal(fld: FluidField, p: ModelParams, w: np.ndarray, delta: np.ndarray) -> np.ndarray:
    g = fld.grid
    num = np.zeros(w.shape[:-1])
    den = np.zeros(w.shape[:-1])
    N = fld.rho.sum(axis=0)
    for i, j in g.offsets(float(np.max(delta))):
        xi = np.array([i * g.dx, j * g.dy])
        dist = math.hypot(*xi)
        near = dist <= delta  # (nx, ny)
        cone = (fld.U @ xi >= p.kappa * dist) & near  # (n_a, nx, ny)
        if not cone.any():
            continue
        rho_y = np.roll(fld.rho, (-i, -j), axis=(1, 2))
        U_y = np.roll(fld.U, (-i, -j), axis=(1, 2))
        E = elementary_dti_inverse(xi, U_y[None, None] - w[:, :, None], p.cut)  # (n_a, n_off, n_b, nx, ny)
        mask = cone[:, None].astype(float)
        num += mask * np.sum(E * rho_y[None, None], axis=2)
        den += mask * np.roll(N, (-i, -j), axis=(0, 1))[None, None]
    floor = 1.0 / p.big_l
    live = den > 0
    return np.where(live, np.maximum(num / np.where(live, den, 1.0), floor), floor)


def mono_force(fld: FluidField, p: ModelParams, mode: str = "local",
               table: KernelTable | IsoKernelTable | None = None) -> np.ndarray:
    """``Fbar = -grad_w Phibar`` at ``w = U``, shape ``(n_a, nx, ny, 2)``, orthogonal to ``U``."""
    eps = p.fd_step
    dinv = mono_dti_inverse(fld, p, mode, table, (-eps, eps))
    a = unit(fld.targets)[:, None, None, :]
    phis = []
    for o, off in enumerate((-eps, eps)):
        aw = np.sum(a * _rotate(fld.U, off), axis=-1)
        phis.append(potential(dinv[:, o], aw, p.k, p.big_l))
    F_theta = -(phis[1] - phis[0]) / (2.0 * eps)
    F_theta = np.where(fld.rho > VACUUM, F_theta, 0.0)
    return F_theta[..., None] * _perp(fld.U)


def _sweep(q: np.ndarray, flux: np.ndarray, lam: float, axis: int) -> np.ndarray:
    return q - lam * (flux - np.roll(flux, 1, axis=axis))


def _donor_cell(q: np.ndarray, vel: np.ndarray, lam: float, axis: int) -> np.ndarray:
    """Upwind flux-form update of ``q`` transported by cell-centred ``vel``."""
    flux = np.maximum(vel, 0.0) * q + np.minimum(np.roll(vel, -1, axis=axis), 0.0) * np.roll(q, -1, axis=axis)
    return _sweep(q, flux, lam, axis)


def _advect_upwind(U: np.ndarray, vel: np.ndarray, lam: float, axis: int) -> np.ndarray:
    """Advective upwind step ``U - lam (vel . grad) U`` along one axis; ``U`` has a trailing component axis."""
    back = U - np.roll(U, 1, axis=axis)
    fwd = np.roll(U, -1, axis=axis) - U
    return U - lam * (np.maximum(vel, 0.0)[..., None] * back + np.minimum(vel, 0.0)[..., None] * fwd)


def step_mono(fld: FluidField, p: ModelParams, dt: float | None = None, mode: str = "local",
              table: KernelTable | IsoKernelTable | None = None, rho_max: float = RHO_MAX,
              interactions: bool = True) -> FluidField:
    """One explicit step of the monokinetic model.

    ``interactions=False`` replaces ``Dbar`` by ``L`` (free walking).
    Raises ``CausticError`` once any density exceeds ``rho_max``.
    """
    dt = p.dt if dt is None else dt
    g = fld.grid
    _check_cfl(p, g, dt)
    if interactions:
        F = mono_force(fld, p, mode, table)
    else:
        F = _free_mono_force(fld, p)
    live = fld.rho > VACUUM
    vx, vy = p.c * fld.U[..., 0], p.c * fld.U[..., 1]
    rho = _donor_cell(fld.rho, vx, dt / g.dx, axis=1)
    rho = _donor_cell(rho, vy, dt / g.dy, axis=2)
    U = _advect_upwind(fld.U, vx, dt / g.dx, axis=1)
    U = _advect_upwind(U, vy, dt / g.dy, axis=2)
    U = U + dt * F
    norm = np.hypot(U[..., 0], U[..., 1])
    ok = live & (norm > 0)
    U = np.where(ok[..., None], U / np.where(ok, norm, 1.0)[..., None], fld.U)
    out = replace(fld, rho=rho, U=U, t=fld.t + dt)
    if not np.all(np.isfinite(rho)):
        raise NegativeDensityError("non-finite density in the monokinetic update")
    peak = float(rho.max())
    if peak > rho_max:
        cell = tuple(int(c) for c in np.unravel_index(int(np.argmax(rho)), rho.shape))
        raise CausticError(out.t, cell, peak, rho_max)
    return out


def _free_mono_force(fld: FluidField, p: ModelParams) -> np.ndarray:
    # Phi = k L^2 (1 - a.w), so F_theta = k L^2 (a . U^perp)
    a = unit(fld.targets)[:, None, None, :]
    perp = _perp(fld.U)
    F_theta = np.where(fld.rho > VACUUM, p.reaction_rate * np.sum(a * perp, axis=-1), 0.0)
    return F_theta[..., None] * perp


# ----------------------------------------------------------------------- VMF


def _sigma(rho: np.ndarray, U: np.ndarray) -> np.ndarray:
    # rho [(1 + r2)/2 Om Om + (1 - r2)/2 Op Op], r2 = I2/I0 at beta(|U|); equals rho I / 2 at U = 0
    norm = np.hypot(U[..., 0], U[..., 1])
    r2 = np.asarray(bessel_ratio2(beta_of_speed(np.minimum(norm, 1.0 - 1e-15))))
    safe = np.where(norm > 0, norm, 1.0)
    om = np.where((norm > 0)[..., None], U / safe[..., None], np.array([1.0, 0.0]))
    op = _perp(om)
    par = 0.5 * (1.0 + r2) * rho
    per = 0.5 * (1.0 - r2) * rho
    return (par[..., None, None] * om[..., :, None] * om[..., None, :]
            + per[..., None, None] * op[..., :, None] * op[..., None, :])


def vmf_flux_tensor(rho, U) -> np.ndarray:
    """``Sigma = rho (gamma_par U U + gamma_perp U^perp U^perp)``, shape ``(..., 2, 2)``."""
    rho = np.asarray(rho, dtype=float)
    U = np.asarray(U, dtype=float)
    norm = np.hypot(U[..., 0], U[..., 1])
    if np.any(norm >= 1.0):
        raise ValueError("the VMF closure needs |U| < 1")
    if np.any(norm == 0.0):
        raise ValueError("the VMF closure is undefined at |U| = 0")
    return _sigma(rho, U)


def vmf_heading_density(fld: FluidField) -> np.ndarray:
    """Total heading density ``sum_b rho_b M_{U_b}(theta)``, shape ``(n_theta, nx, ny)``."""
    M = np.moveaxis(vmf_on_grid(fld.grid.theta, fld.U), -1, 0)
    return np.einsum("jaxy,axy->jxy", M, fld.rho)


def _spectral_derivative(phi: np.ndarray) -> np.ndarray:
    n = phi.shape[0]
    k = np.fft.rfftfreq(n, 1.0 / n)
    if n % 2 == 0:
        k[-1] = 0.0
    shape = (-1,) + (1,) * (phi.ndim - 1)
    return np.fft.irfft(1j * k.reshape(shape) * np.fft.rfft(phi, axis=0), n=n, axis=0)


def vmf_potential_table(fld: FluidField, p: ModelParams, table: VmfKernelTable) -> np.ndarray:
    """``Phi(x, a, w)`` on the heading grid from a tabulated ``E^{-1}_delta`` (``kappa = -1``)."""
    g = fld.grid
    heads = g.headings
    N = fld.rho.sum(axis=0)
    E = np.asarray(eval_kernel(table, heads[:, None, None, None, :], fld.U[None]))  # (n_theta, n_b, nx, ny)
    num = np.einsum("jbxy,bxy->jxy", E, fld.rho)
    floor = 1.0 / p.big_l
    live = N > 0
    dinv = np.where(live, np.maximum(num / np.where(live, N, 1.0), floor), floor)
    aw = np.cos(np.subtract.outer(g.theta, fld.targets))[:, :, None, None]
    return potential(dinv[:, None], aw, p.k, p.big_l)


def vmf_force(fld: FluidField, p: ModelParams, mode: str = "local", bank: KernelBank | None = None,
              table: VmfKernelTable | KernelTable | IsoKernelTable | None = None,
              form: str = "auto") -> np.ndarray:
    """``Fbar = int F(u) M_U(u) du`` per bin, shape ``(n_a, nx, ny, 2)``.

    The kinetic force is evaluated on the VMF-reconstructed heading density.
    With ``kappa = -1`` the potential does not depend on the heading and
    ``form`` selects ``"ibp"`` (integrated by parts, no derivative) or
    ``"direct"`` (spectral heading derivative); ``"auto"`` picks ``"ibp"``.
    A ``VmfKernelTable`` supplies ``E^{-1}`` directly (``kappa = -1``, local).
    """
    if mode not in VMF_MODES:
        raise ValueError(f"unknown VMF force mode {mode!r}; expected one of {VMF_MODES}")
    if form not in ("auto", "ibp", "direct"):
        raise ValueError(f"unknown force form {form!r}")
    g = fld.grid
    h = g.h_theta
    heads = g.headings  # (n_theta, 2)
    M = np.moveaxis(vmf_on_grid(g.theta, fld.U), -1, 0)  # (n_theta, n_a, nx, ny)
    phi = F_theta = None
    if isinstance(table, VmfKernelTable):
        if p.kappa != -1.0 or mode != "local":
            raise ValueError("a VMF kernel table applies to the local kappa = -1 force only")
        phi = vmf_potential_table(fld, p, table)
    else:
        total = np.einsum("jaxy,axy->jxy", M, fld.rho) if mode != "free" else None
        ff = force_from_density(total, g, fld.targets, p, mode, bank, table)
        phi, F_theta = ff.potential, ff.F_theta
    if phi is not None and form != "direct":
        norm = np.hypot(fld.U[..., 0], fld.U[..., 1])
        beta = np.asarray(beta_of_speed(np.minimum(norm, 1.0 - 1e-15)))
        safe = np.where(norm > 0, norm, 1.0)
        om = fld.U / safe[..., None]
        phi = np.broadcast_to(phi, M.shape)
        mean_phi = np.sum(phi * M, axis=0) * h  # (n_a, nx, ny)
        u_om = np.einsum("jc,axyc->jaxy", heads, om)
        weight = phi * M * (1.0 + beta * u_om)
        second = np.einsum("jaxy,jc->axyc", weight, heads) * h
        F = (beta * mean_phi)[..., None] * om - second
    else:
        if phi is not None:
            F_theta = -_spectral_derivative(np.broadcast_to(phi, M.shape))
        F_theta = np.broadcast_to(F_theta, M.shape)
        perp = _perp(heads)
        F = np.einsum("jaxy,jc->axyc", F_theta * M, perp) * h
    return np.where((fld.rho > VACUUM)[..., None], F, 0.0)


def _rusanov_sweep(rho, m, sig, c, lam, axis, comp):
    """Rusanov update along one spatial axis; ``comp`` is 0 for x, 1 for y."""
    q = np.concatenate([rho[..., None], m], axis=-1)  # (n_a, nx, ny, 3)
    f = c * np.concatenate([m[..., comp:comp + 1], sig[..., comp, :]], axis=-1)
    qr = np.roll(q, -1, axis=axis)
    fr = np.roll(f, -1, axis=axis)
    flux = 0.5 * (f + fr) - 0.5 * c * (qr - q)
    q = q - lam * (flux - np.roll(flux, 1, axis=axis))
    return q[..., 0], q[..., 1:]


def step_vmf(fld: FluidField, p: ModelParams, dt: float | None = None, mode: str = "local",
             bank: KernelBank | None = None, table=None, form: str = "auto") -> FluidField:
    """One step of the VMF model: Rusanov fluxes, then force and damping source."""
    dt = p.dt if dt is None else dt
    g = fld.grid
    _check_cfl(p, g, dt)
    F = vmf_force(fld, p, mode, bank, table, form)
    rho, m = fld.rho, fld.rho[..., None] * fld.U
    for axis, comp, dx in ((1, 0, g.dx), (2, 1, g.dy)):
        U = _velocity(rho, m)
        rho, m = _rusanov_sweep(rho, m, _sigma(rho, U), p.c, dt / dx, axis, comp)
    if np.any(rho < 0):
        raise NegativeDensityError(f"negative density {rho.min():.3g} in the VMF update")
    m = (m + dt * rho[..., None] * F) / (1.0 + p.d * dt)
    U = _velocity(rho, m)
    norm = np.hypot(U[..., 0], U[..., 1])
    over = norm > U_CLAMP
    if over.any():
        U = np.where(over[..., None], U * (U_CLAMP / np.where(over, norm, 1.0))[..., None], U)
    return replace(fld, rho=rho, U=U, t=fld.t + dt, clamp_count=fld.clamp_count + int(over.sum()))


def _velocity(rho, m):
    live = rho > VACUUM
    return np.where(live[..., None], m / np.where(live, rho, 1.0)[..., None], 0.0)


def make_vmf_bank(p: ModelParams, grid: Grid, table=None) -> KernelBank:
    """Kernel cache for repeated local VMF force evaluations."""
    return make_bank(p, grid, table)
