"""Mean-field Fokker-Planck solver on ``(x, y, theta)`` with discrete target bins.

The update alternates the order of its sub-steps (x, y, theta, then theta,
y, x), which gives Strang accuracy over each pair of steps at Lie cost:

* transport in x and y: conservative first-order upwind, positivity
  preserving under ``c dt / dx <= 0.9``;
* theta drift-diffusion: implicit Scharfetter-Gummel fluxes, a periodic
  tridiagonal M-matrix solve. It conserves mass, keeps ``f >= 0`` for any
  step, and its discrete equilibrium is exactly ``exp(-Phi/d)`` when the
  drift derives from a heading-independent potential.

Fields are heading-major: ``f[theta, a, x, y]``, so that the theta solve
runs over contiguous rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _accel
from .dti import (
    KernelBank,
    interaction_radius,
    local_dti_inverse,
    nonlocal_dti_inverse,
    potential,
    probe_offsets,
)
from .grid import Grid
from .kernels import IsoKernelTable, KernelTable
from .params import ModelParams
from .specialmath import vmf_on_grid

VACUUM = 1e-12
MODES = ("free", "local", "nonlocal")


class CflError(ValueError):
    """The transport step violates ``c dt / min(dx, dy) <= 0.9``."""


@dataclass
class KineticField:
    """Distribution ``f[theta, a, x, y]`` (per m^2 per rad) for target angles ``targets``."""

    grid: Grid
    targets: np.ndarray
    f: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.targets = np.atleast_1d(np.asarray(self.targets, dtype=float))
        g = self.grid
        expect = (g.n_theta, self.targets.size, g.nx, g.ny)
        if self.f.shape != expect:
            raise ValueError(f"f has shape {self.f.shape}, expected {expect}")

    @classmethod
    def from_moments(cls, grid: Grid, targets, rho, U, t: float = 0.0) -> "KineticField":
        """``f = rho M_U`` per bin; ``rho`` has shape ``(n_a, nx, ny)``, ``U`` ``(n_a, nx, ny, 2)``."""
        rho = np.asarray(rho, dtype=float)
        f = rho[..., None] * vmf_on_grid(grid.theta, np.asarray(U, dtype=float))
        return cls(grid, targets, np.ascontiguousarray(np.moveaxis(f, -1, 0)), t)

    def mass(self) -> np.ndarray:
        """Total mass per target bin."""
        return self.f.sum(axis=(0, 2, 3)) * self.grid.h_theta * self.grid.cell_area

    def copy(self) -> "KineticField":
        return replace(self, f=self.f.copy(), targets=self.targets.copy())


@dataclass(frozen=True)
class Moments:
    rho: np.ndarray  # (n_a, nx, ny)
    U: np.ndarray  # (n_a, nx, ny, 2)
    N: np.ndarray  # (nx, ny)
    vacuum: np.ndarray  # (n_a, nx, ny) bool


def moments(fld: KineticField) -> Moments:
    """Density, mean velocity per bin and total density by heading quadrature."""
    g = fld.grid
    h = g.h_theta
    rho = fld.f.sum(axis=0) * h
    flux = np.moveaxis(np.tensordot(g.headings.T, fld.f, axes=([1], [0])), 0, -1) * h
    vacuum = rho <= VACUUM
    U = np.where(vacuum[..., None], 0.0, flux / np.where(vacuum, 1.0, rho)[..., None])
    return Moments(rho, U, rho.sum(axis=0), vacuum)


@dataclass(frozen=True)
class ForceField:
    """Heading force ``F_theta[theta, a, x, y]`` (rad/s), possibly broadcast in x, y.

    ``potential`` holds ``Phi(x, a, w)`` on the heading grid when it does not
    depend on the current heading (free walking, ``kappa = -1``); the solver
    then takes face drifts from potential differences.
    """

    F_theta: np.ndarray
    potential: np.ndarray | None = None
    delta_clamped: int = 0


def _cosines(theta, targets) -> np.ndarray:
    """``a . w`` for headings ``theta`` against each target, shape ``(n_theta, n_a, 1, 1)``."""
    return np.cos(np.subtract.outer(theta, targets))[:, :, None, None]


def nonlocal_dti_field(fld: KineticField, p: ModelParams, offsets=(0.0,)) -> np.ndarray:
    """``D(x, u, w)`` for test directions ``w = u`` rotated by each offset.

    Returns shape ``(n_offsets, n_theta, nx, ny)`` (m).
    """
    g = fld.grid
    total = fld.f.sum(axis=1)
    N = total.sum(axis=0) * g.h_theta
    delta, _ = interaction_radius(N, p.big_c, g.diameter, p.delta)
    return 1.0 / nonlocal_dti_inverse(total, g, p.kappa, p.cut, delta, offsets)


def make_bank(p: ModelParams, grid: Grid, table: KernelTable | IsoKernelTable | None = None) -> KernelBank:
    offsets = probe_offsets(p.kappa, p.fd_step)
    return KernelBank(p.kappa, p.cut, grid.n_theta, offsets, pinned=p.delta, table=table)


def dti_inverse_field(total: np.ndarray, grid: Grid, p: ModelParams, mode: str,
                      bank: KernelBank | None = None, table=None):
    """Averaged inverse DTI ``(n_offsets, n_theta, nx, ny)`` of a total heading density.

    ``total`` has shape ``(n_theta, nx, ny)``. Returns the inverse DTI and
    the number of cells whose interaction radius was clamped.
    """
    N = total.sum(axis=0) * grid.h_theta
    delta, clamped = interaction_radius(N, p.big_c, grid.diameter, p.delta)
    offsets = probe_offsets(p.kappa, p.fd_step)
    if mode == "local":
        if bank is None:
            bank = make_bank(p, grid, table)
        flat = total.reshape(grid.n_theta, -1)
        dinv = local_dti_inverse(flat, bank, N.ravel(), delta.ravel(), p.big_l)
        dinv = dinv.reshape(len(offsets), grid.n_theta, grid.nx, grid.ny)
    elif mode == "nonlocal":
        dinv = nonlocal_dti_inverse(total, grid, p.kappa, p.cut, delta, offsets)
    else:
        raise ValueError(f"no averaged DTI in mode {mode!r}")
    return dinv, int(clamped.sum())


def force_from_density(total, grid: Grid, targets, p: ModelParams, mode: str = "local",
                       bank: KernelBank | None = None, table=None) -> ForceField:
    """Interaction force ``F_theta = -dPhi/dw`` at ``w = u`` for a total heading density.

    ``total`` has shape ``(n_theta, nx, ny)`` and is ignored in free mode.
    """
    if mode not in MODES:
        raise ValueError(f"unknown force mode {mode!r}; expected one of {MODES}")
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    theta = grid.theta
    if mode == "free":
        phi = p.reaction_rate * (1.0 - _cosines(theta, targets))
        return ForceField(_centred_derivative(phi, grid.h_theta), phi)
    dinv, clamped = dti_inverse_field(total, grid, p, mode, bank, table)
    if p.kappa == -1.0:
        phi = potential(dinv[0][:, None], _cosines(theta, targets), p.k, p.big_l)
        return ForceField(_centred_derivative(phi, grid.h_theta), phi, clamped)
    lo, hi = probe_offsets(p.kappa, p.fd_step)
    phi_lo = potential(dinv[0][:, None], _cosines(theta + lo, targets), p.k, p.big_l)
    phi_hi = potential(dinv[1][:, None], _cosines(theta + hi, targets), p.k, p.big_l)
    return ForceField(-(phi_hi - phi_lo) / (hi - lo), None, clamped)


def force_field(fld: KineticField, p: ModelParams, mode: str = "local",
                bank: KernelBank | None = None, table=None) -> ForceField:
    """Interaction force on the kinetic field.

    ``mode`` is ``"free"`` (``D = L``), ``"local"`` (kernel contraction at the
    same cell) or ``"nonlocal"`` (cone quadrature over cells). A kernel
    ``table`` pins the interaction radius to the table's ``delta``.
    """
    total = None if mode == "free" else fld.f.sum(axis=1)
    return force_from_density(total, fld.grid, fld.targets, p, mode, bank, table)


def face_drift(total, grid: Grid, targets, p: ModelParams, mode: str = "local",
               bank: KernelBank | None = None, table=None):
    """Drift ``F[theta, a, x, y]`` on the face between headings ``theta`` and ``theta + h``.

    Potential differences when ``Phi`` does not depend on the heading,
    otherwise the centred probe force averaged onto faces. Returns the
    drift and the number of clamped interaction radii.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    theta, h = grid.theta, grid.h_theta
    if mode == "free":
        phi = p.reaction_rate * (1.0 - _cosines(theta, targets))
        return -(np.roll(phi, -1, axis=0) - phi) / h, 0
    n, na = grid.n_theta, targets.size
    if mode == "local":
        # normalisation, 1/L floor and vacuum handled inside the compiled kernel
        N = total.sum(axis=0).ravel() * h
        delta, clamped = interaction_radius(N, p.big_c, grid.diameter, p.delta)
        if bank is None:
            bank = make_bank(p, grid, table)
        flat = bank.average(total.reshape(n, -1), delta)
        scale = np.divide(1.0, N, out=np.zeros_like(N), where=N > 0)
        clamped = int(clamped.sum())
    else:
        dinv, clamped = dti_inverse_field(total, grid, p, mode, bank, table)
        flat = dinv.reshape(dinv.shape[0], n, -1)
        scale = np.ones(flat.shape[-1])
    if p.kappa == -1.0:
        cos = np.cos(np.subtract.outer(theta, targets))
        face = _accel.face_drift_potential(flat[0], scale, cos, p.k, p.big_l, h)
    else:
        lo, hi = probe_offsets(p.kappa, p.fd_step)
        cos_lo = np.cos(np.subtract.outer(theta + lo, targets))
        cos_hi = np.cos(np.subtract.outer(theta + hi, targets))
        face = _accel.face_drift_probe(flat[0], flat[1], scale, cos_lo, cos_hi, p.k, p.big_l, hi - lo)
    return face.reshape(n, na, grid.nx, grid.ny), clamped


def _centred_derivative(phi: np.ndarray, h: float) -> np.ndarray:
    return -(np.roll(phi, -1, axis=0) - np.roll(phi, 1, axis=0)) / (2.0 * h)


def _bernoulli(z: np.ndarray) -> np.ndarray:
    # z / (exp(z) - 1), with the removable singularity at 0
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    with np.errstate(over="ignore"):
        out = safe / np.expm1(safe)
    return np.where(small, 1.0 - 0.5 * z, out)


def solve_cyclic_tridiagonal(lower, diag, upper, rhs):
    """Solve periodic tridiagonal systems along the first axis (batched over the rest).

    Row ``i`` reads ``lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]``
    with indices modulo ``n``. Thomas elimination plus a Sherman-Morrison
    correction for the two corner entries; requires diagonal dominance.
    """
    n = diag.shape[0]
    shape = diag.shape
    a = np.ascontiguousarray(lower, dtype=float).reshape(n, -1)
    b = np.array(diag, dtype=float).reshape(n, -1)
    c = np.array(upper, dtype=float).reshape(n, -1)
    r = np.array(rhs, dtype=float).reshape(n, -1)
    gamma = -b[0].copy()
    corner_low, corner_up = a[0].copy(), c[n - 1].copy()
    b[0] -= gamma
    b[n - 1] -= corner_low * corner_up / gamma
    u = np.zeros_like(r)
    u[0] = gamma
    u[n - 1] = corner_up
    inv = 1.0 / b[0]
    c[0] *= inv
    r[0] *= inv
    u[0] *= inv
    for i in range(1, n):
        inv = 1.0 / (b[i] - a[i] * c[i - 1])
        c[i] *= inv
        r[i] -= a[i] * r[i - 1]
        r[i] *= inv
        u[i] -= a[i] * u[i - 1]
        u[i] *= inv
    for i in range(n - 2, -1, -1):
        r[i] -= c[i] * r[i + 1]
        u[i] -= c[i] * u[i + 1]
    ratio = corner_low / gamma
    fact = (r[0] + ratio * r[n - 1]) / (1.0 + u[0] + ratio * u[n - 1])
    r -= fact * u
    return r.reshape(shape)


def theta_step_reference(f: np.ndarray, face_force: np.ndarray, d: float, dt: float, h: float) -> np.ndarray:
    """Implicit drift-diffusion step in theta along the first axis.

    ``face_force[i]`` is the drift at the face between ``i`` and ``i+1``.
    Flux ``J = (d/h) [B(-z) f_i - B(z) f_{i+1}]`` with ``z = F h / d``;
    ``d = 0`` reduces to implicit upwinding.
    """
    face_force = np.broadcast_to(face_force, f.shape)
    lam = dt / h
    if d > 0:
        z = face_force * (h / d)
        scale = lam * d / h
        in_left = _bernoulli(z) * scale  # weight of f_{i+1} in J_{i+1/2}
        out_right = in_left + z * scale  # B(-z) = B(z) + z
    else:
        out_right = np.maximum(face_force, 0.0) * lam
        in_left = np.maximum(-face_force, 0.0) * lam
    # (f_new - f)/dt = -(J_{i+1/2} - J_{i-1/2}) / h
    diag = 1.0 + out_right + np.roll(in_left, 1, axis=0)
    lower = -np.roll(out_right, 1, axis=0)
    return solve_cyclic_tridiagonal(lower, diag, -in_left, f)


def transport_reference(f: np.ndarray, vel: np.ndarray, dt: float, dx: float, axis: int) -> np.ndarray:
    """Conservative upwind transport along ``axis`` with heading velocities ``vel[theta]``."""
    shape = (-1,) + (1,) * (f.ndim - 1)
    pos = (np.maximum(vel, 0.0) * (dt / dx)).reshape(shape)
    neg = (np.minimum(vel, 0.0) * (dt / dx)).reshape(shape)
    back = f - np.roll(f, 1, axis=axis)  # f_i - f_{i-1}
    out = f - pos * back
    out -= neg * np.roll(back, -1, axis=axis)
    return out


def theta_step(f: np.ndarray, face_force: np.ndarray, d: float, dt: float, h: float) -> np.ndarray:
    """Compiled ``theta_step_reference``."""
    n = f.shape[0]
    rows = np.ascontiguousarray(f).reshape(n, -1)
    face = np.ascontiguousarray(np.broadcast_to(face_force, f.shape)).reshape(n, -1)
    return _accel.theta_step_rows(rows, face, float(d), float(dt), float(h)).reshape(f.shape)


def transport(f: np.ndarray, vel: np.ndarray, dt: float, dx: float, axis: int) -> np.ndarray:
    """Compiled ``transport_reference`` for ``f[theta, a, x, y]`` along axis 2 or 3."""
    pos = np.maximum(vel, 0.0) * (dt / dx)
    neg = np.minimum(vel, 0.0) * (dt / dx)
    f = np.ascontiguousarray(f)
    if axis == 2:
        return _accel.transport_x(f, pos, neg)
    if axis == 3:
        return _accel.transport_y(f, pos, neg)
    raise ValueError("transport axis must be 2 (x) or 3 (y)")


@dataclass
class KineticSolver:
    """Time stepper holding the force mode and cached kernels."""

    params: ModelParams
    grid: Grid
    mode: str = "local"
    table: KernelTable | IsoKernelTable | None = None
    bank: KernelBank | None = field(default=None, repr=False)
    steps: int = 0
    last_clamped: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown force mode {self.mode!r}")
        if self.mode == "local" and self.bank is None:
            self.bank = make_bank(self.params, self.grid, self.table)

    def check_cfl(self, dt: float):
        g, p = self.grid, self.params
        courant = p.c * dt / min(g.dx, g.dy)
        if courant > 0.9:
            raise CflError(f"transport CFL violated: c*dt/min(dx,dy) = {courant:.4g} > 0.9")

    def force(self, fld: KineticField) -> ForceField:
        return force_field(fld, self.params, self.mode, bank=self.bank, table=self.table)

    def _theta(self, fld: KineticField, dt: float) -> np.ndarray:
        total = None if self.mode == "free" else fld.f.sum(axis=1)
        face, self.last_clamped = face_drift(total, self.grid, fld.targets, self.params, self.mode,
                                             self.bank, self.table)
        return theta_step(fld.f, face, self.params.d, dt, self.grid.h_theta)

    def step(self, fld: KineticField, dt: float | None = None) -> KineticField:
        dt = self.params.dt if dt is None else dt
        self.check_cfl(dt)
        g, p = self.grid, self.params
        vx, vy = p.c * np.cos(g.theta), p.c * np.sin(g.theta)
        out = replace(fld)
        if self.steps % 2 == 0:
            out.f = transport(fld.f, vx, dt, g.dx, axis=2)
            out.f = transport(out.f, vy, dt, g.dy, axis=3)
            out.f = self._theta(out, dt)
        else:
            out.f = self._theta(fld, dt)
            out.f = transport(out.f, vy, dt, g.dy, axis=3)
            out.f = transport(out.f, vx, dt, g.dx, axis=2)
        out.t = fld.t + dt
        self.steps += 1
        return out


def step_kinetic(fld: KineticField, p: ModelParams, dt: float | None = None, mode: str = "local",
                 table=None) -> KineticField:
    """One step with a fresh solver (convenience; use ``KineticSolver`` in loops)."""
    return KineticSolver(p, fld.grid, mode, table).step(fld, dt)
