"""Averaged distance-to-interaction (DTI) on the phase-space grid.

Shared by the kinetic and fluid solvers. Test directions are expressed as
angular offsets from the heading ``u``: ``w = u`` rotated by ``offset``.
For ``kappa = -1`` the cone is the whole disk, the DTI no longer depends on
``u``, and the single offset 0 yields ``D(w)`` directly on the heading grid.
"""
from __future__ import annotations

import math

import numpy as np

from . import _accel
from .geometry import elementary_dti_inverse, unit
from .grid import Grid
from .kernels import IsoKernelTable, KernelTable, eval_kernel, kernel_direct
from .params import CutoffParams

LATTICE_RATIO = 1.02


def interaction_radius(density, big_c: float, diameter: float, pinned: float | None = None):
    """``delta = C N^{-1/2}`` clamped to ``diameter``; returns ``(delta, clamped)``.

    ``pinned`` overrides the density law everywhere.
    """
    N = np.asarray(density, dtype=float)
    if pinned is not None:
        return np.full(N.shape, float(pinned)), np.zeros(N.shape, dtype=bool)
    with np.errstate(divide="ignore"):
        delta = big_c / np.sqrt(N)
    clamped = ~(delta < diameter)
    return np.where(clamped, diameter, delta), clamped


def probe_offsets(kappa: float, fd_step: float) -> tuple[float, ...]:
    """Offsets of the test directions needed by the force evaluation."""
    return (0.0,) if kappa == -1.0 else (-fd_step, fd_step)


class KernelBank:
    """Circulant kernels ``K[o, k] = Delta^{-1}(u, v_k - w_o)`` in the frame ``u = e_0``.

    The average ``sum_v K(v - u) g(v) dv`` over the heading grid is then a
    circular correlation, evaluated by FFT. Kernels are cached per
    interaction radius: with ``pinned`` (or a ``table``) a single radius is
    used; otherwise radii are snapped to a geometric lattice of ratio
    ``LATTICE_RATIO`` and interpolated linearly in ``log delta``.
    """

    def __init__(self, kappa: float, cut: CutoffParams, n_theta: int, offsets=(0.0,),
                 pinned: float | None = None, table: KernelTable | IsoKernelTable | None = None):
        self.kappa = float(kappa)
        self.cut = cut
        self.n_theta = n_theta
        self.offsets = tuple(float(o) for o in offsets)
        self.table = table
        if table is not None:
            if table.kappa != self.kappa or table.cut != cut:
                raise ValueError("kernel table parameters do not match the model")
            pinned = table.delta
        self.pinned = pinned
        self._cache: dict = {}
        psi = 2.0 * math.pi * np.arange(n_theta) / n_theta
        self._v = unit(psi)

    def _kernel(self, delta: float) -> np.ndarray:
        w = unit(np.asarray(self.offsets))
        rel = self._v[None, :, :] - w[:, None, :]
        if self.table is not None:
            return np.asarray(eval_kernel(self.table, np.array([1.0, 0.0]), rel))
        s = np.hypot(rel[..., 0], rel[..., 1])
        mu = np.divide(rel[..., 0], s, out=np.zeros_like(s), where=s > 0)
        return kernel_direct(self.kappa, delta, self.cut, mu, s)

    def spectrum(self, key) -> np.ndarray:
        """Conjugated FFT of the kernels at lattice node ``key`` (int) or exact radius (float)."""
        spec = self._cache.get(key)
        if spec is None:
            delta = LATTICE_RATIO ** key if isinstance(key, (int, np.integer)) else key
            spec = np.conj(np.fft.rfft(self._kernel(float(delta)), axis=-1))
            self._cache[key] = spec
        return spec

    def kernel(self, delta: float) -> np.ndarray:
        return self._kernel(delta)

    def average(self, g: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """``A[o, j, c] = sum_k K_o(theta_k - theta_j) g[k, c] h`` for cells ``c``.

        ``g`` has shape ``(n_theta, cells)``, ``delta`` shape ``(cells,)``.
        """
        h = 2.0 * math.pi / self.n_theta
        n = self.n_theta
        G = np.fft.rfft(g, axis=0)
        if self.pinned is not None:
            spec = self.spectrum(float(self.pinned))[:, :, None]
            return np.fft.irfft(G[None] * spec, n=n, axis=1) * h
        pos = np.log(delta) / math.log(LATTICE_RATIO)
        lo = np.floor(pos).astype(np.int64)
        lam = pos - lo
        # the average is linear in the kernel: interpolate spectra per cell
        nodes = np.unique(np.concatenate([lo, lo + 1]))
        specs = np.stack([self.spectrum(int(m)) for m in nodes], axis=-1)  # (n_off, nf, nodes)
        i_lo = np.searchsorted(nodes, lo)
        i_hi = np.searchsorted(nodes, lo + 1)
        mixed = _accel.mix_spectra(G, specs, i_lo, i_hi, lam)
        return np.fft.irfft(mixed, n=n, axis=1) * h


def local_dti_inverse(g: np.ndarray, bank: KernelBank, density: np.ndarray, delta: np.ndarray,
                      big_l: float) -> np.ndarray:
    """Local averaged inverse DTI at ``(offset, heading, cell)``.

    ``g``: total heading density per cell, ``(n_theta, cells)``; ``density``:
    its integral. Vacuum cells give ``1/L``.
    """
    avg = bank.average(g, delta)
    live = density > 0
    out = np.maximum(avg / np.where(live, density, 1.0), 1.0 / big_l)
    return np.where(live, out, 1.0 / big_l)


def nonlocal_dti_inverse(g: np.ndarray, grid: Grid, kappa: float, cut: CutoffParams,
                         delta: np.ndarray, offsets=(0.0,)) -> np.ndarray:
    """Non-local averaged inverse DTI by midpoint quadrature over cone cells.

    ``g`` has shape ``(n_theta, nx, ny)``, ``delta`` shape ``(nx, ny)``.
    Cells whose centre falls in the cone ``S(x, u)`` count wholly; the
    cell itself is excluded. Returns ``(n_offsets, n_theta, nx, ny)``.
    """
    h = grid.h_theta
    heads = grid.headings
    n_off = len(offsets)
    w = unit(grid.theta[None, :] + np.asarray(offsets)[:, None])  # (n_off, n_u, 2)
    rel = heads[None, None, :, :] - w[:, :, None, :]  # (n_off, n_u, n_v, 2)
    mass = g.sum(axis=0) * h
    num = np.zeros((n_off, grid.n_theta) + g.shape[1:])
    den = np.zeros((grid.n_theta,) + g.shape[1:])
    flat = g.reshape(grid.n_theta, -1)
    for i, j in grid.offsets(float(np.max(delta))):
        xi = np.array([i * grid.dx, j * grid.dy])
        dist = math.hypot(*xi)
        cone = (heads @ xi >= kappa * dist).astype(float)  # (n_u,)
        if not cone.any():
            continue
        near = (dist <= delta).astype(float)  # (nx, ny)
        E = elementary_dti_inverse(xi, rel, cut) * (h * cone[:, None])  # (n_off, n_u, n_v)
        shifted = np.roll(flat.reshape(g.shape), shift=(-i, -j), axis=(1, 2)).reshape(grid.n_theta, -1)
        contrib = (E.reshape(-1, grid.n_theta) @ shifted).reshape(num.shape)
        num += near * contrib
        den += near * np.roll(mass, shift=(-i, -j), axis=(0, 1)) * cone[:, None, None]
    live = den > 0
    ratio = num / np.where(live, den, 1.0)
    return np.where(live, np.maximum(ratio, 1.0 / cut.big_l), 1.0 / cut.big_l)


def potential(dti_inv, aw, k: float, big_l: float):
    """``Phi = (k/2) |D w - L a|^2`` with ``D = 1/dti_inv`` and ``aw = a . w``."""
    D = 1.0 / np.asarray(dti_inv)
    return 0.5 * k * (D * D - 2.0 * big_l * D * np.asarray(aw) + big_l * big_l)
