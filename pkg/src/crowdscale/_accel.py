"""Compiled inner loops for the kinetic solver.

Single-threaded on purpose: results do not depend on the thread count.
The numpy versions in ``kinetic`` are the reference implementations.
"""
from __future__ import annotations

import math

import numba
import numpy as np


# z / (exp(z) - 1) = sum B_n z^n / n!; through z^14 the truncation is < 1e-15 for |z| < 0.5
_B2, _B4, _B6, _B8 = 1.0 / 12.0, -1.0 / 720.0, 1.0 / 30240.0, -1.0 / 1209600.0
_B10, _B12, _B14 = 1.0 / 47900160.0, -691.0 / 1307674368000.0, 1.0 / 74724249600.0


@numba.njit(cache=True, error_model="numpy")
def _bernoulli(z):
    if abs(z) < 0.5:
        q = z * z
        even = 1.0 + q * (_B2 + q * (_B4 + q * (_B6 + q * (_B8 + q * (_B10 + q * (_B12 + q * _B14))))))
        return even - 0.5 * z
    return z / math.expm1(z)


_BLOCK = 256


@numba.njit(cache=True, error_model="numpy")
def _coefficients(face, i, j0, j1, d, lam, h, in_left, out_right):
    # weights of f_{i+1} (in_left) and f_i (out_right) in the flux J_{i+1/2}, times dt/h
    if d > 0.0:
        scale = lam * d / h
        for j in range(j0, j1):
            z = face[i, j] * (h / d)
            b = _bernoulli(z) * scale
            in_left[j - j0] = b
            out_right[j - j0] = b + z * scale
    else:
        for j in range(j0, j1):
            F = face[i, j]
            out_right[j - j0] = max(F, 0.0) * lam
            in_left[j - j0] = max(-F, 0.0) * lam


@numba.njit(cache=True, error_model="numpy")
def theta_step_rows(f, face, d, dt, h):
    """Scharfetter-Gummel implicit step; ``f`` and ``face`` are ``(n_theta, cols)``.

    Cyclic Thomas elimination with a Sherman-Morrison corner correction,
    processed in column blocks that stay in cache.
    """
    n, m = f.shape
    lam = dt / h
    out = np.empty((n, m))
    cp = np.empty((n, _BLOCK))
    r = np.empty((n, _BLOCK))
    u = np.empty((n, _BLOCK))
    il_last = np.empty(_BLOCK)
    or_last = np.empty(_BLOCK)
    il_prev = np.empty(_BLOCK)
    or_prev = np.empty(_BLOCK)
    il_cur = np.empty(_BLOCK)
    or_cur = np.empty(_BLOCK)
    gamma = np.empty(_BLOCK)
    for j0 in range(0, m, _BLOCK):
        j1 = min(j0 + _BLOCK, m)
        w = j1 - j0
        _coefficients(face, n - 1, j0, j1, d, lam, h, il_last, or_last)
        _coefficients(face, 0, j0, j1, d, lam, h, il_cur, or_cur)
        for j in range(w):
            b0 = 1.0 + or_cur[j] + il_last[j]
            gamma[j] = -b0
            inv = 1.0 / (b0 - gamma[j])
            cp[0, j] = -il_cur[j] * inv
            r[0, j] = f[0, j0 + j] * inv
            u[0, j] = gamma[j] * inv
        for i in range(1, n):
            il_prev, il_cur = il_cur, il_prev
            or_prev, or_cur = or_cur, or_prev
            _coefficients(face, i, j0, j1, d, lam, h, il_cur, or_cur)
            for j in range(w):
                a = -or_prev[j]
                b = 1.0 + or_cur[j] + il_prev[j]
                rhs_u = 0.0
                if i == n - 1:
                    # corners: lower[0] = -out_right[n-1], upper[n-1] = -in_left[n-1]
                    b -= or_last[j] * il_last[j] / gamma[j]
                    rhs_u = -il_last[j]
                inv = 1.0 / (b - a * cp[i - 1, j])
                cp[i, j] = -il_cur[j] * inv
                r[i, j] = (f[i, j0 + j] - a * r[i - 1, j]) * inv
                u[i, j] = (rhs_u - a * u[i - 1, j]) * inv
        for i in range(n - 2, -1, -1):
            for j in range(w):
                r[i, j] -= cp[i, j] * r[i + 1, j]
                u[i, j] -= cp[i, j] * u[i + 1, j]
        for j in range(w):
            ratio = -or_last[j] / gamma[j]
            fact = (r[0, j] + ratio * r[n - 1, j]) / (1.0 + u[0, j] + ratio * u[n - 1, j])
            for i in range(n):
                out[i, j0 + j] = r[i, j] - fact * u[i, j]
    return out


@numba.njit(cache=True, error_model="numpy")
def transport_x(f, pos, neg):
    """Upwind step along axis 2 of ``f[theta, a, x, y]``; ``pos``/``neg`` are signed Courant numbers."""
    nt, na, nx, ny = f.shape
    out = np.empty_like(f)
    for t in range(nt):
        p = pos[t]
        q = neg[t]
        for a in range(na):
            for i in range(nx):
                im = i - 1 if i > 0 else nx - 1
                ip = i + 1 if i < nx - 1 else 0
                for j in range(ny):
                    c = f[t, a, i, j]
                    out[t, a, i, j] = c - p * (c - f[t, a, im, j]) - q * (f[t, a, ip, j] - c)
    return out


@numba.njit(cache=True, error_model="numpy")
def transport_y(f, pos, neg):
    """Upwind step along axis 3 of ``f[theta, a, x, y]``."""
    nt, na, nx, ny = f.shape
    out = np.empty_like(f)
    for t in range(nt):
        p = pos[t]
        q = neg[t]
        for a in range(na):
            for i in range(nx):
                for j in range(ny):
                    jm = j - 1 if j > 0 else ny - 1
                    jp = j + 1 if j < ny - 1 else 0
                    c = f[t, a, i, j]
                    out[t, a, i, j] = c - p * (c - f[t, a, i, jm]) - q * (f[t, a, i, jp] - c)
    return out


@numba.njit(cache=True, error_model="numpy")
def face_drift_potential(avg, scale, cosines, k, big_l, h):
    """Face drift ``-(Phi[i+1] - Phi[i]) / h``.

    The inverse DTI is ``max(avg * scale, 1/L)`` with ``avg`` of shape
    ``(n_theta, cells)`` and per-cell ``scale``; ``cosines`` is
    ``(n_theta, n_a)``. Returns ``(n_theta, n_a, cells)``.
    """
    n, m = avg.shape
    floor = 1.0 / big_l
    na = cosines.shape[1]
    phi = np.empty((n, na, m))
    for i in range(n):
        for a in range(na):
            ca = cosines[i, a]
            for j in range(m):
                D = 1.0 / max(avg[i, j] * scale[j], floor)
                phi[i, a, j] = 0.5 * k * (D * D - 2.0 * big_l * D * ca + big_l * big_l)
    out = np.empty((n, na, m))
    for i in range(n):
        ip = i + 1 if i < n - 1 else 0
        for a in range(na):
            for j in range(m):
                out[i, a, j] = -(phi[ip, a, j] - phi[i, a, j]) / h
    return out


@numba.njit(cache=True, error_model="numpy")
def face_drift_probe(avg_lo, avg_hi, scale, cos_lo, cos_hi, k, big_l, step):
    """Face drift from centred probes ``F = -(Phi_hi - Phi_lo) / step`` averaged onto faces."""
    n, m = avg_lo.shape
    floor = 1.0 / big_l
    na = cos_lo.shape[1]
    F = np.empty((n, na, m))
    for i in range(n):
        for a in range(na):
            cl = cos_lo[i, a]
            ch = cos_hi[i, a]
            for j in range(m):
                Dl = 1.0 / max(avg_lo[i, j] * scale[j], floor)
                Dh = 1.0 / max(avg_hi[i, j] * scale[j], floor)
                phl = Dl * Dl - 2.0 * big_l * Dl * cl
                phh = Dh * Dh - 2.0 * big_l * Dh * ch
                F[i, a, j] = -0.5 * k * (phh - phl) / step
    out = np.empty((n, na, m))
    for i in range(n):
        ip = i + 1 if i < n - 1 else 0
        for a in range(na):
            for j in range(m):
                out[i, a, j] = 0.5 * (F[i, a, j] + F[ip, a, j])
    return out


@numba.njit(cache=True, error_model="numpy")
def mix_spectra(G, specs, i_lo, i_hi, lam):
    """``G[f, c] * ((1 - lam_c) specs[o, f, i_lo_c] + lam_c specs[o, f, i_hi_c])``."""
    n_off, nf, _ = specs.shape
    m = G.shape[1]
    out = np.empty((n_off, nf, m), dtype=np.complex128)
    for o in range(n_off):
        for f in range(nf):
            for c in range(m):
                w = lam[c]
                s = specs[o, f, i_lo[c]] * (1.0 - w) + specs[o, f, i_hi[c]] * w
                out[o, f, c] = G[f, c] * s
    return out
