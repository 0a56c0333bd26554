"""Modified Bessel functions, von Mises-Fisher machinery and local equilibria.

The Bessel functions of orders 0, 1, 2 are evaluated with exponentially
scaled internals: an ascending power series below ``SERIES_MAX`` and the
Hankel asymptotic expansion above it. Every ratio used by the fluid models
is formed from scaled values, so nothing overflows for large concentration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import unit

SERIES_MAX = 20.0
OVERFLOW_X = 700.0
_SERIES_TERMS = 120
_ASYMPTOTIC_TERMS = 60


def _series_scaled(x: np.ndarray) -> np.ndarray:
    # orders 0, 1, 2 in lockstep; all terms positive, so no cancellation
    half = 0.5 * x
    q = half * half
    terms = [np.ones_like(x), half.copy(), 0.5 * q]
    totals = [t.copy() for t in terms]
    for m in range(1, _SERIES_TERMS):
        for k in range(3):
            terms[k] = terms[k] * q / (m * (m + k))
            totals[k] += terms[k]
        if np.all(terms[0] <= 1e-17 * totals[0]):
            break
    return np.stack(totals) * np.exp(-x)


def _asymptotic_scaled(x: np.ndarray) -> np.ndarray:
    out = []
    for k in range(3):
        mu = 4.0 * k * k
        term = np.ones_like(x)
        total = np.ones_like(x)
        prev = np.full_like(x, np.inf)
        live = np.ones(x.shape, dtype=bool)
        for m in range(1, _ASYMPTOTIC_TERMS):
            term = -term * (mu - (2 * m - 1) ** 2) / (m * 8.0 * x)
            # divergent series: stop each entry at its smallest term
            live &= np.abs(term) < prev
            total = np.where(live, total + term, total)
            prev = np.where(live, np.abs(term), prev)
            if not live.any() or np.all(np.abs(term) <= 1e-17 * np.abs(total)):
                break
        out.append(total / np.sqrt(2.0 * np.pi * x))
    return np.stack(out)


def bessel_ie_all(x) -> np.ndarray:
    """Scaled ``exp(-x) I_k(x)`` for k = 0, 1, 2, stacked on a new first axis."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or np.any(~np.isfinite(xa)):
        raise ValueError("argument must be finite and non-negative")
    flat = np.atleast_1d(xa).ravel()
    out = np.empty((3, flat.size))
    small = flat <= SERIES_MAX
    if small.any():
        out[:, small] = _series_scaled(flat[small])
    if (~small).any():
        out[:, ~small] = _asymptotic_scaled(flat[~small])
    return out.reshape((3,) + np.shape(xa))


def bessel_ie(k: int, x):
    """Exponentially scaled modified Bessel function ``exp(-x) I_k(x)``.

    Parameters
    ----------
    k : {0, 1, 2}
        Order.
    x : float or array_like
        Non-negative argument.
    """
    if k not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {k}")
    out = bessel_ie_all(x)[k]
    return float(out) if out.ndim == 0 else out


def bessel_i(k: int, x):
    """Modified Bessel function of the first kind ``I_k(x)``, k in {0,1,2}.

    Raises
    ------
    OverflowError
        When ``x`` exceeds 700; use :func:`bessel_ie` for ratios instead.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa > OVERFLOW_X):
        raise OverflowError(f"I_{k}(x) overflows for x > {OVERFLOW_X}; use bessel_ie")
    out = np.asarray(bessel_ie(k, xa)) * np.exp(xa)
    return float(out) if out.ndim == 0 else out


def order_parameter(beta):
    """Mean resultant length ``I_1(beta)/I_0(beta)`` of a VMF law, in [0, 1)."""
    ie = bessel_ie_all(beta)
    out = ie[1] / ie[0]
    return float(out) if out.ndim == 0 else out


def bessel_ratio2(beta):
    """``I_2(beta)/I_0(beta)``, in [0, 1)."""
    ie = bessel_ie_all(beta)
    out = ie[2] / ie[0]
    return float(out) if out.ndim == 0 else out


def _beta_guess(u: np.ndarray) -> np.ndarray:
    # classical piecewise approximation of the inverse mean resultant length
    return np.where(
        u < 0.53,
        2 * u + u**3 + 5 * u**5 / 6,
        np.where(u < 0.85, -0.4 + 1.39 * u + 0.43 / (1 - u),
                 1.0 / (u**3 - 4 * u**2 + 3 * u)),
    )


def beta_of_speed(u_norm):
    """Invert :func:`order_parameter`: the concentration with mean length ``u_norm``.

    Newton iterations on ``A(beta) = I_1/I_0`` (``A' = 1 - A/beta - A^2``)
    from a piecewise rational first guess, safeguarded by a bracket: a step
    leaving the bracket falls back to bisection, or to doubling while the
    bracket is still open above. Iterates to near machine precision.
    Accepts arrays.
    """
    u = np.asarray(u_norm, dtype=float)
    if np.any(u < 0) or np.any(u >= 1) or np.any(~np.isfinite(u)):
        raise ValueError("order parameter must be in [0, 1)")
    flat = np.atleast_1d(u).ravel()
    lo = np.zeros_like(flat)
    hi = np.full_like(flat, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(flat > 0, _beta_guess(flat), 0.0)
    live = flat > 0
    for _ in range(100):
        ie = bessel_ie_all(beta[live])
        A = ie[1] / ie[0]
        b = beta[live]
        resid = A - flat[live]
        lo_l = np.where(resid < 0, b, lo[live])
        hi_l = np.where(resid >= 0, b, hi[live])
        slope = 1.0 - A / b - A * A
        step = resid / slope
        new = b - step
        bad = ~((new > lo_l) & (new < hi_l))
        fallback = np.where(np.isfinite(hi_l), 0.5 * (lo_l + hi_l), 2.0 * b)
        new = np.where(bad, fallback, new)
        done = (np.abs(step) <= 1e-15 * b) | (np.abs(resid) <= 2 * np.finfo(float).eps)
        new = np.where(done, b, new)
        lo[live], hi[live] = lo_l, hi_l
        beta[live] = new
        idx = np.flatnonzero(live)
        live[idx[done]] = False
        if not live.any():
            break
    beta = np.where(flat > 0, beta, 0.0)
    out = beta.reshape(u.shape)
    return float(out) if out.ndim == 0 else out


def gamma_coefficients(u_norm):
    """Closure coefficients ``(gamma_par, gamma_perp)`` of the VMF flux tensor.

    ``gamma_par + gamma_perp == 1/u_norm**2``; both are positive.
    """
    u = np.asarray(u_norm, dtype=float)
    if np.any(u <= 0):
        raise ValueError("gamma coefficients are undefined at |U| = 0")
    r2 = np.asarray(bessel_ratio2(beta_of_speed(u)))
    g_par = (1.0 + r2) / (2.0 * u * u)
    g_perp = (1.0 - r2) / (2.0 * u * u)
    if g_par.ndim == 0:
        return float(g_par), float(g_perp)
    return g_par, g_perp


@dataclass(frozen=True)
class VmfParams:
    beta: float
    omega: tuple[float, float]

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        n = math.hypot(*self.omega)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"omega must be a unit vector (|omega| = {n})")


def vmf_density(u, p: VmfParams):
    """VMF density ``exp(beta u.omega) / (2 pi I_0(beta))`` on the circle."""
    u = np.asarray(u, dtype=float)
    dot = u[..., 0] * p.omega[0] + u[..., 1] * p.omega[1]
    # scaled form: exp(beta (cos - 1)) / (2 pi ie0(beta))
    out = np.exp(p.beta * (dot - 1.0)) / (2.0 * np.pi * bessel_ie(0, p.beta))
    return float(out) if np.ndim(out) == 0 else out


def theta_grid(n: int) -> np.ndarray:
    """Uniform angles ``2 pi j / n``; the rectangle rule on it has weight ``2 pi / n``."""
    return 2.0 * np.pi * np.arange(n) / n


def vmf_on_grid(theta: np.ndarray, U) -> np.ndarray:
    """VMF densities with mean velocity ``U`` (|U| < 1) sampled at ``theta``.

    ``U`` has shape ``(..., 2)``; the result has shape ``(..., len(theta))``
    and is normalised by the rectangle rule on the grid. ``U = 0`` gives the
    uniform density.
    """
    U = np.asarray(U, dtype=float)
    norm = np.hypot(U[..., 0], U[..., 1])
    beta = np.asarray(beta_of_speed(np.minimum(norm, 1.0 - 1e-15)))
    safe = np.where(norm > 0, norm, 1.0)
    cos = (np.cos(theta) * (U[..., 0] / safe)[..., None]
           + np.sin(theta) * (U[..., 1] / safe)[..., None])
    w = np.exp(beta[..., None] * (cos - 1.0))
    w = np.where((norm > 0)[..., None], w, 1.0)
    return w / (w.sum(axis=-1, keepdims=True) * (2.0 * np.pi / len(theta)))


@dataclass(frozen=True)
class LteProfile:
    """Local equilibrium ``M_D(u, a)`` for each target direction.

    Attributes
    ----------
    angle_grid : ndarray, shape (n_theta,)
    values : ndarray, shape (n_a, n_theta)
        Densities per radian; each row integrates to one.
    potential : ndarray, shape (n_a, n_theta)
        ``Phi_D(u, a) / d``.
    """

    angle_grid: np.ndarray
    values: np.ndarray
    potential: np.ndarray

    def mean_velocity(self) -> np.ndarray:
        h = 2.0 * np.pi / len(self.angle_grid)
        return self.values @ unit(self.angle_grid) * h


def lte_from_dti(d_profile, a, k: float, big_l: float, d_noise: float) -> LteProfile:
    """Local equilibrium built from a DTI profile ``D(u)`` on the uniform grid.

    ``a`` is one unit target vector or an array of them, shape ``(n_a, 2)``.
    """
    D = np.asarray(d_profile, dtype=float)
    if not np.all(np.isfinite(D)):
        raise ValueError("DTI profile contains non-finite samples")
    if not d_noise > 0:
        raise ValueError("the local equilibrium needs d > 0")
    n = D.shape[-1]
    theta = theta_grid(n)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    uvec = unit(theta)
    # |D u - L a|^2 = D^2 - 2 D L (u.a) + L^2
    ua = a @ uvec.T
    phi = 0.5 * k * (D * D - 2.0 * big_l * D * ua + big_l**2) / d_noise
    w = np.exp(-(phi - phi.min(axis=-1, keepdims=True)))
    values = w / (w.sum(axis=-1, keepdims=True) * (2.0 * np.pi / n))
    return LteProfile(theta, values, phi)
