"""Local-interaction kernels: cone averages of the elementary inverse DTI.

``Delta^{-1}_{kappa,delta}(mu, s)`` is the mean of the elementary inverse DTI
over the vision cone of radius ``delta`` and half-angle ``arccos(kappa)``,
for a relative velocity of norm ``s`` making cosine ``mu`` with the heading.

The cone kernel is evaluated in closed form. In polar coordinates about the
relative velocity the radial integral is elementary, and so is the angular
integral between consecutive kinks of the integrand and cone edges. The
isotropic kernel has its own strip formulation, integrated by
Gauss-Legendre, so the two can check each other.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .params import CutoffParams
from .specialmath import beta_of_speed, bessel_ie

MAGIC = b"KTAB1"
_HEADER = struct.Struct("<5d2Q")
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_CHUNK = 4096


def _gauss_pieces(breaks: np.ndarray):
    """Nodes and weights of Gauss-Legendre on consecutive sorted breakpoints.

    ``breaks`` has shape (m, p); returns nodes/weights of shape (m, p-1, q)
    and the interval midpoints, shape (m, p-1).
    """
    a, b = breaks[:, :-1], breaks[:, 1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    nodes = mid[..., None] + half[..., None] * _GL_NODES
    weights = half[..., None] * _GL_WEIGHTS
    return nodes, weights, mid


def _piece_antiderivative(t, s, delta, cut: CutoffParams, case):
    # angular antiderivatives of the closed-form radial integral, t = |phi - pi|
    # 0: capped, rmax = delta        1: capped, rmax = R/sin t
    # 2: uncapped, rmax = delta      3: uncapped, rmax = R/sin t
    ell, R = cut.ell, cut.R
    with np.errstate(divide="ignore", invalid="ignore"):
        tan = np.tan(t)
        out = np.select(
            [case == 0, case == 1, case == 2],
            [delta**2 / (2 * ell) * t,
             -(R**2) / (2 * ell) / tan,
             s * delta * np.log(1.0 / np.cos(t) + tan) - 0.5 * s * s * ell * tan],
            s * R * np.log(tan) - 0.5 * s * s * ell * tan,
        )
    return out


def _piece_case(t, s, delta, cut: CutoffParams):
    c, sn = np.cos(t), np.sin(t)
    with np.errstate(divide="ignore"):
        by_radius = np.where(sn > 0, cut.R / sn, np.inf) < delta
        rmax = np.where(by_radius, cut.R / np.where(sn > 0, sn, 1.0), delta)
        capped = rmax * c <= s * cut.ell
    return np.where(capped, 0, 2) + by_radius.astype(int)


def kernel_direct(kappa: float, delta, cut: CutoffParams, mu, s) -> np.ndarray:
    """``Delta^{-1}_{kappa,delta}(mu, s)`` in closed form (1/m).

    With ``phi`` the angle of the offset from the relative velocity, the
    threat region is ``|phi - pi| < pi/2``; the radial integral is
    elementary, and so is its angular integral between consecutive kinks
    and cone edges. Broadcasts over ``delta``, ``mu`` and ``s``. Entries
    with ``s == 0`` are 0.
    """
    delta = np.asarray(delta, dtype=float)
    if not np.all(delta > 0):
        raise ValueError(f"delta must be > 0, got {delta}")
    delta, mu, s = np.broadcast_arrays(delta, np.asarray(mu, float), np.asarray(s, float))
    shape = mu.shape
    delta, mu, s = delta.ravel(), mu.ravel(), s.ravel()
    out = np.zeros(mu.size)
    alpha = math.acos(kappa)
    half = 0.5 * math.pi
    for start in range(0, mu.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        m, sv, dl = np.clip(mu[sl], -1.0, 1.0), s[sl], delta[sl]
        live = sv > 0
        if not live.any():
            continue
        m, sv, dl = m[live], sv[live], dl[live]
        a_r = np.arcsin(np.minimum(cut.R / dl, 1.0))
        area = alpha * dl**2
        # cone centre relative to phi = pi; the integrand is even in phi - pi
        centre = np.arccos(m) - math.pi
        a_cap = np.arccos(np.minimum(sv * cut.ell / dl, 1.0))
        a_tan = np.arctan(cut.R / (sv * cut.ell))
        edges = [np.mod(centre + sign * alpha + math.pi, 2 * math.pi) - math.pi for sign in (-1, 1)]
        cols = [np.full_like(sv, -half), np.full_like(sv, half), np.zeros_like(sv),
                -a_r, a_r, -a_cap, a_cap, -a_tan, a_tan, *edges]
        breaks = np.sort(np.clip(np.stack(cols, axis=1), -half, half), axis=1)
        lo, hi = breaks[:, :-1], breaks[:, 1:]
        mid = 0.5 * (lo + hi)
        dist = np.abs(np.mod(mid - centre[:, None] + math.pi, 2 * math.pi) - math.pi)
        inside = (dist <= alpha + 1e-12) & (hi > lo)
        # fold each piece onto t = |phi - pi| >= 0 (pieces never straddle 0)
        t0 = np.where(mid >= 0, lo, -hi)
        t1 = np.where(mid >= 0, hi, -lo)
        svb, dlb = sv[:, None], dl[:, None]
        case = _piece_case(np.abs(mid), svb, dlb, cut)
        F1 = _piece_antiderivative(t1, svb, dlb, cut, case)
        F0 = _piece_antiderivative(t0, svb, dlb, cut, case)
        piece = np.where(inside, F1 - F0, 0.0)
        chunk = np.zeros(live.size)
        chunk[live] = piece.sum(axis=1) / area
        out[sl] = chunk
    return np.clip(out, 0.0, 1.0 / cut.ell).reshape(shape)


def iso_kernel_direct(delta: float, cut: CutoffParams, s) -> np.ndarray:
    """``Delta^{-1}_delta(s)`` over the full disk, by a strip decomposition.

    Slices perpendicular to the relative velocity are integrated in closed
    form; the transverse coordinate is ``delta sin(psi)``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    s = np.asarray(s, dtype=float)
    shape = s.shape
    sv = s.ravel()
    out = np.zeros(sv.size)
    psi_m = math.asin(min(cut.R / delta, 1.0))
    for start in range(0, sv.size, _CHUNK):
        chunk = sv[start:start + _CHUNK]
        live = chunk > 0
        if not live.any():
            continue
        x = chunk[live]
        psi_b = np.arccos(np.minimum(x * cut.ell / delta, 1.0))
        breaks = np.stack([np.zeros_like(x), np.minimum(psi_b, psi_m), np.full_like(x, psi_m)], 1)
        nodes, weights, _ = _gauss_pieces(breaks)
        H = delta * np.cos(nodes)
        xs = x[:, None, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = np.where(H <= xs * cut.ell, H / cut.ell,
                             xs * (1.0 + np.log(H / (xs * cut.ell))))
        integrand = inner * delta * np.cos(nodes)
        vals = np.zeros(chunk.size)
        vals[live] = 2.0 * np.sum(integrand * weights, axis=(1, 2)) / (math.pi * delta**2)
        out[start:start + _CHUNK] = vals
    return np.minimum(out, 1.0 / cut.ell).reshape(shape)


def _check_resolution(resolution: int):
    if resolution < 64:
        raise ValueError(f"kernel tables need resolution >= 64, got {resolution}")


@dataclass(frozen=True)
class KernelTable:
    """``Delta^{-1}_{kappa,delta}`` on a uniform ``mu x s`` grid over ``[-1,1] x [0,2]``."""

    kappa: float
    delta: float
    cut: CutoffParams
    values: np.ndarray  # shape (n_mu, n_s)

    @property
    def mu(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.values.shape[0])

    @property
    def s(self) -> np.ndarray:
        return np.linspace(0.0, 2.0, self.values.shape[1])


@dataclass(frozen=True)
class IsoKernelTable:
    """``Delta^{-1}_delta(s)`` on a uniform grid over ``[0, 2]``."""

    delta: float
    cut: CutoffParams
    values: np.ndarray  # shape (n_s,)

    kappa = -1.0

    @property
    def s(self) -> np.ndarray:
        return np.linspace(0.0, 2.0, self.values.shape[0])


@dataclass(frozen=True)
class VmfKernelTable:
    """Isotropic VMF-averaged kernel ``E^{-1}_delta(w, U)``.

    Tabulated on the angle between ``w`` and ``U`` (uniform over ``[0, pi]``)
    and the concentration ``beta`` of ``M_U`` (``beta_grid``).
    """

    delta: float
    cut: CutoffParams
    beta_grid: np.ndarray
    values: np.ndarray  # shape (n_angle, n_beta)

    @property
    def angle(self) -> np.ndarray:
        return np.linspace(0.0, math.pi, self.values.shape[0])


def build_kernel_table(kappa: float, delta: float, cut: CutoffParams,
                       resolution: int = 256) -> KernelTable:
    """Tabulate ``Delta^{-1}_{kappa,delta}`` with ``resolution`` nodes per axis."""
    _check_resolution(resolution)
    if not -1.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [-1, 1], got {kappa}")
    mu = np.linspace(-1.0, 1.0, resolution)
    s = np.linspace(0.0, 2.0, resolution)
    vals = kernel_direct(kappa, delta, cut, mu[:, None], s[None, :])
    return KernelTable(float(kappa), float(delta), cut, vals)


def build_iso_kernel(delta: float, cut: CutoffParams, resolution: int = 256) -> IsoKernelTable:
    """Tabulate the full-disk kernel ``Delta^{-1}_delta(s)``."""
    _check_resolution(resolution)
    s = np.linspace(0.0, 2.0, resolution)
    return IsoKernelTable(float(delta), cut, iso_kernel_direct(delta, cut, s))


_VMF_T, _VMF_W = np.polynomial.legendre.leggauss(48)
_VMF_T = 0.5 * (_VMF_T + 1.0)
_VMF_W = 0.5 * _VMF_W
_PEAK_OFFSETS = np.array([-12.0, -5.0, -2.0, -0.5, 0.5, 2.0, 5.0, 12.0])


def vmf_kernel_direct(delta: float, cut: CutoffParams, angle, beta) -> np.ndarray:
    """``E^{-1}_delta`` for angle ``angle`` between ``w`` and ``U`` and concentration ``beta``.

    ``int Delta^{-1}_delta(|v - w|) M(v) dv`` with ``v`` at angle ``phi``
    from ``w``. The circle is split at ``phi = 0`` (where the kernel behaves
    like ``s log s``) and around the density peak; pieces touching
    ``phi = 0`` use the graded map ``phi = h t^2``.
    """
    angle, beta = np.broadcast_arrays(np.asarray(angle, float), np.asarray(beta, float))
    shape = angle.shape
    ang, b = angle.ravel(), beta.ravel()
    step = _CHUNK // 8
    out = np.concatenate([_vmf_chunk(delta, cut, ang[i:i + step], b[i:i + step])
                          for i in range(0, ang.size, step)] or [np.zeros(0)])
    return out.reshape(shape)


def _vmf_chunk(delta, cut, ang, b):
    width = 1.0 / np.sqrt(np.maximum(b, 1.0))
    peak = -np.mod(ang + math.pi, 2 * math.pi) + math.pi  # density peak at phi = -angle
    cols = [np.full_like(ang, -math.pi), np.zeros_like(ang), np.full_like(ang, math.pi)]
    cols += [peak + k * width for k in _PEAK_OFFSETS]
    breaks = np.sort(np.clip(np.stack(cols, axis=1), -math.pi, math.pi), axis=1)
    lo, hi = breaks[:, :-1, None], breaks[:, 1:, None]
    length = hi - lo
    t, w = _VMF_T, _VMF_W
    plain = lo + length * t
    from_zero = np.where(lo == 0.0, lo + length * t * t, np.where(hi == 0.0, hi - length * t * t, plain))
    graded = (lo == 0.0) | (hi == 0.0)
    phi = np.where(graded, from_zero, plain)
    wts = np.where(graded, 2.0 * t * length * w, length * w)
    k = iso_kernel_direct(delta, cut, 2.0 * np.abs(np.sin(0.5 * phi)))
    bb = b[:, None, None]
    norm = 2.0 * math.pi * np.asarray(bessel_ie(0, b))[:, None, None]
    dens = np.exp(bb * (np.cos(ang[:, None, None] + phi) - 1.0)) / norm
    return np.sum(k * wts * dens, axis=(1, 2))


def build_vmf_kernel(base: IsoKernelTable | KernelTable, beta_grid, n_angle: int = 129) -> VmfKernelTable:
    """Tabulate the VMF average of the isotropic kernel of ``base``.

    Only the isotropic case (``kappa = -1``) has a reduced two-argument form;
    the kernel is evaluated directly at ``base.delta`` rather than
    interpolated from ``base.values``.
    """
    if base.kappa != -1.0:
        raise ValueError("VMF kernel tables are only defined for kappa = -1")
    beta_grid = np.asarray(beta_grid, dtype=float)
    if beta_grid.ndim != 1 or beta_grid.size < 2 or np.any(np.diff(beta_grid) <= 0) or beta_grid[0] != 0:
        raise ValueError("beta_grid must be increasing and start at 0")
    angle = np.linspace(0.0, math.pi, n_angle)
    vals = vmf_kernel_direct(base.delta, base.cut, angle[:, None], beta_grid[None, :])
    vals = np.clip(vals, 0.0, 1.0 / base.cut.ell)
    return VmfKernelTable(base.delta, base.cut, beta_grid, vals)


def _interp_axis(grid: np.ndarray, x: np.ndarray):
    # index of the left node and the fractional position, uniform or not
    i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
    lam = (x - grid[i]) / (grid[i + 1] - grid[i])
    return i, np.clip(lam, 0.0, 1.0)


def eval_kernel(table, u, rel=None):
    """Interpolate a kernel table.

    * ``KernelTable``: ``eval_kernel(table, u, rel)`` with heading ``u`` and
      relative velocity ``rel = v - w``.
    * ``IsoKernelTable``: ``eval_kernel(table, s)`` with ``s = |v - w|``, or
      ``eval_kernel(table, u, rel)`` (``u`` ignored).
    * ``VmfKernelTable``: ``eval_kernel(table, w, U)``.

    Bilinear (linear for iso tables) interpolation, clamped to ``[0, 1/ell]``.
    """
    cap = 1.0 / table.cut.ell
    if isinstance(table, VmfKernelTable):
        w = np.asarray(u, dtype=float)
        U = np.asarray(rel, dtype=float)
        norm = np.hypot(U[..., 0], U[..., 1])
        safe = np.where(norm > 0, norm, 1.0)
        cosang = (w[..., 0] * U[..., 0] + w[..., 1] * U[..., 1]) / safe
        ang = np.where(norm > 0, np.arccos(np.clip(cosang, -1.0, 1.0)), 0.0)
        beta = np.asarray(beta_of_speed(np.minimum(norm, 1.0 - 1e-15)))
        if np.any(beta > table.beta_grid[-1] * (1 + 1e-12)):
            raise ValueError(f"concentration beyond the table range (max {table.beta_grid[-1]})")
        out = _bilinear(table.values, table.angle, table.beta_grid, ang, beta)
        return _finish(out, cap)
    if rel is None:
        s = np.asarray(u, dtype=float)
        mu = None
    else:
        rel = np.asarray(rel, dtype=float)
        s = np.hypot(rel[..., 0], rel[..., 1])
        if isinstance(table, KernelTable):
            uu = np.asarray(u, dtype=float)
            safe = np.where(s > 0, s, 1.0)
            mu = np.clip((uu[..., 0] * rel[..., 0] + uu[..., 1] * rel[..., 1]) / safe, -1.0, 1.0)
    if np.any(s > 2.0 + 1e-12) or np.any(s < 0):
        raise ValueError("|v - w| must lie in [0, 2]")
    s = np.minimum(s, 2.0)
    if isinstance(table, IsoKernelTable):
        out = np.interp(s, table.s, table.values)
    else:
        if mu is None:
            raise ValueError("an anisotropic table needs both u and v - w")
        out = _bilinear(table.values, table.mu, table.s, mu, s)
    return _finish(out, cap)


def _bilinear(values, g0, g1, x0, x1):
    i, a = _interp_axis(g0, np.asarray(x0, float))
    j, b = _interp_axis(g1, np.asarray(x1, float))
    return ((1 - a) * (1 - b) * values[i, j] + a * (1 - b) * values[i + 1, j]
            + (1 - a) * b * values[i, j + 1] + a * b * values[i + 1, j + 1])


def _finish(out, cap):
    out = np.clip(out, 0.0, cap)
    return float(out) if np.ndim(out) == 0 else out


def table_cache_dir() -> Path:
    """Directory for cached ``.ktab`` files (``CROWDSCALE_TABLE_DIR`` or ``~/.cache``)."""
    env = os.environ.get("CROWDSCALE_TABLE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "crowdscale" / "tables"


def _metadata(table) -> dict:
    values = table.values if isinstance(table, KernelTable) else table.values[None, :]
    return {
        "format": "KTAB1",
        "kind": "kernel" if isinstance(table, KernelTable) else "iso",
        "kappa": table.kappa,
        "delta": table.delta,
        "ell": table.cut.ell,
        "big_l": table.cut.big_l,
        "R": table.cut.R,
        "n_mu": int(values.shape[0]),
        "n_s": int(values.shape[1]),
        "mu_range": [-1.0, 1.0],
        "s_range": [0.0, 2.0],
        "layout": "row-major, mu rows by s columns, little-endian float64",
    }


def save_table(table, path) -> Path:
    """Write ``<path>`` (binary) and ``<path>.json`` (manifest). Returns the binary path."""
    path = Path(path)
    meta = _metadata(table)
    values = np.ascontiguousarray(table.values, dtype="<f8")
    blob = (MAGIC + _HEADER.pack(meta["kappa"], meta["delta"], meta["ell"], meta["big_l"],
                                 meta["R"], meta["n_mu"], meta["n_s"]) + values.tobytes())
    meta["sha256"] = hashlib.sha256(blob).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_table(path):
    """Read a ``.ktab`` file; returns a ``KernelTable`` or ``IsoKernelTable``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a KTAB1 file")
    off = len(MAGIC)
    kappa, delta, ell, big_l, R, n_mu, n_s = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    expected = off + 8 * n_mu * n_s
    if len(blob) != expected:
        raise ValueError(f"{path}: size {len(blob)} does not match header ({expected})")
    values = np.frombuffer(blob, dtype="<f8", offset=off).reshape(n_mu, n_s).astype(float)
    cut = CutoffParams(ell=ell, big_l=big_l, R=R)
    manifest = Path(str(path) + ".json")
    kind = json.loads(manifest.read_text())["kind"] if manifest.exists() else None
    if kind == "iso" or (kind is None and n_mu == 1):
        return IsoKernelTable(delta, cut, values[0])
    return KernelTable(kappa, delta, cut, values)


def table_name(kappa: float, delta: float, cut: CutoffParams, resolution: int) -> str:
    key = f"{kappa!r}|{delta!r}|{cut.ell!r}|{cut.big_l!r}|{cut.R!r}|{resolution}"
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    kind = "iso" if kappa == -1.0 else "cone"
    return f"{kind}-{digest}.ktab"


def cached_table(kappa: float, delta: float, cut: CutoffParams, resolution: int = 256,
                 directory=None):
    """Load a table from the cache directory, building and saving it when absent."""
    directory = Path(directory) if directory is not None else table_cache_dir()
    path = directory / table_name(kappa, delta, cut, resolution)
    if path.exists():
        return load_table(path)
    if kappa == -1.0:
        table = build_iso_kernel(delta, cut, resolution)
    else:
        table = build_kernel_table(kappa, delta, cut, resolution)
    save_table(table, path)
    return table
