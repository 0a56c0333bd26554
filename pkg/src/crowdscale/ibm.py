"""Individual-based models: time-discrete (cone argmin) and time-continuous (potential + noise).

Pedestrians walk at constant speed ``c``; only their headings change.
Positions live in the plane or, with ``box = (lx, ly)``, on a periodic
rectangle where pair offsets use the minimal image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import elementary_dti_inverse, unit, wrap_angle
from .params import ModelParams

R0_FACTOR = 2.0  # local density radius in units of L


class IbmStabilityError(RuntimeError):
    pass


@dataclass
class Crowd:
    """Positions ``x (N, 2)``, heading angles ``theta``, target angles ``target`` and stable ``ids``."""

    x: np.ndarray
    theta: np.ndarray
    target: np.ndarray
    ids: np.ndarray | None = None
    t: float = 0.0
    step: int = 0
    box: tuple[float, float] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 2)
        n = self.x.shape[0]
        self.theta = np.broadcast_to(np.asarray(self.theta, dtype=float), (n,)).copy()
        self.target = np.broadcast_to(np.asarray(self.target, dtype=float), (n,)).copy()
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,) or len(set(self.ids.tolist())) != n:
            raise ValueError("ids must be unique, one per pedestrian")
        if self.box is not None:
            self.box = (float(self.box[0]), float(self.box[1]))
            self.x = np.mod(self.x, self.box)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def u(self) -> np.ndarray:
        return unit(self.theta)

    @property
    def a(self) -> np.ndarray:
        return unit(self.target)

    def diameter(self) -> float:
        return math.inf if self.box is None else math.hypot(*self.box)

    def permuted(self, order) -> "Crowd":
        order = np.asarray(order)
        return replace(self, x=self.x[order], theta=self.theta[order], target=self.target[order],
                       ids=self.ids[order])


def _offsets(crowd: Crowd, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    xi = crowd.x[j] - crowd.x[i]
    if crowd.box is not None:
        box = np.asarray(crowd.box)
        xi -= box * np.round(xi / box)
    return xi


def _tree(crowd: Crowd) -> cKDTree:
    return cKDTree(crowd.x, boxsize=crowd.box)


def _pairs(crowd: Crowd, radius) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs ``(i, j)``, ``j != i``, with ``|x_j - x_i| <= radius_i``, sorted by ``i``."""
    if crowd.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (crowd.size,))
    lim = crowd.diameter()
    radius = np.minimum(radius, lim)
    tree = _tree(crowd)
    reach = float(radius.max())
    if not math.isfinite(reach):
        # no box and an unbounded radius: everyone interacts with everyone
        i, j = np.nonzero(~np.eye(crowd.size, dtype=bool))
        return i, j
    hits = tree.sparse_distance_matrix(tree, reach, output_type="ndarray")
    i, j = hits["i"].astype(int), hits["j"].astype(int)
    keep = (i != j) & (hits["v"] <= radius[i])
    i, j = i[keep], j[keep]
    order = np.lexsort((j, i))
    return i[order], j[order]


def _in_cone(xi: np.ndarray, heading: np.ndarray, kappa: float) -> np.ndarray:
    dist = np.hypot(xi[:, 0], xi[:, 1])
    return np.sum(xi * heading, axis=1) >= kappa * dist


# ------------------------------------------------------------- time-discrete


def _pair_dti(xi, rel, R, cap):
    """Per-pair DTI ``min(|xi.rel| / |rel|^2, cap)`` for a threatening encounter, else ``cap``."""
    p = np.sum(xi * rel, axis=-1)
    rel2 = np.sum(rel * rel, axis=-1)
    moving = rel2 > 0
    safe = np.where(moving, rel2, 1.0)
    cross = xi[..., 0] * rel[..., 1] - xi[..., 1] * rel[..., 0]
    md2 = cross * cross / safe
    threat = moving & (p < 0) & (md2 <= R * R)
    return np.where(threat, np.minimum(np.abs(p) / safe, cap), cap)


def dti_discrete(i: int, w, crowd: Crowd, p: ModelParams) -> float:
    """Distance to interaction of pedestrian ``i`` walking along ``w`` (the min over its cone)."""
    cap = p.c * p.decision_dt
    others = np.delete(np.arange(crowd.size), i)
    if others.size == 0:
        return cap
    xi = _offsets(crowd, np.full(others.size, i), others)
    seen = _in_cone(xi, crowd.u[i], p.kappa) & np.any(xi != 0, axis=1)
    if not seen.any():
        return cap
    rel = crowd.u[others[seen]] - np.asarray(w, dtype=float)
    return float(np.min(_pair_dti(xi[seen], rel, p.R, cap)))


def cone_offsets(p: ModelParams) -> np.ndarray:
    """Offsets from the current heading spanning the vision cone uniformly.

    The full circle is split into ``n_test`` equal steps starting at the
    current heading; a cone includes the current heading when ``n_test`` is odd.
    """
    if p.kappa <= -1.0:
        return np.sort(wrap_angle(2.0 * math.pi * np.arange(p.n_test) / p.n_test))
    half = math.acos(p.kappa)
    return np.linspace(-half, half, p.n_test)


def step_discrete(crowd: Crowd, p: ModelParams, interactions: bool = True) -> Crowd:
    """Synchronous discrete update: move ``c dt u``, then pick the best direction in the cone.

    Ties in the objective go to the direction closest to the current
    heading, then to the lowest test index.
    """
    dt = p.decision_dt
    cap = p.c * dt
    moved = replace(crowd, x=crowd.x + cap * crowd.u)
    psi = cone_offsets(p)
    n = crowd.size
    W = unit(crowd.theta[:, None] + psi[None, :])  # (N, m, 2)
    D = np.full((n, psi.size), cap)
    if interactions and n > 1:
        # a partner farther than sqrt(4 (c dt)^2 + R^2) cannot bring the DTI below c dt
        i, j = _pairs(moved, math.sqrt(4.0 * cap * cap + p.R * p.R))
        xi = _offsets(moved, i, j)
        keep = _in_cone(xi, crowd.u[i], p.kappa) & np.any(xi != 0, axis=1)
        i, j, xi = i[keep], j[keep], xi[keep]
        if i.size:
            rel = crowd.u[j][:, None, :] - W[i]
            Dij = _pair_dti(xi[:, None, :], rel, p.R, cap)
            starts = np.flatnonzero(np.r_[True, i[1:] != i[:-1]])
            D[i[starts]] = np.minimum.reduceat(Dij, starts, axis=0)
    obj = np.sum((D[..., None] * W - cap * crowd.a[:, None, :]) ** 2, axis=-1)
    best = obj.min(axis=1, keepdims=True)
    score = np.where(obj == best, np.abs(psi)[None, :], np.inf)
    pick = np.argmin(score, axis=1)
    theta = wrap_angle(crowd.theta + psi[pick])
    return replace(moved, theta=theta, t=crowd.t + dt, step=crowd.step + 1)


# ----------------------------------------------------------- time-continuous


def local_density(crowd: Crowd, p: ModelParams) -> np.ndarray:
    """Other pedestrians within ``r0 = 2 L``, per unit area."""
    r0 = R0_FACTOR * p.big_l
    if crowd.size < 2:
        return np.zeros(crowd.size)
    counts = np.asarray(_tree(crowd).query_ball_point(crowd.x, r0, return_length=True)) - 1
    return counts / (math.pi * r0 * r0)


def interaction_radii(crowd: Crowd, p: ModelParams) -> np.ndarray:
    """``delta_i = C N_loc^{-1/2}``, capped at the domain diameter.

    An isolated walker is given the density of a single partner inside
    ``r0``, the smallest the estimator resolves, so ``delta`` stays finite
    and continuous as the first partner arrives.
    """
    if p.delta is not None:
        return np.full(crowd.size, float(p.delta))
    r0 = R0_FACTOR * p.big_l
    N = np.maximum(local_density(crowd, p), 1.0 / (math.pi * r0 * r0))
    return np.minimum(p.big_c / np.sqrt(N), crowd.diameter())


def _interaction_set(crowd: Crowd, p: ModelParams):
    i, j = _pairs(crowd, interaction_radii(crowd, p))
    xi = _offsets(crowd, i, j)
    keep = _in_cone(xi, crowd.u[i], p.kappa) & np.any(xi != 0, axis=1)
    return i[keep], j[keep], xi[keep]


def _harmonic(crowd, p, pairs, W):
    """``D_i(w)`` for each row of ``W (N, m, 2)``."""
    i, j, xi = pairs
    n, m = W.shape[:2]
    floor = 1.0 / p.big_l
    if i.size == 0:
        return np.full((n, m), p.big_l)
    rel = crowd.u[j][:, None, :] - W[i]
    inv = elementary_dti_inverse(xi[:, None, :], rel, p.cut)
    total = np.zeros((n, m))
    np.add.at(total, i, inv)
    count = np.bincount(i, minlength=n)[:, None]
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return 1.0 / np.maximum(mean, floor)


def harmonic_dti(i: int, w, crowd: Crowd, p: ModelParams) -> float:
    """Bounded harmonic average of the elementary DTIs over the interaction set of ``i``."""
    pairs = _interaction_set(crowd, p)
    W = np.broadcast_to(np.asarray(w, dtype=float), (crowd.size, 1, 2))
    return float(_harmonic(crowd, p, pairs, W)[i, 0])


def potentials(crowd: Crowd, p: ModelParams, offsets=(0.0,), interactions: bool = True) -> np.ndarray:
    """``Phi_i(w) = (k/2) |D_i(w) w - L a_i|^2`` at ``w`` = heading rotated by each offset."""
    W = unit(crowd.theta[:, None] + np.asarray(offsets)[None, :])
    if interactions:
        D = _harmonic(crowd, p, _interaction_set(crowd, p), W)
    else:
        D = np.full(W.shape[:2], p.big_l)
    return 0.5 * p.k * np.sum((D[..., None] * W - p.big_l * crowd.a[:, None, :]) ** 2, axis=-1)


def heading_force(crowd: Crowd, p: ModelParams, interactions: bool = True) -> np.ndarray:
    """``F_theta = -d Phi_i / d theta`` at the current heading, by a centred difference."""
    eps = p.fd_step
    phi = potentials(crowd, p, (-eps, eps), interactions)
    return -(phi[:, 1] - phi[:, 0]) / (2.0 * eps)


def step_noise(seed: int, step: int, ids: np.ndarray) -> np.ndarray:
    """Standard normals for one step, drawn by pedestrian id so that order does not matter."""
    if ids.size == 0:
        return np.zeros(0)
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, step], dtype=np.uint64)))
    return gen.standard_normal(int(ids.max()) + 1)[ids]


def step_continuous(crowd: Crowd, p: ModelParams, seed: int = 0, dt: float | None = None,
                    interactions: bool = True, noise: np.ndarray | None = None) -> Crowd:
    """Euler-Maruyama step of the heading SDE, then ``x <- x + c u dt``.

    On the circle the projected noise ``sqrt(2d) P_u^perp o dB`` becomes the
    additive angle noise ``sqrt(2d) dB_theta``; additive noise has no
    Stratonovich correction, so this scheme samples the Stratonovich
    dynamics. ``noise`` overrides the id-indexed draws of ``seed``.
    """
    dt = p.dt if dt is None else dt
    F = heading_force(crowd, p, interactions)
    if crowd.size and np.max(np.abs(F)) * dt >= math.pi / 4:
        worst = int(np.argmax(np.abs(F)))
        raise IbmStabilityError(f"|F_theta| dt = {abs(F[worst]) * dt:.3g} >= pi/4 for pedestrian "
                                f"{int(crowd.ids[worst])} at t={crowd.t:.6g}; reduce dt")
    xi = step_noise(seed, crowd.step, crowd.ids) if noise is None else np.asarray(noise, dtype=float)
    theta = wrap_angle(crowd.theta + F * dt + math.sqrt(2.0 * p.d * dt) * xi)
    out = replace(crowd, x=crowd.x + p.c * dt * crowd.u, theta=theta, t=crowd.t + dt, step=crowd.step + 1)
    return out
