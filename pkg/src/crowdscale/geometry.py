"""Binary-encounter geometry: time, distance and minimal distance to interaction.

All functions broadcast over leading array dimensions; the last axis holds the
two Cartesian components.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .params import CutoffParams


class EncounterResult(NamedTuple):
    tti: np.ndarray | float
    dti: np.ndarray | float
    md: np.ndarray | float


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def binary_encounter(x_i, v_i, x_j, v_j, R: float) -> EncounterResult:
    """Time-to-interaction, distance-to-interaction and minimal distance.

    Both walkers are assumed to keep their current velocities. ``tti`` and
    ``dti`` are finite only when the walkers approach each other and their
    closest approach is within ``R``; ``md`` is always the closed-form minimal
    distance (the current separation when the relative velocity vanishes).

    Examples
    --------
    >>> r = binary_encounter((0, 0), (1, 0), (4, 0.3), (-1, 0), R=0.5)
    >>> float(r.tti), float(r.dti), round(float(r.md), 12)
    (2.0, 2.0, 0.3)
    """
    if not R > 0:
        raise ValueError(f"R must be > 0, got {R}")
    x_i, v_i, x_j, v_j = (np.asarray(a, dtype=float) for a in (x_i, v_i, x_j, v_j))
    xi = x_j - x_i
    rel = v_j - v_i
    p = _dot(xi, rel)
    rel2 = _dot(rel, rel)
    sep2 = _dot(xi, xi)
    moving = rel2 > 0
    safe_rel2 = np.where(moving, rel2, 1.0)
    # |xi x rel|^2 / |rel|^2 avoids the cancellation in sep2 - p^2 / rel2
    cross = _cross(xi, rel)
    md = np.sqrt(np.where(moving, cross * cross / safe_rel2, sep2))
    threat = moving & (p < 0) & (md <= R)
    tti_finite = np.abs(p) / safe_rel2
    tti = np.where(threat, tti_finite, np.inf)
    dti = np.where(threat, tti_finite * np.sqrt(_dot(v_i, v_i)), np.inf)
    if np.ndim(md) == 0:
        return EncounterResult(float(tti), float(dti), float(md))
    return EncounterResult(tti, dti, md)


def elementary_dti_inverse(xi, rel, cut: CutoffParams):
    """Inverse elementary DTI of a walker facing a partner at offset ``xi``.

    ``rel`` is the partner velocity minus the test velocity (unit speed
    scale). Returns ``min(|rel|^2 / |xi.rel|, 1/ell)`` for a threatening
    encounter and 0 otherwise, 0 standing for an infinite DTI.
    """
    xi = np.asarray(xi, dtype=float)
    rel = np.asarray(rel, dtype=float)
    p = _dot(xi, rel)
    rel2 = _dot(rel, rel)
    moving = rel2 > 0
    safe_rel2 = np.where(moving, rel2, 1.0)
    cross = _cross(xi, rel)
    md2 = cross * cross / safe_rel2
    threat = moving & (p < 0) & (md2 <= cut.R**2)
    abs_p = np.where(threat, np.abs(p), 1.0)
    out = np.where(threat, np.minimum(rel2 / abs_p, 1.0 / cut.ell), 0.0)
    return float(out) if out.ndim == 0 else out


def in_vision_cone(center, heading, other, kappa: float, delta: float):
    """True when ``other`` lies within distance ``delta`` of ``center`` and
    inside the cone of half-angle ``arccos(kappa)`` about ``heading``.

    The centre point itself is never in its own cone.
    """
    off = np.asarray(other, dtype=float) - np.asarray(center, dtype=float)
    dist = np.sqrt(_dot(off, off))
    heading = np.asarray(heading, dtype=float)
    cosang = _dot(off, heading)
    inside = (dist > 0) & (dist <= delta) & (cosang >= kappa * dist)
    return bool(inside) if np.ndim(inside) == 0 else inside


def unit(theta):
    """Unit vectors ``(cos theta, sin theta)`` stacked on the last axis."""
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def perp(v):
    """Rotate 2-vectors by +90 degrees."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def wrap_angle(theta):
    """Map angles to ``[-pi, pi)``."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi
