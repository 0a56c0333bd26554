"""Periodic phase-space grid shared by the kinetic and fluid solvers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import unit
from .specialmath import theta_grid


@dataclass(frozen=True)
class Grid:
    """Uniform periodic cells on ``[0, lx) x [0, ly)`` and ``n_theta`` headings.

    Fields are stored with axes ``(target bin, x, y[, theta])``.
    """

    nx: int
    ny: int
    lx: float
    ly: float
    n_theta: int = 128

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.n_theta < 4:
            raise ValueError("grid needs nx, ny >= 1 and n_theta >= 4")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def h_theta(self) -> float:
        return 2.0 * math.pi / self.n_theta

    @property
    def theta(self) -> np.ndarray:
        return theta_grid(self.n_theta)

    @property
    def headings(self) -> np.ndarray:
        return unit(self.theta)

    @property
    def diameter(self) -> float:
        """Diagonal of the domain; the vacuum clamp for the interaction radius."""
        return math.hypot(self.lx, self.ly)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    def offsets(self, radius: float):
        """Minimal-image cell offsets ``(i, j)`` with centre distance <= ``radius``, origin excluded."""
        ii = np.arange(-((self.nx - 1) // 2), self.nx // 2 + 1)
        jj = np.arange(-((self.ny - 1) // 2), self.ny // 2 + 1)
        out = []
        for i in ii:
            for j in jj:
                if i == 0 and j == 0:
                    continue
                if math.hypot(i * self.dx, j * self.dy) <= radius:
                    out.append((int(i), int(j)))
        return out
