"""Bin IBM trajectories into density and mean-velocity fields.

Walkers are assigned to the cell containing them and to the group whose
target is nearest their own. Per cell and group

    rho = count / (cell_area * walkers_per_mass * runs [* times]),
    U   = mean of the unit headings,

with ``U`` NaN in cells no walker visited. Rows are sorted before binning so
the result does not depend on the order in which files are given.
"""
from __future__ import annotations

import numpy as np

from .io import SNAPSHOT_COLUMNS, CsvSink, read_csv, snapshot_columns


def _nearest(angles: np.ndarray, targets: np.ndarray) -> np.ndarray:
    gap = np.abs(np.angle(np.exp(1j * (angles[:, None] - targets[None, :]))))
    return np.argmin(gap, axis=1)


def bin_walkers(grid, targets, x, y, theta, a_angle, weight: float):
    """``rho (n_a, nx, ny)`` and ``U (n_a, nx, ny, 2)`` for one set of walkers."""
    targets = np.asarray(targets, dtype=float)
    na, shape = targets.size, (targets.size, grid.nx, grid.ny)
    ix = np.floor(np.mod(x, grid.lx) / grid.dx).astype(int) % grid.nx
    iy = np.floor(np.mod(y, grid.ly) / grid.dy).astype(int) % grid.ny
    b = _nearest(a_angle, targets) if x.size else np.zeros(0, dtype=int)
    flat = np.ravel_multi_index((b, ix, iy), shape) if x.size else np.zeros(0, dtype=int)
    size = na * grid.nx * grid.ny
    count = np.bincount(flat, minlength=size).astype(float)
    cx = np.bincount(flat, weights=np.cos(theta), minlength=size)
    cy = np.bincount(flat, weights=np.sin(theta), minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        U = np.stack([cx / count, cy / count], axis=-1)
    return (count * weight).reshape(shape), U.reshape(shape + (2,))


def ibm_ensemble_moments(files, grid, targets, walkers_per_mass: float = 1.0,
                         t_min: float = -np.inf, t_max: float = np.inf, pool: bool = False):
    """Ensemble moments from trajectory CSVs of independent runs.

    Returns a list of ``(t, rho, U)``: one entry per recorded time in
    ``[t_min, t_max]``, or a single time-averaged entry (at the mean time) when
    ``pool`` is set.
    """
    files = list(files)
    if not files:
        raise ValueError("no trajectory files given")
    cols = [read_csv(f) for f in files]
    data = {k: np.concatenate([c[k] for c in cols]) for k in ("t", "id", "x", "y", "theta", "a_angle")}
    # a canonical row order independent of file order: by time, then walker, then position
    order = np.lexsort((data["theta"], data["y"], data["x"], data["id"], data["t"]))
    data = {k: v[order] for k, v in data.items()}
    keep = (data["t"] >= t_min) & (data["t"] <= t_max)
    data = {k: v[keep] for k, v in data.items()}
    times = np.unique(data["t"])
    if times.size == 0:
        return []
    base = 1.0 / (grid.cell_area * walkers_per_mass * len(files))
    if pool:
        rho, U = bin_walkers(grid, targets, data["x"], data["y"], data["theta"], data["a_angle"],
                             base / times.size)
        return [(float(times.mean()), rho, U)]
    out = []
    for t in times:
        sel = data["t"] == t
        rho, U = bin_walkers(grid, targets, data["x"][sel], data["y"][sel], data["theta"][sel],
                             data["a_angle"][sel], base)
        out.append((float(t), rho, U))
    return out


def write_moments(path, grid, frames):
    with CsvSink(path, SNAPSHOT_COLUMNS) as sink:
        for t, rho, U in frames:
            sink.rows(snapshot_columns(t, grid, rho, U))
