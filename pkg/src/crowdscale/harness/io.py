"""CSV readers and writers for snapshots, diagnostics and trajectories.

Floats are written with ``%.17g`` so files round-trip exactly and
identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

SNAPSHOT_COLUMNS = ["t", "x", "y", "a_bin", "rho", "Ux", "Uy"]
TRAJECTORY_COLUMNS = ["t", "id", "x", "y", "theta", "a_angle"]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class CsvSink:
    """Append-only CSV writer with a fixed header."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(self.columns) + "\n")

    def rows(self, columns: list[np.ndarray]):
        """Write rows given column arrays of equal length (ints stay ints)."""
        if not columns or len(columns[0]) == 0:
            return
        fmt = ["%d" if np.asarray(c).dtype.kind in "iub" else "%.17g" for c in columns]
        data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
        np.savetxt(self._fh, data, fmt=fmt, delimiter=",")

    def row(self, values):
        self._fh.write(",".join(_fmt(v) for v in values) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def snapshot_columns(t: float, grid, rho: np.ndarray, U: np.ndarray, extra: dict | None = None):
    """Column arrays ``t, x, y, a_bin, rho, Ux, Uy[, extra...]`` for one snapshot."""
    na = rho.shape[0]
    X, Y = grid.centers()
    n = grid.nx * grid.ny
    cols = [
        np.full(na * n, float(t)),
        np.tile(X.ravel(), na),
        np.tile(Y.ravel(), na),
        np.repeat(np.arange(na), n),
        rho.reshape(na, n).ravel(),
        U[..., 0].reshape(na, n).ravel(),
        U[..., 1].reshape(na, n).ravel(),
    ]
    for values in (extra or {}).values():
        cols.append(np.tile(np.asarray(values).ravel(), na))
    return cols


def read_csv(path) -> dict[str, np.ndarray]:
    """Columns of a numeric CSV as float arrays (empty arrays for a header-only file)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if not rows:
        return {h: np.zeros(0) for h in header}
    data = np.array(rows, dtype=float)
    return {h: data[:, i] for i, h in enumerate(header)}


def write_json(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def source_digest() -> str:
    """sha256 over the package sources, identifying the code that produced a run."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")) + sorted(root.rglob("*.schema")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
