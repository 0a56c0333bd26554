"""Distances between two snapshot files on the same grid.

For every time in the first file and every group bin the report lists

* ``l1_rho``, ``linf_rho``: ``sum |rho_a - rho_b| dA`` and ``max |rho_a - rho_b|``;
* ``l1_flux``, ``linf_flux``: the same for the momentum ``rho U``;
* ``order_a``, ``order_b``: the mass-weighted polarisation ``|sum rho U| / sum rho``;
* ``mass_a``, ``mass_b``.

Times of the second file are matched exactly when possible and otherwise
resampled to the nearest recorded time; such rows carry ``resampled = 1``.
NaN velocities (empty IBM bins) count as zero momentum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import CsvSink, read_csv

METRICS = ("l1_rho", "linf_rho", "l1_flux", "linf_flux")
REPORT_COLUMNS = ["t", "t_b", "resampled", "a_bin", *METRICS, "order_a", "order_b", "mass_a", "mass_b"]
TIME_TOL = 1e-9


class IncompatibleGrids(ValueError):
    pass


def _frames(cols: dict) -> dict:
    """``{t: (keys (n, 3), rho, flux (n, 2))}`` with rows in canonical cell order."""
    out = {}
    for t in np.unique(cols["t"]):
        sel = cols["t"] == t
        keys = np.stack([cols["a_bin"][sel], cols["x"][sel], cols["y"][sel]], axis=1)
        order = np.lexsort(keys.T[::-1])
        rho = cols["rho"][sel][order]
        U = np.stack([cols["Ux"][sel], cols["Uy"][sel]], axis=1)[order]
        flux = np.where(rho[:, None] > 0, rho[:, None] * np.nan_to_num(U), 0.0)
        out[float(t)] = (keys[order], rho, flux)
    return out


def _cell_area(keys: np.ndarray) -> float:
    xs, ys = np.unique(keys[:, 1]), np.unique(keys[:, 2])
    dx = np.min(np.diff(xs)) if xs.size > 1 else 1.0
    dy = np.min(np.diff(ys)) if ys.size > 1 else 1.0
    return float(dx * dy)


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    def worst(self, metric: str) -> float:
        vals = [r[metric] for r in self.rows]
        return max(vals) if vals else 0.0

    @property
    def breaches(self) -> list[str]:
        out = []
        for metric, limit in sorted(self.thresholds.items()):
            value = self.worst(metric)
            if value > limit:
                out.append(f"{metric} = {value:.6g} > {limit:.6g}")
        return out

    @property
    def resampled(self) -> int:
        return sum(r["resampled"] for r in self.rows)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with CsvSink(out_dir / "report.csv", REPORT_COLUMNS) as sink:
            for r in self.rows:
                sink.row([r[c] for c in REPORT_COLUMNS])
        (out_dir / "summary.txt").write_text(self.summary())

    def summary(self) -> str:
        lines = [f"rows: {len(self.rows)}", f"resampled rows: {self.resampled}"]
        for metric in METRICS:
            lines.append(f"max {metric}: {self.worst(metric):.6g}")
        breaches = self.breaches
        lines.append("thresholds: " + ("; ".join(breaches) if breaches else "all within limits"
                                        if self.thresholds else "none set"))
        return "\n".join(lines) + "\n"


def compare(path_a, path_b, thresholds: dict | None = None) -> ComparisonReport:
    """Compare two snapshot CSVs; raises ``IncompatibleGrids`` if their cells differ."""
    thresholds = dict(thresholds or {})
    unknown = set(thresholds) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown threshold metric(s) {sorted(unknown)}; expected {METRICS}")
    fa, fb = _frames(read_csv(path_a)), _frames(read_csv(path_b))
    report = ComparisonReport(thresholds=thresholds)
    if not fa or not fb:
        if fa or fb:
            raise IncompatibleGrids("one file has snapshots and the other has none")
        return report
    times_b = np.array(sorted(fb))
    for t, (keys, rho_a, flux_a) in sorted(fa.items()):
        tb = float(times_b[np.argmin(np.abs(times_b - t))])
        keys_b, rho_b, flux_b = fb[tb]
        if keys.shape != keys_b.shape or not np.allclose(keys, keys_b, rtol=0, atol=1e-9):
            raise IncompatibleGrids(f"cells at t={t:g} and t={tb:g} do not match")
        area = _cell_area(keys)
        for b in np.unique(keys[:, 0]):
            sel = keys[:, 0] == b
            dr = np.abs(rho_a[sel] - rho_b[sel])
            df = np.linalg.norm(flux_a[sel] - flux_b[sel], axis=1)
            ma, mb = rho_a[sel].sum() * area, rho_b[sel].sum() * area

            def order(rho, flux):
                total = rho.sum()
                return float(np.linalg.norm(flux.sum(axis=0)) / total) if total > 0 else 0.0

            report.rows.append({
                "t": t, "t_b": tb, "resampled": int(abs(tb - t) > TIME_TOL), "a_bin": int(b),
                "l1_rho": float(dr.sum() * area), "linf_rho": float(dr.max()),
                "l1_flux": float(df.sum() * area), "linf_flux": float(df.max()),
                "order_a": order(rho_a[sel], flux_a[sel]), "order_b": order(rho_b[sel], flux_b[sel]),
                "mass_a": float(ma), "mass_b": float(mb),
            })
    return report
