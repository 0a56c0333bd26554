"""Run a scenario under one model and write its outputs.

An output directory holds

* ``manifest.json``: the resolved scenario, model, seed, horizon and code
  version (package version plus a digest of the sources);
* ``snapshots.csv`` (field models): ``t, x, y, a_bin, rho, Ux, Uy`` with
  ``fp_iters, fp_residual`` appended for the hydrodynamic model;
* ``trajectories.csv`` (IBM): ``t, id, x, y, theta, a_angle``;
* ``diagnostics.csv``: ``t`` and ``mass_<b>`` per bin, ``max_rho``,
  ``clamp_count`` and model-specific counters.

Nothing depending on wall-clock time or thread count is written, so
identical scenarios and seeds reproduce identical bytes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..fluid_hydro import FixedPointError, hydro_bank, hydro_state, step_hydro
from ..fluid_second_order import (
    CausticError,
    FluidField,
    NegativeDensityError,
    make_vmf_bank,
    step_mono,
    step_vmf,
)
from ..ibm import IbmStabilityError, step_continuous, step_discrete
from ..kernels import cached_table
from ..kinetic import CflError, KineticField, KineticSolver, moments
from .io import SNAPSHOT_COLUMNS, TRAJECTORY_COLUMNS, CsvSink, snapshot_columns, source_digest, write_json
from .scenario import FIELD_MODELS, Scenario

SOLVER_ERRORS = (CausticError, NegativeDensityError, FixedPointError, IbmStabilityError, CflError,
                 FloatingPointError)


class SolverError(RuntimeError):
    """A solver failure with the step and time at which it happened."""


@dataclass
class RunResult:
    out: Path
    files: dict = field(default_factory=dict)
    steps: int = 0
    t: float = 0.0


def set_threads(threads: int | None):
    """Cap numba's worker pool; compiled kernels are serial, so results do not depend on it."""
    if threads is None:
        return
    import warnings

    import numba

    with warnings.catch_warnings():
        # an outdated TBB is reported here even though the workqueue layer is used
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def _table(s: Scenario, p, kappa: float | None = None):
    spec = s.data["solver"].get("kernel_table")
    if spec is None:
        return None
    return cached_table(p.kappa if kappa is None else kappa, p.delta, p.cut, spec.get("resolution", 256))


# ------------------------------------------------------------------ drivers


class _FieldDriver:
    extra_columns: tuple = ()

    def __init__(self, s: Scenario, p):
        self.s, self.p, self.grid = s, p, s.grid
        self.targets = s.targets
        self.clamped = 0

    def extra(self) -> dict:
        return {}

    def diagnostics(self, rho) -> list:
        mass = rho.sum(axis=(1, 2)) * self.grid.cell_area
        peak = float(rho.max()) if rho.size else 0.0
        return [*mass, peak, self.clamped]


class _Kinetic(_FieldDriver):
    def __init__(self, s, p):
        super().__init__(s, p)
        rho, U = s.moments()
        self.solver = KineticSolver(p, self.grid, s.force, table=_table(s, p))
        self.state = KineticField.from_moments(self.grid, self.targets, rho, U)

    def step(self, dt):
        self.state = self.solver.step(self.state, dt)
        self.clamped = self.solver.last_clamped

    def fields(self):
        m = moments(self.state)
        return m.rho, m.U


class _Mono(_FieldDriver):
    def __init__(self, s, p):
        super().__init__(s, p)
        rho, U = s.moments(unit_speed=True)
        self.table = _table(s, p, -1.0 if s.force == "local_iso" else None)
        self.state = FluidField(self.grid, self.targets, rho, U)

    def step(self, dt):
        free = self.s.force == "free"
        self.state = step_mono(self.state, self.p, dt, "local" if free else self.s.force, self.table,
                               rho_max=float(self.s.data["solver"]["rho_max"]), interactions=not free)

    def fields(self):
        return self.state.rho, self.state.U


class _Vmf(_FieldDriver):
    def __init__(self, s, p):
        super().__init__(s, p)
        rho, U = s.moments()
        self.table = _table(s, p)
        self.bank = make_vmf_bank(p, self.grid, self.table) if s.force == "local" else None
        self.state = FluidField(self.grid, self.targets, rho, U)

    def step(self, dt):
        self.state = step_vmf(self.state, self.p, dt, self.s.force, self.bank, self.table)
        self.clamped = self.state.clamp_count

    def fields(self):
        return self.state.rho, self.state.U


class _Hydro(_FieldDriver):
    extra_columns = ("fp_iters", "fp_residual")

    def __init__(self, s, p):
        super().__init__(s, p)
        rho, _ = s.moments()
        self.bank = hydro_bank(p, self.grid.n_theta, _table(s, p))
        self.state = hydro_state(self.grid, self.targets, rho, p, bank=self.bank)

    def step(self, dt):
        self.state = step_hydro(self.state, self.p, dt, self.bank)

    def fields(self):
        return self.state.rho, self.state.U

    def extra(self):
        return {"fp_iters": self.state.fp_iters, "fp_residual": self.state.fp_residual}

    def diagnostics(self, rho):
        return super().diagnostics(rho) + [int(self.state.fp_iters.max()), float(self.state.fp_residual.max())]


class _Empty(_FieldDriver):
    def __init__(self, s, p):
        super().__init__(s, p)
        g = self.grid
        self._rho = np.zeros((0, g.nx, g.ny))
        self._U = np.zeros((0, g.nx, g.ny, 2))

    def step(self, dt):
        pass

    def fields(self):
        return self._rho, self._U


FIELD_DRIVERS = {"kinetic": _Kinetic, "fluid-mono": _Mono, "fluid-vmf": _Vmf, "hydro": _Hydro}


def _bins(crowd_targets: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if targets.size == 0:
        return np.zeros(crowd_targets.size, dtype=int)
    gap = np.abs(np.angle(np.exp(1j * (crowd_targets[:, None] - targets[None, :]))))
    return np.argmin(gap, axis=1)


# -------------------------------------------------------------------- run


def run(s: Scenario, model: str | None = None, out=".", seed: int | None = None,
        until: float | None = None, threads: int | None = None) -> RunResult:
    """Validate, run and write outputs; solver failures raise ``SolverError``."""
    model = model or s.model
    s.validate(model)
    seed = s.seed if seed is None else int(seed)
    until = s.until if until is None else float(until)
    set_threads(threads)
    p = s.params(model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dt = p.decision_dt if model == "ibm-discrete" else p.dt
    n_steps = int(math.ceil(until / dt - 1e-9))
    stride = max(1, int(round(s.every / dt)))
    manifest = {
        "model": model,
        "seed": seed,
        "until": until,
        "dt": dt,
        "steps_planned": n_steps,
        "output_stride": stride,
        "scenario": s.resolved(model),
        "crowdscale_version": __version__,
        "numpy_version": np.__version__,
        "source_sha256": source_digest(),
        "status": "running",
    }
    write_json(out / "manifest.json", manifest)
    result = RunResult(out)
    try:
        if model in FIELD_MODELS:
            _run_field(s, model, p, dt, n_steps, stride, out, result)
        else:
            _run_ibm(s, model, p, dt, n_steps, stride, seed, out, result)
    except SOLVER_ERRORS as err:
        manifest["status"] = f"failed at step {result.steps}, t={result.t:.6g}: {err}"
        write_json(out / "manifest.json", manifest)
        raise SolverError(f"{model}: step {result.steps + 1} (t={result.t:.6g}) failed: {err}") from err
    manifest["status"] = "complete"
    manifest["steps"] = result.steps
    write_json(out / "manifest.json", manifest)
    result.files["manifest"] = out / "manifest.json"
    return result


def _run_field(s, model, p, dt, n_steps, stride, out, result):
    driver = _Empty(s, p) if not s.groups else FIELD_DRIVERS[model](s, p)
    n_a = len(s.groups)
    diag_cols = ["t", *[f"mass_{b}" for b in range(n_a)], "max_rho", "clamp_count"]
    if model == "hydro":
        diag_cols += ["fp_iters_max", "fp_residual_max"]
    snap_cols = SNAPSHOT_COLUMNS + list(driver.extra_columns)
    with CsvSink(out / "snapshots.csv", snap_cols) as snaps, CsvSink(out / "diagnostics.csv", diag_cols) as diag:
        def emit(t):
            rho, U = driver.fields()
            snaps.rows(snapshot_columns(t, driver.grid, rho, U, driver.extra()))
            if model == "hydro" and not s.groups:
                diag.row([t, 0.0, 0, 0, 0.0])
            else:
                diag.row([t, *driver.diagnostics(rho)])

        emit(0.0)
        for n in range(1, n_steps + 1):
            driver.step(dt)
            result.steps, result.t = n, n * dt
            if n % stride == 0 or n == n_steps:
                emit(n * dt)
    result.files.update(snapshots=out / "snapshots.csv", diagnostics=out / "diagnostics.csv")


def _run_ibm(s, model, p, dt, n_steps, stride, seed, out, result):
    crowd = s.crowd(seed)
    targets = s.targets
    bins = _bins(crowd.target, targets)
    per_mass = float(s.data["ibm"]["walkers_per_mass"])
    interactions = s.force != "free"
    n_a = len(s.groups)
    diag_cols = ["t", *[f"mass_{b}" for b in range(n_a)], *[f"order_{b}" for b in range(n_a)]]
    with CsvSink(out / "trajectories.csv", TRAJECTORY_COLUMNS) as traj, \
            CsvSink(out / "diagnostics.csv", diag_cols) as diag:
        def emit(c, t):
            traj.rows([np.full(c.size, t), c.ids, c.x[:, 0], c.x[:, 1], c.theta, c.target])
            order = [abs(np.mean(np.exp(1j * c.theta[bins == b]))) if np.any(bins == b) else 0.0
                     for b in range(n_a)]
            mass = [np.count_nonzero(bins == b) / per_mass for b in range(n_a)]
            diag.row([t, *mass, *order])

        emit(crowd, 0.0)
        for n in range(1, n_steps + 1):
            if model == "ibm-discrete":
                crowd = step_discrete(crowd, p, interactions=interactions)
            else:
                crowd = step_continuous(crowd, p, seed=seed, dt=dt, interactions=interactions)
            result.steps, result.t = n, n * dt
            if n % stride == 0 or n == n_steps:
                emit(crowd, n * dt)
    result.files.update(trajectories=out / "trajectories.csv", diagnostics=out / "diagnostics.csv")
