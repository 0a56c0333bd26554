"""Scenario files: YAML documents validated against ``scenario.schema``."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from ..grid import Grid
from ..ibm import Crowd
from ..params import ModelParams
from ..specialmath import beta_of_speed

MODELS = ("ibm-discrete", "ibm-continuous", "kinetic", "fluid-mono", "fluid-vmf", "hydro")
FIELD_MODELS = ("kinetic", "fluid-mono", "fluid-vmf", "hydro")
FORCES = {
    "kinetic": ("free", "local", "nonlocal"),
    "fluid-mono": ("free", "local", "local_iso", "nonlocal"),
    "fluid-vmf": ("free", "local", "nonlocal"),
    "hydro": ("local",),
    "ibm-continuous": ("free", "local"),
    "ibm-discrete": ("free", "local"),
}

DEFAULTS = {
    "name": "scenario",
    "model": "kinetic",
    "seed": 0,
    "grid": {"nx": 32, "ny": 32, "n_theta": 128},
    "params": {},
    "solver": {"force": "local", "rho_max": 10.0},
    "ibm": {"walkers_per_mass": 1.0},
    "output": {"every": 1.0, "until": 10.0},
}


class ScenarioError(ValueError):
    """Every violated invariant of a scenario, one message per entry."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid scenario:\n  " + "\n  ".join(problems))
        self.problems = problems


def schema() -> dict:
    return json.loads(resources.files("crowdscale.harness").joinpath("scenario.schema").read_text())


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class Scenario:
    """A validated, fully resolved scenario (``data`` holds every default)."""

    data: dict

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def model(self) -> str:
        return self.data["model"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def groups(self) -> list[dict]:
        return self.data["groups"]

    @property
    def targets(self) -> np.ndarray:
        return np.array([float(g["target"]) for g in self.groups])

    @property
    def grid(self) -> Grid:
        g, d = self.data["grid"], self.data["domain"]
        return Grid(g["nx"], g["ny"], float(d["lx"]), float(d["ly"]), g["n_theta"])

    @property
    def box(self) -> tuple[float, float]:
        return float(self.data["domain"]["lx"]), float(self.data["domain"]["ly"])

    @property
    def force(self) -> str:
        return self.data["solver"]["force"]

    @property
    def until(self) -> float:
        return float(self.data["output"]["until"])

    @property
    def every(self) -> float:
        return float(self.data["output"]["every"])

    def params(self, model: str | None = None) -> ModelParams:
        model = model or self.model
        raw = dict(self.data["params"])
        if model == "hydro" and "kappa" not in raw:
            raw["kappa"] = -1.0
        return ModelParams.from_dict(raw)

    def with_(self, **changes) -> "Scenario":
        return Scenario(_merge(self.data, changes))

    def resolved(self, model: str | None = None) -> dict:
        """The scenario with the full parameter set spelled out."""
        out = copy.deepcopy(self.data)
        out["model"] = model or self.model
        out["params"] = self.params(model).to_dict()
        return out

    # -------------------------------------------------------------- checks

    def problems(self, model: str | None = None) -> list[str]:
        model = model or self.model
        if model not in MODELS:
            return [f"unknown model {model!r}; expected one of {MODELS}"]
        try:
            p = self.params(model)
        except TypeError as err:
            return [f"params: {err}"]
        out = p.problems(model)
        n_a = self.data["grid"].get("n_a")
        if n_a is not None and n_a != len(self.groups):
            out.append(f"grid.n_a = {n_a} but {len(self.groups)} group(s) are defined")
        if self.force not in FORCES[model]:
            out.append(f"solver.force {self.force!r} not available for {model}; use one of {FORCES[model]}")
        if model in FIELD_MODELS:
            grid = self.grid
            courant = p.c * p.dt / min(grid.dx, grid.dy)
            if courant > 0.9:
                out.append(f"transport CFL: c*dt/min(dx,dy) = {courant:.4g} > 0.9")
            if "kernel_table" in self.data["solver"]:
                if p.delta is None:
                    out.append("solver.kernel_table pins the interaction radius: set params.delta")
        for i, g in enumerate(self.groups):
            speed = g.get("heading", {}).get("speed", 0.9)
            if model in ("kinetic", "fluid-vmf") and speed >= 1.0:
                out.append(f"groups[{i}].heading.speed must be < 1 for {model}")
            dens = g["density"]
            if dens["kind"] == "box" and not all(lo < hi for lo, hi in zip(dens["lo"], dens["hi"])):
                out.append(f"groups[{i}].density box needs lo < hi")
        if self.every > self.until and self.until > 0:
            out.append(f"output.every ({self.every}) exceeds output.until ({self.until})")
        return out

    def validate(self, model: str | None = None) -> "Scenario":
        problems = self.problems(model)
        if problems:
            raise ScenarioError(problems)
        return self

    # ------------------------------------------------------ initial states

    def density(self, index: int) -> np.ndarray:
        """Initial density of group ``index`` at the cell centres, ``(nx, ny)``."""
        grid = self.grid
        X, Y = grid.centers()
        spec = self.groups[index]["density"]
        if spec["kind"] == "uniform":
            return np.full((grid.nx, grid.ny), float(spec["value"]))
        bg = float(spec.get("background", 0.0))
        if spec["kind"] == "gaussian":
            lx, ly = self.box
            dx = X - spec["center"][0]
            dy = Y - spec["center"][1]
            dx -= lx * np.round(dx / lx)
            dy -= ly * np.round(dy / ly)
            return bg + spec["peak"] * np.exp(-0.5 * (dx * dx + dy * dy) / spec["sigma"] ** 2)
        inside = ((X >= spec["lo"][0]) & (X < spec["hi"][0]) & (Y >= spec["lo"][1]) & (Y < spec["hi"][1]))
        return np.where(inside, float(spec["value"]), bg)

    def heading(self, index: int) -> tuple[float, float]:
        g = self.groups[index]
        h = g.get("heading", {})
        return float(h.get("angle", g["target"])), float(h.get("speed", 0.9))

    def moments(self, unit_speed: bool = False):
        """``rho (n_a, nx, ny)`` and ``U (n_a, nx, ny, 2)``; ``U`` is zero where ``rho`` is."""
        grid = self.grid
        n = len(self.groups)
        rho = np.zeros((n, grid.nx, grid.ny))
        U = np.zeros((n, grid.nx, grid.ny, 2))
        for b in range(n):
            rho[b] = self.density(b)
            angle, speed = self.heading(b)
            speed = 1.0 if unit_speed else speed
            U[b] = np.where((rho[b] > 0)[..., None], speed * np.array([math.cos(angle), math.sin(angle)]), 0.0)
        return rho, U

    def crowd(self, seed: int | None = None) -> Crowd:
        """Walkers sampled from the initial densities and heading spreads.

        Each group gets ``round(mass * walkers_per_mass)`` walkers placed
        uniformly inside cells drawn in proportion to density; headings are
        von Mises around the mean heading with the concentration matching
        the initial ``|U|``.
        """
        seed = self.seed if seed is None else seed
        grid = self.grid
        per_mass = float(self.data["ibm"]["walkers_per_mass"])
        xs, ths, tgs = [], [], []
        for b, g in enumerate(self.groups):
            rng = np.random.default_rng([seed, b])
            rho = self.density(b)
            count = int(round(rho.sum() * grid.cell_area * per_mass))
            if count == 0:
                continue
            cells = rng.choice(rho.size, size=count, p=(rho / rho.sum()).ravel())
            ix, iy = np.unravel_index(cells, rho.shape)
            x = np.stack([(ix + rng.random(count)) * grid.dx, (iy + rng.random(count)) * grid.dy], axis=-1)
            angle, speed = self.heading(b)
            if speed >= 1.0:
                th = np.full(count, angle)
            else:
                th = angle + rng.vonmises(0.0, float(beta_of_speed(speed)), count)
            xs.append(x)
            ths.append(th)
            tgs.append(np.full(count, float(g["target"])))
        if not xs:
            return Crowd(np.zeros((0, 2)), np.zeros(0), np.zeros(0), box=self.box)
        return Crowd(np.concatenate(xs), np.concatenate(ths), np.concatenate(tgs), box=self.box)


def from_dict(raw: dict) -> Scenario:
    """Validate ``raw`` against the schema and fill in defaults."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ScenarioError([f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                             for e in errors])
    return Scenario(_merge(DEFAULTS, raw))


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ScenarioError([f"{path}: not valid YAML: {err}"]) from None
    if not isinstance(raw, dict):
        raise ScenarioError([f"{path}: expected a mapping at the top level"])
    return from_dict(raw)
