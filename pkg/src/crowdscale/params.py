"""Model parameters shared by every level of the hierarchy."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace


@dataclass(frozen=True)
class CutoffParams:
    """Distance cut-offs of the elementary interaction.

    Attributes
    ----------
    ell : float
        Lower cut-off on an elementary DTI (m); caps the inverse at ``1/ell``.
    big_l : float
        Free-walking distance between two velocity updates (m).
    R : float
        Minimal-distance threshold below which an encounter is a threat (m).
    """

    ell: float = 0.4
    big_l: float = 4.0
    R: float = 0.4

    def problems(self) -> list[str]:
        out = []
        if not self.R > 0:
            out.append(f"R must be > 0 (got {self.R})")
        if not self.ell > 0:
            out.append(f"ell must be > 0 (got {self.ell})")
        if not self.ell <= self.R:
            out.append(f"need ell <= R (got ell={self.ell}, R={self.R})")
        if not self.R < self.big_l:
            out.append(f"need R < L (got R={self.R}, L={self.big_l})")
        return out


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters.

    Defaults use a walking speed normalised to one; ``k = 1/L**2`` makes the
    reaction rate ``k L**2`` equal to one per second.
    """

    c: float = 1.0
    cut: CutoffParams = field(default_factory=CutoffParams)
    k: float = 1.0 / 16.0
    d: float = 0.1
    kappa: float = 0.0
    big_c: float = 5.0
    dt: float = 0.05
    # decision interval of the time-discrete IBM; None means L / c
    dt_discrete: float | None = None
    n_test: int = 65
    fd_step: float = 2.0 * math.pi / 256
    # None: delta = C N^{-1/2} from the local density; a float pins it
    delta: float | None = None

    @property
    def ell(self) -> float:
        return self.cut.ell

    @property
    def big_l(self) -> float:
        return self.cut.big_l

    @property
    def R(self) -> float:
        return self.cut.R

    @property
    def reaction_rate(self) -> float:
        return self.k * self.big_l**2

    @property
    def free_beta(self) -> float:
        """Concentration of the free-walking equilibrium, ``k L^2 / d``."""
        return self.reaction_rate / self.d

    @property
    def decision_dt(self) -> float:
        return self.dt_discrete if self.dt_discrete is not None else self.big_l / self.c

    def with_(self, **changes) -> "ModelParams":
        cut_keys = {"ell", "big_l", "R"} & changes.keys()
        if cut_keys:
            cut = replace(self.cut, **{k: changes.pop(k) for k in cut_keys})
            changes["cut"] = cut
        return replace(self, **changes)

    def problems(self, model: str | None = None) -> list[str]:
        """List every violated invariant (empty when the set is sane)."""
        out = list(self.cut.problems())
        if not self.c > 0:
            out.append(f"c must be > 0 (got {self.c})")
        if not self.dt > 0:
            out.append(f"dt must be > 0 (got {self.dt})")
        if not self.k >= 0:
            out.append(f"k must be >= 0 (got {self.k})")
        if not self.d >= 0:
            out.append(f"d must be >= 0 (got {self.d})")
        if not -1.0 <= self.kappa <= 1.0:
            out.append(f"kappa must lie in [-1, 1] (got {self.kappa})")
        if not self.big_c > 1:
            out.append(f"C must be > 1 (got {self.big_c})")
        if not self.n_test >= 3:
            out.append(f"n_test must be >= 3 (got {self.n_test})")
        if not self.fd_step > 0:
            out.append(f"fd_step must be > 0 (got {self.fd_step})")
        if self.delta is not None and not self.delta > 0:
            out.append(f"delta must be > 0 when given (got {self.delta})")
        if model == "ibm-discrete" and not self.R < self.c * self.decision_dt:
            out.append(
                f"discrete IBM needs R < c*dt_discrete (got R={self.R}, "
                f"c*dt_discrete={self.c * self.decision_dt})"
            )
        if model == "hydro" and self.kappa != -1.0:
            out.append(f"hydro model requires kappa = -1 (got {self.kappa})")
        return out

    def to_dict(self) -> dict:
        """Flat mapping (cut-offs inlined) accepted by ``from_dict`` and scenario files."""
        out = asdict(self)
        return {**out.pop("cut"), **out}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        data = dict(data)
        cut = data.pop("cut", None)
        cut_kw = {k: data.pop(k) for k in ("ell", "big_l", "R") if k in data}
        if isinstance(cut, dict):
            cut_kw = {**cut, **cut_kw}
        return cls(cut=CutoffParams(**cut_kw), **data)
