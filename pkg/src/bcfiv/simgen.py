"""Synthetic imperfect-compliance data with known subgroup effects.

Ten (by default) binary covariates; the effect and the compliance rate depend
only on the first two, which define four cells::

    l1: x1=0, x2=0    l2: x1=1, x2=1    l3: x1=1, x2=0    l4: x1=0, x2=1

Noncompliance is one-sided (W(0)=0). Every unit draws from its own
counter-based random stream keyed by (seed, unit index), so growing ``n``
appends units without changing earlier ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Literal, Mapping

import numpy as np

from .dataset import Dataset

CELLS = ("l1", "l2", "l3", "l4")
# (x1, x2) -> cell label
_CELL_OF = {(0, 0): "l1", (1, 1): "l2", (1, 0): "l3", (0, 1): "l4"}
CELL_DEFINITIONS: dict[str, dict[int, int]] = {
    lab: {0: a, 1: b} for (a, b), lab in _CELL_OF.items()
}

CONFOUNDING_STRENGTH = 0.5
CONSTANT_ITT = 0.2

Heterogeneity = Literal["strong", "slight"]
IttMode = Literal["heterogeneous_effect", "constant_itt"]
Robustness = Literal["none", "confounded_instrument", "correlated_covariates", "misspecified_propensity"]


@dataclass(frozen=True)
class Compliance:
    """Cell compliance rates: ``l1``/``l2`` override ``default`` when given."""

    default: float = 0.75
    l1: float | None = None
    l2: float | None = None

    def __post_init__(self):
        for v in (self.default, self.l1, self.l2):
            if v is not None and not 0 < v <= 1:
                raise ValueError(f"compliance rates must lie in (0, 1], got {v}")

    @classmethod
    def gap(cls, g: float, centre: float = 0.5) -> "Compliance":
        """l1 at ``centre - g/2`` and l2 at ``centre + g/2``, others at ``centre``."""
        return cls(default=centre, l1=centre - g / 2, l2=centre + g / 2)

    def rate(self, cell: str) -> float:
        v = {"l1": self.l1, "l2": self.l2}.get(cell)
        return self.default if v is None else v

    @property
    def is_constant(self) -> bool:
        return all(self.rate(c) == self.default for c in CELLS)


@dataclass(frozen=True)
class SimScenario:
    n: int = 1000
    p: int = 10
    k: float = 1.0
    heterogeneity: Heterogeneity = "strong"
    compliance: Compliance = field(default_factory=Compliance)
    itt_mode: IttMode = "heterogeneous_effect"
    robustness: Robustness = "none"
    correlation: float = 0.25
    itt_constant: float = CONSTANT_ITT
    confounding: float = CONFOUNDING_STRENGTH
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.compliance, (int, float)):
            object.__setattr__(self, "compliance", Compliance(float(self.compliance)))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.p < 2:
            raise ValueError("need p >= 2 covariates")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.heterogeneity not in ("strong", "slight"):
            raise ValueError(f"unknown heterogeneity {self.heterogeneity!r}")
        if self.itt_mode not in ("heterogeneous_effect", "constant_itt"):
            raise ValueError(f"unknown itt_mode {self.itt_mode!r}")
        if self.robustness not in Robustness.__args__:  # type: ignore[attr-defined]
            raise ValueError(f"unknown robustness {self.robustness!r}")
        if not -1 / (self.p - 1) < self.correlation < 1:
            raise ValueError("correlation must keep the covariance positive definite")

    def cell_tau(self) -> dict[str, float]:
        if self.itt_mode == "constant_itt":
            return {c: self.itt_constant / self.compliance.rate(c) for c in CELLS}
        k = self.k
        if self.heterogeneity == "strong":
            return {"l1": k, "l2": -k, "l3": 0.0, "l4": 0.0}
        return {"l1": k, "l2": -k, "l3": 0.5 * k, "l4": -0.5 * k}

    def heterogeneous_cells(self) -> tuple[str, ...]:
        """Cells whose effect differs from the rest by design (targets of discovery)."""
        if self.itt_mode == "constant_itt":
            return ("l1", "l2")
        return ("l1", "l2") if self.heterogeneity == "strong" else CELLS

    @classmethod
    def from_mapping(cls, m: Mapping[str, str]) -> "SimScenario":
        """Build from string key/values such as those of a ``key=value`` file.

        Compliance is given either as ``compliance=0.75`` or through
        ``compliance_default``/``compliance_l1``/``compliance_l2``, or as a
        symmetric ``compliance_gap`` around 0.5.
        """
        known = {f.name: f.type for f in fields(cls)}
        kw: dict = {}
        comp: dict = {}
        for key, raw in m.items():
            key = key.strip()
            val = str(raw).strip()
            if key == "compliance":
                comp["default"] = float(val)
            elif key.startswith("compliance_"):
                comp[key.removeprefix("compliance_")] = float(val)
            elif key in ("n", "p", "seed"):
                kw[key] = int(val)
            elif key in ("k", "correlation", "itt_constant", "confounding"):
                kw[key] = float(val)
            elif key in known:
                kw[key] = val
            else:
                raise ValueError(f"unknown scenario key {key!r}")
        if "gap" in comp:
            kw["compliance"] = Compliance.gap(comp.pop("gap"), comp.pop("default", 0.5))
            if comp:
                raise ValueError("compliance_gap cannot be combined with per-cell rates")
        elif comp:
            kw["compliance"] = Compliance(**comp)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Observed data plus the oracle columns used to score estimators."""

    data: Dataset
    scenario: SimScenario
    true_tau: np.ndarray
    true_compliance: np.ndarray
    cell: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    w1: np.ndarray

    def to_csv(self, path) -> None:
        self.data.to_csv(
            path,
            extra={
                "true_tau": self.true_tau, "true_compliance": self.true_compliance,
                "cell": self.cell, "y0": self.y0, "y1": self.y1, "w1": self.w1,
            },
        )


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"line {lineno}: empty key")
        if k in out:
            raise ValueError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def unit_stream(seed: int, i: int) -> np.random.Generator:
    """Independent random stream of unit ``i`` (counter-based, position-free)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))


def _copula_factor(p: int, rho: float) -> np.ndarray:
    # Latent normal correlation that yields pairwise correlation ``rho``
    # between the binary margins after thresholding at zero.
    latent = math.sin(rho * math.pi / 2)
    cov = np.full((p, p), latent)
    np.fill_diagonal(cov, 1.0)
    return np.linalg.cholesky(cov)


def _logistic(a: float) -> float:
    return 1.0 / (1.0 + math.exp(-a))


def generate(s: SimScenario) -> SyntheticDataset:
    n, p = s.n, s.p
    factor = _copula_factor(p, s.correlation) if s.robustness == "correlated_covariates" else None
    tau_of = s.cell_tau()
    x = np.empty((n, p))
    z = np.empty(n)
    w1 = np.empty(n)
    y0 = np.empty(n)
    cells = np.empty(n, dtype=object)
    for i in range(n):
        g = unit_stream(s.seed, i)
        e = g.standard_normal(p)
        if factor is not None:
            e = factor @ e
        x[i] = e > 0
        u_z, u_w = g.random(2)
        y0[i] = g.standard_normal()
        cells[i] = _CELL_OF[(int(x[i, 0]), int(x[i, 1]))]
        if s.robustness == "confounded_instrument":
            pz = _logistic(s.confounding * (2 * x[i, 0] - 1) + s.confounding * (2 * x[i, 1] - 1))
        else:
            pz = 0.5
        z[i] = u_z < pz
        w1[i] = u_w < s.compliance.rate(cells[i])
    true_tau = np.array([tau_of[c] for c in cells])
    true_comp = np.array([s.compliance.rate(c) for c in cells])
    y1 = y0 + w1 * true_tau
    w = z * w1
    y = np.where(z == 1, y1, y0)
    data = Dataset(y=y, w=w, z=z, x=x, covariate_names=tuple(f"x{j + 1}" for j in range(p)))
    return SyntheticDataset(
        data=data, scenario=s, true_tau=true_tau, true_compliance=true_comp,
        cell=cells.astype(str), y0=y0, y1=y1, w1=w1,
    )


def oracle_cell_cace(sd: SyntheticDataset | SimScenario) -> dict[str, float]:
    s = sd.scenario if isinstance(sd, SyntheticDataset) else sd
    return s.cell_tau()


def with_seed(s: SimScenario, seed: int) -> SimScenario:
    return replace(s, seed=seed)
