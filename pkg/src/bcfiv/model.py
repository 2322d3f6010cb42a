"""Per-unit surfaces: instrument propensity, ITT, compliance and conditional CACE.

The continuous-outcome ITT surface comes from a two-forest Bayesian causal
forest: a prognostic forest on ``[x, pi_hat]`` plus an instrument-effect
forest on ``x`` whose output is multiplied by ``z``. Binary outcomes and the
compliance surface use one probit forest with ``z`` appended as a feature,
contrasted at ``z=1`` and ``z=0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .bart import BartConfig, fit_bart_binary, predict_posterior
from .bart.sampler import (
    ForestSpec,
    OutcomeScaling,
    _check_xy,
    _ensemble,
    calibrate_lambda,
    ols_sigma,
    run_chain,
)
from .dataset import Dataset, DomainError

Variant = Literal["bcf_iv", "bcf_itt"]

PROGNOSTIC = BartConfig(q=200, beta=0.95, eta=2.0)
TREATMENT = BartConfig(q=50, beta=0.25, eta=3.0)


@dataclass(frozen=True)
class FitMode:
    variant: Variant = "bcf_iv"
    outcome_kind: Literal["continuous", "binary"] = "continuous"

    def __post_init__(self):
        v = self.variant.replace("-", "_")
        if v not in ("bcf_iv", "bcf_itt"):
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "variant", v)


@dataclass(frozen=True)
class SurfaceConfig:
    """Forest priors and chain lengths for the four surface fits.

    ``n_burn``/``n_draw``/``seed`` override the corresponding fields of every
    per-forest config, so a single pair of numbers controls the chain length.
    """

    prognostic: BartConfig = PROGNOSTIC
    treatment: BartConfig = TREATMENT
    propensity: BartConfig = BartConfig(q=200)
    compliance: BartConfig = BartConfig(q=200)
    n_burn: int = 500
    n_draw: int = 1000
    seed: int = 0
    floor: float = 0.05
    propensity_clip: tuple[float, float] = (0.01, 0.99)
    constant_propensity: float | None = None  # e.g. 0.5 for the misspecified-propensity check

    def __post_init__(self):
        if self.floor <= 0:
            raise ValueError("floor must be positive")
        if self.n_burn < 1 or self.n_draw < 1:
            raise ValueError("n_burn and n_draw must be >= 1")
        if self.constant_propensity is not None and not 0 < self.constant_propensity < 1:
            raise ValueError("constant_propensity must lie in (0,1)")

    def forest(self, which: str, seed: int) -> BartConfig:
        return replace(getattr(self, which), n_burn=self.n_burn, n_draw=self.n_draw, seed=seed)

    def seeds(self) -> dict[str, int]:
        kids = np.random.SeedSequence(self.seed).spawn(3)
        names = ("propensity", "itt", "compliance")
        return {nm: int(k.generate_state(1)[0]) for nm, k in zip(names, kids)}


@dataclass(frozen=True, eq=False)
class Surfaces:
    """Posterior-mean surfaces for every discovery unit, plus retained draws."""

    pi_hat: np.ndarray
    itt_hat: np.ndarray
    mu_hat: np.ndarray
    pic_hat: np.ndarray
    cace_hat: np.ndarray
    floored: np.ndarray
    itt_draws: np.ndarray = field(repr=False)
    pic_draws: np.ndarray = field(repr=False)
    acceptance: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.pi_hat.shape[0]

    def to_csv(self, path: str | Path) -> None:
        cols = {
            "pi_hat": self.pi_hat, "itt_hat": self.itt_hat, "mu_hat": self.mu_hat,
            "pic_hat": self.pic_hat, "cace_hat": self.cace_hat, "floored": self.floored.astype(int),
        }
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["unit", *cols])
            for i in range(self.n):
                wr.writerow([i, *(_num(c[i]) for c in cols.values())])


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def _both_arms(z: np.ndarray, name: str = "z") -> None:
    if not (np.any(z == 1) and np.any(z == 0)):
        raise DomainError(f"{name} must contain both arms 0 and 1")


def estimate_instrument_propensity(x: np.ndarray, z: np.ndarray, cfg: BartConfig = BartConfig(), clip=(0.01, 0.99)) -> np.ndarray:
    """Posterior-mean P(z=1 | x) from probit BART, clipped into ``clip``."""
    z = np.asarray(z, dtype=float)
    _both_arms(z)
    e = fit_bart_binary(x, z, cfg)
    return np.clip(e.mean(), clip[0], clip[1])


def _contrast(e, x: np.ndarray) -> np.ndarray:
    x1 = np.column_stack([x, np.ones(x.shape[0])])
    x0 = np.column_stack([x, np.zeros(x.shape[0])])
    return predict_posterior(e, x1) - predict_posterior(e, x0)


def fit_itt_surface(
    x: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    pi_hat: np.ndarray,
    cfg: SurfaceConfig = SurfaceConfig(),
    outcome_kind: str = "continuous",
    seed: int | None = None,
):
    """Per-unit ITT of the instrument on the outcome.

    Returns ``(itt_hat, mu_hat, itt_draws, acceptance)`` where the draws
    matrix has one row per unit and one column per retained draw.
    """
    x, y = _check_xy(x, y)
    z = np.asarray(z, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float)
    if not (z.shape[0] == pi_hat.shape[0] == y.shape[0]):
        raise ValueError("x, z, y and pi_hat must have the same length")
    _both_arms(z)
    seed = cfg.seed if seed is None else seed
    if outcome_kind == "binary":
        if not np.all((y == 0) | (y == 1)):
            raise DomainError("binary outcome must be 0/1")
        e = fit_bart_binary(np.column_stack([x, z]), y, cfg.forest("prognostic", seed))
        draws = _contrast(e, x)
        mu = e.mean()
        return draws.mean(axis=1), mu, draws, {"outcome": e.acceptance}
    if np.ptp(y) == 0:
        draws = np.zeros((y.shape[0], cfg.n_draw))
        return draws.mean(axis=1), np.full(y.shape[0], y[0]), draws, {}

    sc = OutcomeScaling.from_data(y)
    ys = sc.forward(y)
    pcfg = cfg.forest("prognostic", seed)
    tcfg = cfg.forest("treatment", seed)
    sig_hat = ols_sigma(np.column_stack([x, z]), ys)
    lam = calibrate_lambda(sig_hat, pcfg.nu, pcfg.lambda_quantile)
    specs = [
        ForestSpec(np.column_stack([x, pi_hat]), pcfg, pcfg.leaf_sd()),
        ForestSpec(x, tcfg, tcfg.leaf_sd(), basis=z),
    ]
    res = run_chain(
        specs, ys, n_burn=cfg.n_burn, n_draw=cfg.n_draw, seed=seed,
        nu=pcfg.nu, lam=lam, sigma2_init=sig_hat**2,
    )
    mu_e = _ensemble(res.forests[0], res.train_raw[0], kind="continuous", link="identity",
                     offset=sc.offset, scale=sc.span, sigma=None)
    tau_e = _ensemble(res.forests[1], res.train_raw[1], kind="continuous", link="identity",
                      offset=0.0, scale=sc.span, sigma=None)
    draws = tau_e.train_draws
    acc = {"prognostic": mu_e.acceptance, "treatment": tau_e.acceptance}
    return draws.mean(axis=1), mu_e.mean(), draws, acc


def fit_compliance_surface(x: np.ndarray, z: np.ndarray, w: np.ndarray, cfg: BartConfig = BartConfig()):
    """Per-unit P(w=1 | z=1, x) - P(w=1 | z=0, x) from one probit forest.

    Returns ``(pic_hat, draws, acceptance)``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    _both_arms(z)
    if np.all(w == w[0]):
        raise DomainError("treatment receipt w is single-valued")
    e = fit_bart_binary(np.column_stack([x, z]), w, cfg)
    draws = _contrast(e, x)
    return draws.mean(axis=1), draws, e.acceptance


def conditional_cace(itt_hat: np.ndarray, pic_hat: np.ndarray, floor: float = 0.05):
    """Elementwise ITT / compliance with a guarded denominator.

    Where ``|pic| < floor`` the denominator becomes ``sign(pic) * floor``
    (``+floor`` at exactly zero) and the unit is flagged. Returns
    ``(cace, flagged)``.
    """
    itt = np.asarray(itt_hat, dtype=float)
    pic = np.asarray(pic_hat, dtype=float)
    if itt.shape != pic.shape:
        raise ValueError(f"length mismatch: {itt.shape} vs {pic.shape}")
    if floor <= 0:
        raise ValueError("floor must be positive")
    flagged = np.abs(pic) < floor
    denom = np.where(flagged, np.where(pic < 0, -floor, floor), pic)
    return itt / denom, flagged


def fit_surfaces(d: Dataset, cfg: SurfaceConfig = SurfaceConfig()) -> Surfaces:
    """Run propensity, ITT and compliance fits on one (discovery) sample."""
    seeds = cfg.seeds()
    if cfg.constant_propensity is not None:
        _both_arms(d.z)
        pi_hat = np.full(d.n, cfg.constant_propensity)
    else:
        pi_hat = estimate_instrument_propensity(
            d.x, d.z, cfg.forest("propensity", seeds["propensity"]), cfg.propensity_clip
        )
    itt, mu, itt_draws, acc = fit_itt_surface(d.x, d.z, d.y, pi_hat, cfg, d.outcome_kind, seeds["itt"])
    pic, pic_draws, acc_c = fit_compliance_surface(d.x, d.z, d.w, cfg.forest("compliance", seeds["compliance"]))
    cace, flagged = conditional_cace(itt, pic, cfg.floor)
    return Surfaces(
        pi_hat=pi_hat, itt_hat=itt, mu_hat=mu, pic_hat=pic, cace_hat=cace, floored=flagged,
        itt_draws=itt_draws, pic_draws=pic_draws, acceptance={**acc, "compliance": acc_c},
    )


def discovery_targets(s: Surfaces, mode: FitMode | str) -> np.ndarray:
    variant = mode.variant if isinstance(mode, FitMode) else FitMode(mode).variant
    return s.itt_hat if variant == "bcf_itt" else s.cace_hat
