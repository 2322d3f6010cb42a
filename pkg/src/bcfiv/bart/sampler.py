"""Sum-of-trees MCMC: continuous BART, probit BART and a generic multi-forest chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtr

from ..dataset import DomainError
from ..tree import DecisionTree, Node
from . import _kernels as K


@dataclass(frozen=True)
class BartConfig:
    """Priors and chain settings for one forest.

    ``sigma0`` sets the leaf prior sd to ``sigma0 / sqrt(q)``. Left as None it
    is 0.5/2 on the scaled continuous outcome (two prior sds of the ensemble
    span the scaled range) and 3/2 on the probit latent scale.
    """

    q: int = 200
    eta: float = 2.0
    beta: float = 0.95
    sigma0: float | None = None
    nu: float = 3.0
    lambda_quantile: float = 0.9
    n_burn: int = 500
    n_draw: int = 1000
    proposal_probs: tuple[float, float, float, float] = (0.25, 0.25, 0.40, 0.10)
    n_cuts: int = 100
    max_depth: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0,1), got {self.beta}")
        if self.eta < 0 or self.q < 1 or self.nu <= 0:
            raise ValueError("need eta >= 0, q >= 1, nu > 0")
        if self.n_burn < 1 or self.n_draw < 1:
            raise ValueError("n_burn and n_draw must be >= 1")
        if not 0 < self.lambda_quantile < 1:
            raise ValueError("lambda_quantile must lie in (0,1)")
        probs = tuple(float(p) for p in self.proposal_probs)
        if len(probs) != 4 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"proposal_probs must be 4 non-negative numbers summing to 1: {probs}")
        object.__setattr__(self, "proposal_probs", probs)

    def leaf_sd(self, probit: bool = False) -> float:
        s0 = self.sigma0 if self.sigma0 is not None else (1.5 if probit else 0.25)
        return s0 / math.sqrt(self.q)


def log_tree_prior(t: DecisionTree, cfg: BartConfig | None = None, *, beta=None, eta=None) -> float:
    """Log prior probability of a tree shape under the depth-dependent split prior."""
    beta = cfg.beta if beta is None else beta
    eta = cfg.eta if eta is None else eta
    out = 0.0
    for nd in t.nodes:
        p = beta * (1.0 + nd.depth) ** (-eta)
        out += math.log(1.0 - p) if nd.is_leaf else math.log(p)
    return out


def calibrate_lambda(sigma_hat: float, nu: float, quantile: float) -> float:
    """Scale of the InvGamma(nu/2, nu*lam/2) prior on sigma^2 such that
    P(sigma < sigma_hat) = quantile."""
    return sigma_hat**2 * stats.chi2.ppf(1.0 - quantile, nu) / nu


def ols_sigma(x: np.ndarray, y: np.ndarray) -> float:
    """Residual sd of a least-squares fit of y on x with intercept."""
    n = y.shape[0]
    a = np.column_stack([np.ones(n), x])
    coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    dof = n - rank
    if dof <= 0:
        return float(np.std(y, ddof=1)) if n > 1 else 0.0
    r = y - a @ coef
    return float(math.sqrt(r @ r / dof))


# -- binning ---------------------------------------------------------------


def make_cutpoints(x: np.ndarray, n_cuts: int) -> np.ndarray:
    """Per-feature cutpoints, padded with NaN into a (P, K) matrix.

    Features with at most ``n_cuts + 1`` distinct values get the midpoints
    between them (so a binary feature gets the single cut 0.5); otherwise
    ``n_cuts`` equally spaced points strictly inside the observed range.
    """
    cols = []
    for f in range(x.shape[1]):
        u = np.unique(x[:, f])
        if u.size <= n_cuts + 1:
            c = 0.5 * (u[1:] + u[:-1])
        else:
            lo, hi = u[0], u[-1]
            c = lo + (hi - lo) * np.arange(1, n_cuts + 1) / (n_cuts + 1)
        cols.append(c)
    width = max(1, max(c.size for c in cols))
    out = np.full((x.shape[1], width), np.nan)
    for f, c in enumerate(cols):
        out[f, : c.size] = c
    return out


def bin_features(x: np.ndarray, cutvals: np.ndarray) -> np.ndarray:
    xb = np.empty(x.shape, dtype=np.int32)
    for f in range(x.shape[1]):
        c = cutvals[f][~np.isnan(cutvals[f])]
        xb[:, f] = np.searchsorted(c, x[:, f], side="right")
    return xb


# -- posterior container ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class PosteriorEnsemble:
    """Retained draws of one forest, stored as flat preorder node arrays.

    Predictions are ``offset + scale * sum_of_trees`` (identity link) or
    ``Phi(offset + sum_of_trees)`` (probit link).
    """

    node_var: np.ndarray = field(repr=False)
    node_thr: np.ndarray = field(repr=False)
    node_left: np.ndarray = field(repr=False)
    node_right: np.ndarray = field(repr=False)
    node_val: np.ndarray = field(repr=False)
    roots: np.ndarray = field(repr=False)
    feature_count: int
    outcome_kind: Literal["continuous", "binary"]
    link: Literal["identity", "probit"]
    offset: float
    scale: float
    sigma: np.ndarray | None = field(repr=False)
    train_draws: np.ndarray = field(repr=False)
    acceptance: dict = field(default_factory=dict)

    @property
    def n_draw(self) -> int:
        return self.roots.shape[0]

    @property
    def q(self) -> int:
        return self.roots.shape[1]

    def transform(self, raw: np.ndarray) -> np.ndarray:
        if self.link == "probit":
            return ndtr(self.offset + raw)
        return self.offset + self.scale * raw

    def tree(self, draw: int, t: int) -> DecisionTree:
        """Materialise tree ``t`` of draw ``draw`` (leaf values on the internal scale)."""
        nodes: list[Node] = []

        def visit(k: int, depth: int) -> int:
            nid = len(nodes)
            nodes.append(None)  # type: ignore[arg-type]
            v = int(self.node_var[k])
            if v < 0:
                nodes[nid] = Node(nid, depth, value=float(self.node_val[k]))
            else:
                left = visit(int(self.node_left[k]), depth + 1)
                right = visit(int(self.node_right[k]), depth + 1)
                nodes[nid] = Node(nid, depth, feature=v, threshold=float(self.node_thr[k]), left=left, right=right)
            return nid

        visit(int(self.roots[draw, t]), 0)
        return DecisionTree(tuple(nodes), self.feature_count)

    def mean(self) -> np.ndarray:
        return self.train_draws.mean(axis=1)


def predict_posterior(e: PosteriorEnsemble, x: np.ndarray) -> np.ndarray:
    """(M, n_draw) matrix of posterior draws of the regression function at x."""
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != e.feature_count:
        raise ValueError(f"expected (M, {e.feature_count}) covariates, got {x.shape}")
    raw = np.empty((x.shape[0], e.n_draw))
    if x.shape[0]:
        K.predict_flat(x, e.node_var, e.node_thr, e.node_left, e.node_right, e.node_val, e.roots, raw)
    return e.transform(raw)


# -- chain -----------------------------------------------------------------


@dataclass
class ForestSpec:
    """One forest in a (possibly multi-forest) chain.

    ``basis`` multiplies the forest's output row-wise (None means 1); BCF uses
    the instrument here so the forest models the effect of z.
    """

    x: np.ndarray
    cfg: BartConfig
    leaf_sd: float
    basis: np.ndarray | None = None


class _ForestState:
    def __init__(self, spec: ForestSpec, n: int):
        cfg = spec.cfg
        self.spec = spec
        self.cutvals = make_cutpoints(spec.x, cfg.n_cuts)
        self.xb = bin_features(spec.x, self.cutvals)
        self.basis = np.ones(n) if spec.basis is None else np.ascontiguousarray(spec.basis, dtype=float)
        m = 2 ** (cfg.max_depth + 1) - 1
        q = cfg.q
        self.var = np.full((q, m), K.UNUSED, dtype=np.int32)
        self.var[:, 0] = K.LEAF
        self.cut = np.zeros((q, m), dtype=np.int32)
        self.leaf = np.zeros((q, m))
        self.assign = np.zeros((q, n), dtype=np.int32)
        self.probs = np.array(cfg.proposal_probs)
        self.tau2 = spec.leaf_sd**2
        p = self.xb.shape[1]
        self.work = (
            np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int32),
            np.empty(m, dtype=np.int64), np.empty(m), np.empty(m),
            np.empty(m, dtype=np.int64), np.empty(m), np.empty(m),
            np.empty(p, dtype=np.int64), np.empty(p, dtype=np.int64),
        )
        self.tried = np.zeros(4, dtype=np.int64)
        self.acc = np.zeros(4, dtype=np.int64)
        self.drawn: list[tuple] = []
        self.fit = np.zeros(n)

    def sweep(self, resid: np.ndarray, sigma2: float) -> None:
        cfg = self.spec.cfg
        K.sweep(
            self.var, self.cut, self.leaf, self.assign, self.xb, self.basis, resid,
            sigma2, self.tau2, cfg.beta, cfg.eta, self.probs, cfg.max_depth,
            *self.work, self.tried, self.acc,
        )

    def refresh_fit(self) -> np.ndarray:
        K.forest_fit(self.leaf, self.assign, self.fit)
        return self.fit

    def record(self) -> None:
        total = K.count_nodes(self.var)
        o_var = np.empty(total, dtype=np.int32)
        o_thr = np.empty(total)
        o_left = np.empty(total, dtype=np.int32)
        o_right = np.empty(total, dtype=np.int32)
        o_val = np.empty(total)
        roots = np.empty(self.spec.cfg.q, dtype=np.int64)
        K.serialize(self.var, self.cut, self.leaf, self.cutvals, o_var, o_thr, o_left, o_right, o_val, roots, 0)
        self.drawn.append((o_var, o_thr, o_left, o_right, o_val, roots))

    def flat(self):
        offs = np.cumsum([0] + [d[0].size for d in self.drawn[:-1]])
        o_var = np.concatenate([d[0] for d in self.drawn])
        o_thr = np.concatenate([d[1] for d in self.drawn])
        o_left = np.concatenate([np.where(d[2] >= 0, d[2] + o, -1) for d, o in zip(self.drawn, offs)])
        o_right = np.concatenate([np.where(d[3] >= 0, d[3] + o, -1) for d, o in zip(self.drawn, offs)])
        o_val = np.concatenate([d[4] for d in self.drawn])
        roots = np.stack([d[5] + o for d, o in zip(self.drawn, offs)])
        return (
            o_var.astype(np.int32), o_thr, o_left.astype(np.int32),
            o_right.astype(np.int32), o_val, roots.astype(np.int64),
        )

    def acceptance(self) -> dict:
        names = ("grow", "prune", "change", "swap")
        return {
            nm: {"tried": int(t), "accepted": int(a), "rate": (float(a) / t if t else 0.0)}
            for nm, t, a in zip(names, self.tried, self.acc)
        }


@dataclass
class ChainResult:
    forests: list[_ForestState]
    train_raw: list[np.ndarray]  # per forest, (n, n_draw) raw in-sample sums
    sigma2: np.ndarray | None


def run_chain(
    specs: Sequence[ForestSpec],
    target: np.ndarray,
    *,
    n_burn: int,
    n_draw: int,
    seed: int,
    nu: float = 3.0,
    lam: float = 1.0,
    sigma2_init: float = 1.0,
    probit_y: np.ndarray | None = None,
    probit_offset: float = 0.0,
    refresh_every: int = 50,
) -> ChainResult:
    """Run one Markov chain over one or more forests sharing a residual.

    Each Gibbs sweep updates every tree of every forest in order, then the
    error variance (continuous case) or the latent utilities (probit case,
    where the error variance is fixed at 1).
    """
    n = target.shape[0]
    K.seed(int(seed) % (2**32))
    states = [_ForestState(s, n) for s in specs]
    probit = probit_y is not None
    if probit:
        y01 = np.ascontiguousarray(probit_y, dtype=float)
        latent = np.zeros(n)
        mean = np.full(n, probit_offset)
        K.draw_latent(y01, mean, latent)
        target = latent - probit_offset
    target = np.ascontiguousarray(target, dtype=float)
    resid = target.copy()
    sigma2 = 1.0 if probit else float(sigma2_init)
    train_raw = [np.empty((n, n_draw)) for _ in states]
    sig = None if probit else np.empty(n_draw)

    def refresh():
        total = np.zeros(n)
        for st in states:
            total += st.basis * st.refresh_fit()
        return target - total

    for it in range(n_burn + n_draw):
        for st in states:
            st.sweep(resid, sigma2)
        if probit:
            mean = probit_offset + (target - resid)
            K.draw_latent(y01, mean, latent)
            target = latent - probit_offset
            resid = target - (mean - probit_offset)
        else:
            sigma2 = K.draw_sigma2(resid, nu, lam)
        keep = it - n_burn
        if keep >= 0 or (refresh_every and it % refresh_every == 0):
            resid = refresh()
        if keep >= 0:
            for st, raw in zip(states, train_raw):
                st.record()
                raw[:, keep] = st.fit
            if sig is not None:
                sig[keep] = sigma2
    return ChainResult(states, train_raw, sig)


def _ensemble(st: _ForestState, raw: np.ndarray, *, kind, link, offset, scale, sigma) -> PosteriorEnsemble:
    o_var, o_thr, o_left, o_right, o_val, roots = st.flat()
    ens = PosteriorEnsemble(
        node_var=o_var, node_thr=o_thr, node_left=o_left, node_right=o_right, node_val=o_val,
        roots=roots, feature_count=st.xb.shape[1], outcome_kind=kind, link=link,
        offset=offset, scale=scale, sigma=sigma, train_draws=np.empty(0), acceptance=st.acceptance(),
    )
    object.__setattr__(ens, "train_draws", ens.transform(raw))
    return ens


def _check_xy(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows, y has {y.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("inputs contain non-finite values")
    return x, y


@dataclass(frozen=True)
class OutcomeScaling:
    """Maps y to [-0.5, 0.5]: y_s = (y - lo) / span - 0.5."""

    lo: float
    span: float

    @classmethod
    def from_data(cls, y: np.ndarray) -> "OutcomeScaling":
        lo, hi = float(np.min(y)), float(np.max(y))
        return cls(lo, hi - lo if hi > lo else 1.0)

    def forward(self, y):
        return (y - self.lo) / self.span - 0.5

    @property
    def offset(self) -> float:
        return self.lo + 0.5 * self.span


def _constant_ensemble(c: float, p: int, n: int, cfg: BartConfig) -> PosteriorEnsemble:
    # Degenerate target: every draw is q stumps with value 0 around offset c.
    q, nd = cfg.q, cfg.n_draw
    roots = np.arange(nd * q, dtype=np.int64).reshape(nd, q)
    size = nd * q
    return PosteriorEnsemble(
        node_var=np.full(size, -1, dtype=np.int32), node_thr=np.full(size, np.nan),
        node_left=np.full(size, -1, dtype=np.int32), node_right=np.full(size, -1, dtype=np.int32),
        node_val=np.zeros(size), roots=roots, feature_count=p, outcome_kind="continuous",
        link="identity", offset=c, scale=1.0,
        sigma=np.full(nd, np.finfo(float).tiny), train_draws=np.full((n, nd), c),
    )


def fit_bart(x: np.ndarray, y: np.ndarray, cfg: BartConfig = BartConfig()) -> PosteriorEnsemble:
    """Continuous-outcome BART by Bayesian backfitting.

    y is mapped to [-0.5, 0.5]; the error-variance prior is calibrated so that
    P(sigma < residual sd of OLS) = ``cfg.lambda_quantile`` on that scale.
    """
    x, y = _check_xy(x, y)
    if y.shape[0] < 10:
        raise ValueError(f"need at least 10 rows, got {y.shape[0]}")
    if np.ptp(y) == 0:
        return _constant_ensemble(float(y[0]), x.shape[1], y.shape[0], cfg)
    sc = OutcomeScaling.from_data(y)
    ys = sc.forward(y)
    sig_hat = ols_sigma(x, ys)
    lam = calibrate_lambda(sig_hat, cfg.nu, cfg.lambda_quantile)
    res = run_chain(
        [ForestSpec(x, cfg, cfg.leaf_sd())], ys,
        n_burn=cfg.n_burn, n_draw=cfg.n_draw, seed=cfg.seed, nu=cfg.nu, lam=lam, sigma2_init=sig_hat**2,
    )
    return _ensemble(
        res.forests[0], res.train_raw[0], kind="continuous", link="identity",
        offset=sc.offset, scale=sc.span, sigma=np.sqrt(res.sigma2) * sc.span,
    )


def probit_offset(y: np.ndarray) -> float:
    return float(stats.norm.ppf(np.clip(np.mean(y), 1e-3, 1 - 1e-3)))


def fit_bart_binary(x: np.ndarray, y: np.ndarray, cfg: BartConfig = BartConfig()) -> PosteriorEnsemble:
    """Probit BART by latent-variable data augmentation (unit error variance).

    Predictions are event probabilities Phi(offset + f(x)); the offset is the
    probit of the observed event rate.
    """
    x, y = _check_xy(x, y)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("binary outcome must be 0/1")
    if y.min() == y.max():
        raise DomainError("binary outcome has a single class")
    off = probit_offset(y)
    res = run_chain(
        [ForestSpec(x, cfg, cfg.leaf_sd(probit=True))], np.zeros(y.shape[0]),
        n_burn=cfg.n_burn, n_draw=cfg.n_draw, seed=cfg.seed, probit_y=y, probit_offset=off,
    )
    return _ensemble(
        res.forests[0], res.train_raw[0], kind="binary", link="probit", offset=off, scale=1.0, sigma=None,
    )
