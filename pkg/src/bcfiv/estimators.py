"""Honest within-node IV estimation: Wald ratio, 2SLS with robust errors, weak-IV screen."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Literal

import numpy as np
from scipy.special import ndtr

from .dataset import Dataset
from .subgroups import SubgroupTree
from .tree import node_masks

Z95 = 1.959963984540054
STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.1, "*"))

Stars = Literal["", "*", "**", "***"]


class SingleArmError(ValueError):
    """The node lacks one of the instrument arms."""


def _arms(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    on = z == 1
    off = z == 0
    if not on.any() or not off.any():
        raise SingleArmError("node must contain both instrument arms")
    return on, off


def itt_hat(y: np.ndarray, z: np.ndarray) -> float:
    """Difference in mean outcome between instrument arms."""
    on, off = _arms(z)
    y = np.asarray(y, dtype=float)
    return float(y[on].mean() - y[off].mean())


def pic_hat(w: np.ndarray, z: np.ndarray) -> float:
    """Difference in treatment uptake between instrument arms (complier share)."""
    return itt_hat(w, z)


def stars_for(p: float) -> Stars:
    for level, s in STAR_LEVELS:
        if p < level:
            return s  # type: ignore[return-value]
    return ""


def normal_p_value(t: float) -> float:
    if math.isnan(t):
        return math.nan
    return float(2.0 * ndtr(-abs(t)))


def weak_iv_test(w: np.ndarray, z: np.ndarray, threshold: float = 10.0) -> tuple[float, bool]:
    """First-stage F (squared t of the slope of w on z, classical errors)."""
    _arms(z)
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    n = w.shape[0]
    if n < 3:
        return math.nan, True
    zc = z - z.mean()
    szz = float(zc @ zc)
    slope = float(zc @ (w - w.mean())) / szz
    resid = w - w.mean() - slope * zc
    s2 = float(resid @ resid) / (n - 2)
    if s2 == 0.0:
        f = math.inf if slope != 0 else math.nan
    else:
        f = slope * slope * szz / s2
    weak = not (f >= threshold)  # nan counts as weak
    return f, weak


@dataclass(frozen=True)
class NodeEstimate:
    node: int
    n: int
    n1: int
    n0: int
    itt_hat: float = math.nan
    pic_hat: float = math.nan
    tau_hat: float = math.nan
    se: float = math.nan
    ci95: tuple[float, float] = (math.nan, math.nan)
    p_value: float = math.nan
    stars: Stars = ""
    first_stage_f: float = math.nan
    weak_flag: bool = True
    discarded: bool = True
    reason: str = ""

    def covers(self, value: float) -> bool:
        lo, hi = self.ci95
        return bool(lo <= value <= hi)

    def to_dict(self) -> dict:
        d = {k: _finite_or_none(v) for k, v in asdict(self).items()}
        d["ci95"] = [_finite_or_none(v) for v in self.ci95]
        return d


def _finite_or_none(v):
    # JSON has no nan/inf; unavailable statistics are written as null.
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def tsls(y: np.ndarray, w: np.ndarray, z: np.ndarray, node: int = -1, weak_threshold: float = 10.0) -> NodeEstimate:
    """Just-identified 2SLS of y on w instrumented by z, with intercept.

    The point estimate is computed as a genuine two-stage least-squares fit;
    its standard error is the heteroskedasticity-robust (HC0) sandwich
    ``sum(u^2 (z - zbar)^2) / (sum((z - zbar)(w - wbar)))^2`` with
    ``u = y - alpha - tau w``.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    n = y.shape[0]
    try:
        on, off = _arms(z)
    except SingleArmError:
        return NodeEstimate(node, n, int((z == 1).sum()), int((z == 0).sum()), reason="single instrument arm")
    n1, n0 = int(on.sum()), int(off.sum())
    itt = itt_hat(y, z)
    pic = pic_hat(w, z)
    f, weak = weak_iv_test(w, z, weak_threshold)
    if pic == 0.0:
        return NodeEstimate(node, n, n1, n0, itt, pic, first_stage_f=f, reason="no first stage")
    ones = np.ones(n)
    first = np.column_stack([ones, z])
    gamma, *_ = np.linalg.lstsq(first, w, rcond=None)
    w_fit = first @ gamma
    (alpha, tau), *_ = np.linalg.lstsq(np.column_stack([ones, w_fit]), y, rcond=None)
    u = y - alpha - tau * w
    zc = z - z.mean()
    szw = float(zc @ (w - w.mean()))
    se = math.sqrt(float(np.sum(u * u * zc * zc))) / abs(szw)
    if se > 0:
        t = tau / se
    else:
        t = math.inf if tau != 0 else math.nan
    p = normal_p_value(t) if not math.isinf(t) else 0.0
    return NodeEstimate(
        node=node, n=n, n1=n1, n0=n0, itt_hat=itt, pic_hat=pic, tau_hat=float(tau), se=se,
        ci95=(float(tau - Z95 * se), float(tau + Z95 * se)), p_value=p,
        stars=stars_for(p) if not math.isnan(p) else "",
        first_stage_f=f, weak_flag=weak, discarded=False,
    )


def wald(y: np.ndarray, w: np.ndarray, z: np.ndarray) -> float:
    """Method-of-moments ratio of arm differences."""
    return itt_hat(y, z) / pic_hat(w, z)


@dataclass(frozen=True, eq=False)
class AnnotatedTree:
    """A subgroup tree with an honest estimate at every node (root included)."""

    subgroups: SubgroupTree
    estimates: tuple[NodeEstimate, ...]
    inference_shares: tuple[float, ...]
    min_node: int
    weak_threshold: float

    def __post_init__(self):
        if len(self.estimates) != len(self.subgroups.tree):
            raise ValueError("one estimate per node required")

    @property
    def root(self) -> NodeEstimate:
        return self.estimates[self.subgroups.tree.root]

    def to_dict(self) -> dict:
        d = self.subgroups.to_dict()
        for nd in d["nodes"]:
            nd["inference_share"] = self.inference_shares[nd["id"]]
            nd["estimate"] = self.estimates[nd["id"]].to_dict()
        d["min_node"] = self.min_node
        d["weak_f_threshold"] = self.weak_threshold
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def render(self) -> str:
        """Text tree, one node per line: ``predicate: CACE <tau><stars> (se) | share``."""
        lines = []
        st = self.subgroups
        for nd in st.tree.preorder():
            e = self.estimates[nd.id]
            head = "  " * nd.depth + st.describe(nd.id)
            share = f"share {100 * self.inference_shares[nd.id]:.1f}%  n={e.n}"
            if e.discarded and math.isnan(e.tau_hat):
                body = f"CACE n/a [discarded: {e.reason}]"
            else:
                body = f"CACE {e.tau_hat:+.3f}{e.stars} ({e.se:.3f})"
                if e.discarded:
                    body += f" [discarded: {e.reason}]"
            lines.append(f"{head}: {body} | {share}")
        return "\n".join(lines)

    def unit_estimates(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per row: (tau, ci_lo, ci_hi, node) of the deepest non-discarded node on its path.

        Rows whose whole path is discarded get NaN estimates and node -1.
        """
        t = self.subgroups.tree
        masks = node_masks(t, x)
        n = np.asarray(x).shape[0]
        tau = np.full(n, np.nan)
        lo = np.full(n, np.nan)
        hi = np.full(n, np.nan)
        node = np.full(n, -1, dtype=np.int64)
        for nd in t.preorder():  # parents precede children, so deeper nodes overwrite
            e = self.estimates[nd.id]
            if e.discarded:
                continue
            m = masks[nd.id]
            tau[m] = e.tau_hat
            lo[m] = e.ci95[0]
            hi[m] = e.ci95[1]
            node[m] = nd.id
        return tau, lo, hi, node


def infer_tree(st: SubgroupTree, inference: Dataset, min_node: int = 50, weak_threshold: float = 10.0) -> AnnotatedTree:
    """Estimate the CACE of every node on the (held-out) inference sample.

    Nodes with fewer than ``min_node`` rows, a weak first stage, a missing
    instrument arm or no first stage at all are kept but marked discarded.
    """
    masks = node_masks(st.tree, inference.x)
    n = max(1, inference.n)
    est = []
    for j, m in enumerate(masks):
        e = tsls(inference.y[m], inference.w[m], inference.z[m], node=j, weak_threshold=weak_threshold)
        reasons = [e.reason] if e.reason else []
        if e.n < min_node:
            reasons.append(f"n<{min_node}")
        if not e.reason and e.weak_flag:
            reasons.append(f"weak first stage (F<{weak_threshold:g})")
        if reasons:
            e = replace(e, discarded=True, reason="; ".join(reasons))
        est.append(e)
    shares = tuple(float(m.sum()) / n for m in masks)
    return AnnotatedTree(st, tuple(est), shares, min_node, weak_threshold)

