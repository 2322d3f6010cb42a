"""Subgroup discovery on fitted per-unit targets, and matching against known cells."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .tree import CartConfig, DecisionTree, Predicate, fit_cart, format_predicate, node_masks, node_predicate


@dataclass(frozen=True, eq=False)
class SubgroupTree:
    """A shallow regression tree over covariates, with every node described.

    ``predicates[j]`` is the canonical conjunction of node ``j`` and
    ``shares[j]`` the fraction of discovery units that fall in it.
    """

    tree: DecisionTree
    predicates: tuple[Predicate, ...]
    shares: tuple[float, ...]
    covariate_names: tuple[str, ...] = ()
    max_depth: int = 2

    def __post_init__(self):
        if self.tree.max_depth > self.max_depth:
            raise ValueError(f"tree depth {self.tree.max_depth} exceeds {self.max_depth}")
        if len(self.predicates) != len(self.tree) or len(self.shares) != len(self.tree):
            raise ValueError("one predicate and one share per node required")
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"x{j + 1}" for j in range(self.tree.n_features)))

    def describe(self, node_id: int) -> str:
        return format_predicate(self.predicates[node_id], self.covariate_names)

    def to_dict(self) -> dict:
        d = self.tree.to_dict()
        for nd in d["nodes"]:
            j = nd["id"]
            nd["share"] = self.shares[j]
            nd["predicate"] = {
                self.covariate_names[f]: [_inf(lo), _inf(hi)] for f, (lo, hi) in self.predicates[j].items()
            }
            nd["description"] = self.describe(j)
        d["covariate_names"] = list(self.covariate_names)
        d["max_depth"] = self.max_depth
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def render(self) -> str:
        """One line per node (preorder), indented by depth: ``predicate  [share]``."""
        lines = []
        for nd in self.tree.preorder():
            lines.append(f"{'  ' * nd.depth}{self.describe(nd.id)}  [share {self.shares[nd.id]:.3f}]")
        return "\n".join(lines)


def _inf(v: float):
    # JSON has no infinities; open ends are written as null.
    return None if math.isinf(v) else v


def subgroup_tree(t: DecisionTree, x: np.ndarray, names: Sequence[str] = (), max_depth: int | None = None) -> SubgroupTree:
    masks = node_masks(t, x)
    n = max(1, x.shape[0])
    return SubgroupTree(
        tree=t,
        predicates=tuple(node_predicate(t, j) for j in range(len(t))),
        shares=tuple(float(m.sum()) / n for m in masks),
        covariate_names=tuple(names),
        max_depth=t.max_depth if max_depth is None else max_depth,
    )


def discover(x: np.ndarray, targets: np.ndarray, cfg: CartConfig = CartConfig(), names: Sequence[str] = ()) -> SubgroupTree:
    """Fit a shallow CART to the per-unit targets and describe every node."""
    x = np.asarray(x, dtype=float)
    t = fit_cart(x, np.asarray(targets, dtype=float), cfg)
    return subgroup_tree(t, x, names, cfg.max_depth)


def _binary_cells(pred: Predicate, features: Sequence[int]) -> frozenset:
    """The set of {0,1} assignments to ``features`` admitted by ``pred``."""
    allowed = []
    for f in features:
        lo, hi = pred.get(f, (-math.inf, math.inf))
        allowed.append(tuple(v for v in (0, 1) if lo <= v < hi))
    out = {()}
    for vals in allowed:
        out = {c + (v,) for c in out for v in vals}
    return frozenset(out)


def _admits_binary(pred: Predicate, f: int) -> tuple[int, ...]:
    lo, hi = pred.get(f, (-math.inf, math.inf))
    return tuple(v for v in (0, 1) if lo <= v < hi)


def match_truth(
    st: SubgroupTree,
    truth: Mapping[str, Mapping[int, int]],
    rule: Literal["exact", "contains"] = "exact",
) -> dict[str, bool]:
    """Which true cells appear as a node of the tree.

    Each truth is a conjunction ``{feature: value}`` over binary covariates.
    Under ``exact`` a truth is matched when some node's predicate, evaluated
    on binary covariate values, selects exactly the same cells: it admits the
    truth's values on the truth's features and places no binding restriction
    on any other feature. ``contains`` only asks that some node other than
    the root select a subset of the truth cell.
    """
    out: dict[str, bool] = {}
    for name, cell in truth.items():
        feats = sorted(cell)
        want = frozenset({tuple(cell[f] for f in feats)})
        hit = False
        for j, pred in enumerate(st.predicates):
            others = [f for f in pred if f not in cell]
            if any(len(_admits_binary(pred, f)) == 0 for f in others):
                continue  # selects no binary unit
            got = _binary_cells(pred, feats)
            if rule == "exact":
                free = all(len(_admits_binary(pred, f)) == 2 for f in others)
                if free and got == want:
                    hit = True
            elif rule == "contains":
                if j != st.tree.root and got and got <= want:
                    hit = True
            else:
                raise ValueError(f"unknown match rule {rule!r}")
            if hit:
                break
        out[name] = hit
    return out
