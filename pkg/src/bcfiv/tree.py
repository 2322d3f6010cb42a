"""Axis-aligned binary decision trees and greedy CART fitting.

Split convention everywhere in the package: a row goes left when
``x[feature] < threshold`` and right otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

# feature -> (lower, upper): the region lower <= x < upper
Predicate = dict[int, tuple[float, float]]


@dataclass(frozen=True)
class SplitRule:
    feature_index: int
    threshold: float

    def goes_left(self, value: float) -> bool:
        return value < self.threshold


@dataclass(frozen=True)
class Node:
    id: int
    depth: int
    row_count: int = 0
    value: float = 0.0
    feature: int = -1
    threshold: float = math.nan
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def rule(self) -> SplitRule | None:
        return None if self.is_leaf else SplitRule(self.feature, self.threshold)


@dataclass(frozen=True, eq=True)
class DecisionTree:
    """Arena of nodes; node ``root`` is the root, children are referenced by id."""

    nodes: tuple[Node, ...]
    n_features: int
    root: int = 0
    _parent: tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        parent = [-2] * len(self.nodes)
        parent[self.root] = -1
        for nd in self.nodes:
            if nd.id != self.nodes.index(nd):
                raise ValueError("node ids must equal their arena position")
            if not nd.is_leaf:
                if not 0 <= nd.feature < self.n_features:
                    raise ValueError(f"node {nd.id}: feature {nd.feature} out of range")
                for c in (nd.left, nd.right):
                    if not 0 <= c < len(self.nodes) or parent[c] != -2 or c == self.root:
                        raise ValueError(f"node {nd.id}: bad child {c}")
                    parent[c] = nd.id
        if any(p == -2 for p in parent):
            raise ValueError("tree has unreachable nodes")
        object.__setattr__(self, "_parent", tuple(parent))
        for nd in self.nodes:
            expect = 0 if nd.id == self.root else self.nodes[parent[nd.id]].depth + 1
            if nd.depth != expect:
                raise ValueError(f"node {nd.id}: depth {nd.depth}, expected {expect}")

    @classmethod
    def stump(cls, n_features: int, value: float = 0.0, row_count: int = 0) -> "DecisionTree":
        return cls((Node(0, 0, row_count, value),), n_features)

    def __len__(self) -> int:
        return len(self.nodes)

    def parent(self, node_id: int) -> int:
        return self._parent[node_id]

    @property
    def leaves(self) -> list[int]:
        return [nd.id for nd in self.nodes if nd.is_leaf]

    @property
    def max_depth(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def preorder(self) -> Iterator[Node]:
        stack = [self.root]
        while stack:
            nd = self.nodes[stack.pop()]
            yield nd
            if not nd.is_leaf:
                stack.append(nd.right)
                stack.append(nd.left)

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            d = asdict(nd)
            if nd.is_leaf:
                d["threshold"] = None
            nodes.append(d)
        return {"n_features": self.n_features, "root": self.root, "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        nodes = []
        for nd in d["nodes"]:
            nd = dict(nd)
            if nd.get("threshold") is None:
                nd["threshold"] = math.nan
            nodes.append(Node(**nd))
        return cls(tuple(nodes), int(d["n_features"]), int(d.get("root", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, s: str) -> "DecisionTree":
        return cls.from_dict(json.loads(s))


def assign_leaf(t: DecisionTree, x) -> int:
    """Route one covariate row to its leaf and return the leaf id."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != t.n_features:
        raise ValueError(f"row has {x.shape[0]} features, tree expects {t.n_features}")
    nd = t.nodes[t.root]
    while not nd.is_leaf:
        nd = t.nodes[nd.left if x[nd.feature] < nd.threshold else nd.right]
    return nd.id


def node_masks(t: DecisionTree, x: np.ndarray) -> list[np.ndarray]:
    """Boolean membership of every row in every node (internal nodes included)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != t.n_features:
        raise ValueError(f"expected an (M, {t.n_features}) matrix, got {x.shape}")
    masks: list[np.ndarray | None] = [None] * len(t)
    masks[t.root] = np.ones(x.shape[0], dtype=bool)
    for nd in t.preorder():
        if not nd.is_leaf:
            go_left = x[:, nd.feature] < nd.threshold
            masks[nd.left] = masks[nd.id] & go_left
            masks[nd.right] = masks[nd.id] & ~go_left
    return masks  # type: ignore[return-value]


def apply(t: DecisionTree, x: np.ndarray) -> np.ndarray:
    """Leaf id for each row of ``x``."""
    out = np.full(np.asarray(x).shape[0], -1, dtype=np.int64)
    for nid, m in enumerate(node_masks(t, x)):
        if t.nodes[nid].is_leaf:
            out[m] = nid
    return out


def predict(t: DecisionTree, x: np.ndarray) -> np.ndarray:
    values = np.array([nd.value for nd in t.nodes])
    return values[apply(t, x)]


def node_predicate(t: DecisionTree, node_id: int) -> Predicate:
    """Canonical conjunction describing the region of any node.

    Repeated splits on a feature are intersected into one interval; features
    that are never split on along the path are omitted.
    """
    if not 0 <= node_id < len(t):
        raise ValueError(f"unknown node id {node_id}")
    bounds: dict[int, list[float]] = {}
    child = node_id
    par = t.parent(child)
    while par >= 0:
        p = t.nodes[par]
        lo, hi = bounds.setdefault(p.feature, [-math.inf, math.inf])
        if child == p.left:
            bounds[p.feature][1] = min(hi, p.threshold)
        else:
            bounds[p.feature][0] = max(lo, p.threshold)
        child, par = par, t.parent(par)
    return {f: (b[0], b[1]) for f, b in sorted(bounds.items())}


def leaf_path_predicate(t: DecisionTree, leaf_id: int) -> Predicate:
    if not 0 <= leaf_id < len(t) or not t.nodes[leaf_id].is_leaf:
        raise ValueError(f"{leaf_id} is not a leaf of this tree")
    return node_predicate(t, leaf_id)


def format_predicate(pred: Predicate, names: tuple[str, ...] | list[str] | None = None) -> str:
    if not pred:
        return "all"
    parts = []
    for f, (lo, hi) in pred.items():
        nm = names[f] if names is not None else f"x{f + 1}"
        if lo > -math.inf:
            parts.append(f"{nm} >= {lo:g}")
        if hi < math.inf:
            parts.append(f"{nm} < {hi:g}")
    return " & ".join(parts)


@dataclass(frozen=True)
class CartConfig:
    """Greedy CART settings.

    A split is accepted when its SSE reduction is positive and at least
    ``max(min_gain, cp * root_sse)``.
    """

    max_depth: int = 2
    min_leaf: int = 25
    min_gain: float = 0.0
    cp: float = 0.01

    def __post_init__(self):
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("max_depth and min_leaf must be >= 1")
        if self.min_gain < 0 or self.cp < 0:
            raise ValueError("min_gain and cp must be >= 0")


def _best_split(x: np.ndarray, t: np.ndarray, min_leaf: int, parent_term: float):
    n, p = x.shape
    best = (-math.inf, -1, math.nan)
    if n < 2 * min_leaf:
        return best
    sizes = np.arange(1, n)
    size_ok = (sizes >= min_leaf) & (sizes <= n - min_leaf)
    for f in range(p):
        order = np.lexsort((t, x[:, f]))
        xs, ts = x[order, f], t[order]
        cs = np.cumsum(ts)
        ok = size_ok & (xs[1:] > xs[:-1])
        if not ok.any():
            continue
        sl = cs[:-1]
        sr = cs[-1] - sl
        gain = sl * sl / sizes + sr * sr / (n - sizes) - parent_term
        gain = np.where(ok, gain, -math.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            best = (float(gain[i]), f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def fit_cart(x: np.ndarray, target: np.ndarray, cfg: CartConfig = CartConfig()) -> DecisionTree:
    """Grow a regression tree minimising within-node squared error.

    Candidate thresholds are midpoints between consecutive distinct values.
    Equal gains are resolved in favour of the lower feature index, then the
    lower threshold. The result does not depend on the row order.
    """
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    if x.ndim != 2 or target.shape != (x.shape[0],):
        raise ValueError(f"shape mismatch: x {x.shape}, target {target.shape}")
    n = x.shape[0]
    if n < 2 * cfg.min_leaf:
        raise ValueError(f"need at least {2 * cfg.min_leaf} rows for min_leaf={cfg.min_leaf}, got {n}")
    if not np.all(np.isfinite(target)):
        raise ValueError("target contains non-finite values")

    def sse(v):
        m = math.fsum(v) / v.size
        return math.fsum((v - m) ** 2)

    threshold = max(cfg.min_gain, cfg.cp * sse(np.sort(target)))
    nodes: list[dict] = []

    def grow(rows: np.ndarray, depth: int) -> int:
        tv = np.sort(target[rows])
        nid = len(nodes)
        nodes.append(dict(id=nid, depth=depth, row_count=int(rows.size), value=math.fsum(tv) / tv.size))
        if depth >= cfg.max_depth or np.ptp(tv) == 0:
            return nid
        total = math.fsum(tv)
        gain, f, thr = _best_split(x[rows], target[rows], cfg.min_leaf, total * total / tv.size)
        if f < 0 or not gain > 0 or gain < threshold:
            return nid
        go_left = x[rows, f] < thr
        nodes[nid].update(feature=f, threshold=thr)
        nodes[nid]["left"] = grow(rows[go_left], depth + 1)
        nodes[nid]["right"] = grow(rows[~go_left], depth + 1)
        return nid

    grow(np.arange(n), 0)
    return DecisionTree(tuple(Node(**d) for d in nodes), x.shape[1])


def total_sse(t: DecisionTree, x: np.ndarray, target: np.ndarray) -> float:
    leaf = apply(t, x)
    out = 0.0
    for lid in np.unique(leaf):
        v = target[leaf == lid]
        out += float(np.sum((v - v.mean()) ** 2))
    return out
