"""ID3 decision trees with an output-entropy penalty, Priority, and DP-ID3.

Split selection at a node maximizes ``C(A) - lam * H(Y_hat_A)``, where
``C`` is the information gain (nats) or Gini decrease of splitting on
``A`` and ``H(Y_hat_A)`` is the entropy of the predictions the whole
partially built tree would make on the training set if the node were split
on ``A`` into majority leaves.  Not splitting is a candidate too (unless
``null_split`` is off), scored ``-lam * H(Y_hat)`` of the current tree with
zero homogeneity gain, so a node is split only when some feature scores
strictly higher.

Growth is depth first, children in code order.  Ties go to the lowest
feature index and the lowest class index throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numpy as np

from .core import Dataset, FeatureSchema, SchemaError, make_rng

__all__ = [
    "Leaf",
    "Internal",
    "DecisionTree",
    "TreeConfig",
    "train_id3",
    "train_priority",
    "train_dp_id3",
    "root_score_table",
    "exponential_mechanism_probs",
    "dp_quality",
    "predict",
    "predict_batch",
]

TIE_TOL = 1e-12


@dataclass(frozen=True)
class Leaf:
    class_counts: tuple[float, ...]
    predicted_class: int
    depth: int

    @property
    def total(self) -> float:
        return float(sum(self.class_counts))


@dataclass(frozen=True)
class Internal:
    feature: int
    children: tuple["Node", ...]
    class_counts: tuple[float, ...]
    depth: int


Node = Union[Leaf, Internal]


@dataclass
class TreeConfig:
    criterion: str = "infogain"  # or "gini"
    lam: float = 0.0
    max_depth: int = 5
    min_samples_split: int = 2
    null_split: bool = True  # "do not split" competes with the features

    def __post_init__(self):
        if self.criterion not in ("infogain", "gini"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


def _argmax(values) -> int:
    # lowest index among maxima
    return int(np.argmax(np.asarray(values)))


def _node_to_dict(node: Node) -> dict:
    if isinstance(node, Leaf):
        return {
            "type": "leaf",
            "class_counts": [float(c) for c in node.class_counts],
            "predicted_class": node.predicted_class,
            "depth": node.depth,
        }
    return {
        "type": "internal",
        "feature": node.feature,
        "class_counts": [float(c) for c in node.class_counts],
        "depth": node.depth,
        "children": [_node_to_dict(c) for c in node.children],
    }


def _node_from_dict(obj: dict) -> Node:
    if obj["type"] == "leaf":
        return Leaf(tuple(obj["class_counts"]), int(obj["predicted_class"]), int(obj["depth"]))
    return Internal(
        int(obj["feature"]),
        tuple(_node_from_dict(c) for c in obj["children"]),
        tuple(obj["class_counts"]),
        int(obj["depth"]),
    )


@dataclass(frozen=True, eq=False)
class DecisionTree:
    root: Node
    schema: FeatureSchema
    criterion: str
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.schema.label.num_classes

    def leaves(self) -> list[Leaf]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def paths(self):
        """Yield ``(path, leaf)`` with ``path`` a tuple of (feature, code) pairs."""
        stack = [((), self.root)]
        while stack:
            path, node = stack.pop()
            if isinstance(node, Leaf):
                yield path, node
            else:
                for code in reversed(range(len(node.children))):
                    stack.append((path + ((node.feature, code),), node.children[code]))

    def depth(self) -> int:
        return max(leaf.depth for leaf in self.leaves())

    def to_dict(self) -> dict:
        return {
            "format": "decision-tree/1",
            "schema": self.schema.to_dict(),
            "criterion": self.criterion,
            "meta": self.meta,
            "root": _node_to_dict(self.root),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "DecisionTree":
        return cls(
            _node_from_dict(obj["root"]),
            FeatureSchema.from_dict(obj["schema"]),
            obj["criterion"],
            obj.get("meta", {}),
        )


# ---------------------------------------------------------------------------
# Split criteria


def _entropy_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    q = counts[counts > 0] / total
    return float(-np.sum(q * np.log(q)))


def _gini_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    q = counts / total
    return float(1.0 - np.sum(q * q))


def _homogeneity_gain(parent: np.ndarray, children: np.ndarray, criterion: str) -> float:
    impurity = _entropy_counts if criterion == "infogain" else _gini_counts
    n = parent.sum()
    return impurity(parent) - sum(c.sum() / n * impurity(c) for c in children)


def _check_tree_data(train: Dataset) -> tuple[np.ndarray, np.ndarray, int]:
    if not train.schema.label.is_classification:
        raise SchemaError("decision trees need a classification label")
    for f in train.schema.features:
        if not f.is_categorical:
            raise SchemaError(f"continuous feature {f.name!r}: trees support categorical features only")
    return train.rows.astype(np.int64), train.labels.astype(np.int64), train.schema.label.num_classes


class _Grower:
    """Greedy depth-first induction sharing a whole-tree prediction vector."""

    def __init__(self, train: Dataset, config: TreeConfig, sensitive_min_depth: int = 0):
        self.x, self.y, self.k = _check_tree_data(train)
        self.schema = train.schema
        self.config = config
        self.sensitive_min_depth = sensitive_min_depth
        self.cards = [f.cardinality for f in train.schema.features]
        root_major = _argmax(np.bincount(self.y, minlength=self.k))
        self.pred = np.full(self.y.size, root_major, dtype=np.int64)
        self.pred_counts = np.bincount(self.pred, minlength=self.k).astype(float)

    def eligible(self, used: frozenset, depth: int) -> list[int]:
        out = []
        for a in range(len(self.cards)):
            if a in used:
                continue
            if a == self.schema.sensitive_index and depth < self.sensitive_min_depth:
                continue
            out.append(a)
        return out

    def candidate(self, idx: np.ndarray, a: int, parent_major: int):
        """(gain, H(Y_hat) if split on a, child majorities, child counts)."""
        codes = self.x[idx, a]
        yk = self.y[idx]
        card = self.cards[a]
        child_counts = np.zeros((card, self.k))
        np.add.at(child_counts, (codes, yk), 1.0)
        parent_counts = child_counts.sum(axis=0)
        majors = np.array(
            [_argmax(c) if c.sum() > 0 else parent_major for c in child_counts], dtype=np.int64
        )
        gain = _homogeneity_gain(parent_counts, child_counts, self.config.criterion)
        new_counts = self.pred_counts - np.bincount(self.pred[idx], minlength=self.k)
        new_counts = new_counts + np.bincount(majors[codes], minlength=self.k)
        return gain, _entropy_counts(new_counts), majors, child_counts

    def score_table(self, idx: np.ndarray, depth: int, used: frozenset) -> list[dict]:
        counts = np.bincount(self.y[idx], minlength=self.k)
        major = _argmax(counts)
        rows = []
        for a in self.eligible(used, depth):
            gain, h, _, _ = self.candidate(idx, a, major)
            rows.append({"feature": a, "gain": gain, "entropy": h, "score": gain - self.config.lam * h})
        return rows

    def build(self, idx: np.ndarray, depth: int, used: frozenset) -> Node:
        counts = np.bincount(self.y[idx], minlength=self.k).astype(float)
        major = _argmax(counts)
        cfg = self.config
        feats = self.eligible(used, depth)
        stop = (
            np.count_nonzero(counts) <= 1
            or depth >= cfg.max_depth
            or idx.size < cfg.min_samples_split
            or not feats
        )
        if stop:
            return Leaf(tuple(counts), major, depth)
        best = None
        for a in feats:
            gain, h, majors, child_counts = self.candidate(idx, a, major)
            score = gain - cfg.lam * h
            if best is None or score > best[0] + TIE_TOL:
                best = (score, a, majors, child_counts)
        null_score = -cfg.lam * _entropy_counts(self.pred_counts)
        if cfg.null_split and best[0] <= null_score + TIE_TOL:
            return Leaf(tuple(counts), major, depth)
        _, a, majors, child_counts = best
        codes = self.x[idx, a]
        self.pred_counts -= np.bincount(self.pred[idx], minlength=self.k)
        self.pred[idx] = majors[codes]
        self.pred_counts += np.bincount(self.pred[idx], minlength=self.k)
        children = []
        for code in range(self.cards[a]):
            sub = idx[codes == code]
            if sub.size == 0:
                children.append(Leaf(tuple(child_counts[code]), int(majors[code]), depth + 1))
            else:
                children.append(self.build(sub, depth + 1, used | {a}))
        return Internal(a, tuple(children), tuple(counts), depth)


def train_id3(train: Dataset, config: TreeConfig) -> DecisionTree:
    """Entropy-penalized ID3 (``lam = 0`` gives plain ID3 with a zero-gain stop)."""
    g = _Grower(train, config)
    root = g.build(np.arange(train.n), 0, frozenset())
    return DecisionTree(root, train.schema, config.criterion, {"lambda": config.lam})


def train_priority(train: Dataset, config: TreeConfig, min_depth_for_sensitive: int) -> DecisionTree:
    """As :func:`train_id3` but the sensitive feature may only split at depth >= the given minimum."""
    if min_depth_for_sensitive < 0:
        raise ValueError("min_depth_for_sensitive must be >= 0")
    g = _Grower(train, config, min_depth_for_sensitive)
    root = g.build(np.arange(train.n), 0, frozenset())
    meta = {"lambda": config.lam, "priority_min_depth": min_depth_for_sensitive}
    return DecisionTree(root, train.schema, config.criterion, meta)


def root_score_table(train: Dataset, config: TreeConfig) -> list[dict]:
    """Per-feature ``gain``, ``entropy`` and ``score`` at the root."""
    g = _Grower(train, config)
    return g.score_table(np.arange(train.n), 0, frozenset())


# ---------------------------------------------------------------------------
# DP-ID3


def dp_quality(child_counts: np.ndarray, criterion: str) -> float:
    """Split quality for the exponential mechanism (higher is better)."""
    child_counts = np.asarray(child_counts, dtype=float)
    if criterion == "infogain":
        tot = child_counts.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(child_counts > 0, child_counts * np.log(child_counts / tot), 0.0)
        return float(terms.sum())
    tot = child_counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.where(tot > 0, (child_counts**2).sum(axis=1) / np.where(tot > 0, tot, 1.0), 0.0)
    return float(-(tot - sq).sum())


def dp_sensitivity(criterion: str, n_public: int) -> float:
    if criterion == "infogain":
        return math.log(n_public + 1.0) + 1.0
    return 2.0


def exponential_mechanism_probs(qualities, epsilon: float, sensitivity: float) -> np.ndarray:
    q = np.asarray(qualities, dtype=float)
    logits = epsilon * q / (2.0 * sensitivity)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def train_dp_id3(train: Dataset, epsilon: float, config: TreeConfig, seed: int) -> DecisionTree:
    """Differentially private ID3.

    Every level gets ``eps' = epsilon / (2 (max_depth + 1))`` twice: once for
    a Laplace node count (stopping rule) and once for either the
    exponential-mechanism split choice or the Laplace leaf class counts.
    Nodes on one level are disjoint, so a root-to-leaf path accounts for the
    whole spend.  The training-set size is treated as public and bounds the
    information-gain sensitivity.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    x, y, k = _check_tree_data(train)
    rng = make_rng(seed)
    depth_max = config.max_depth
    levels = 2 * (depth_max + 1)
    eps_level = epsilon / levels
    sens = dp_sensitivity(config.criterion, train.n)
    cards = [f.cardinality for f in train.schema.features]
    worst = [0]

    def leaf(idx, depth, releases):
        counts = np.bincount(y[idx], minlength=k).astype(float)
        noisy = np.maximum(counts + rng.laplace(0.0, 1.0 / eps_level, size=k), 0.0)
        worst[0] = max(worst[0], releases + 1)
        return Leaf(tuple(float(c) for c in noisy), _argmax(noisy), depth)

    def build(idx, depth, used, releases):
        feats = [a for a in range(len(cards)) if a not in used]
        noisy_n = idx.size + rng.laplace(0.0, 1.0 / eps_level)
        releases += 1
        t = max((cards[a] for a in feats), default=1)
        if not feats or depth >= depth_max or noisy_n / (t * k) < math.sqrt(2.0) / eps_level:
            return leaf(idx, depth, releases)
        quals = []
        for a in feats:
            cc = np.zeros((cards[a], k))
            np.add.at(cc, (x[idx, a], y[idx]), 1.0)
            quals.append(dp_quality(cc, config.criterion))
        probs = exponential_mechanism_probs(quals, eps_level, sens)
        a = feats[int(rng.choice(len(feats), p=probs))]
        codes = x[idx, a]
        children = tuple(
            build(idx[codes == c], depth + 1, used | {a}, releases + 1) for c in range(cards[a])
        )
        counts = np.bincount(y[idx], minlength=k).astype(float)
        return Internal(a, children, tuple(counts * 0.0), depth)

    root = build(np.arange(train.n), 0, frozenset(), 0)
    spent = epsilon if worst[0] == levels else float(Fraction(worst[0], levels) * Fraction(epsilon))
    meta = {
        "mechanism": "dp-id3",
        "epsilon": epsilon,
        "epsilon_per_release": eps_level,
        "releases_on_worst_path": worst[0],
        "epsilon_spent": spent,
    }
    return DecisionTree(root, train.schema, config.criterion, meta)


# ---------------------------------------------------------------------------
# Inference


def _route(node: Node, row) -> tuple[Leaf, bool]:
    flagged = False
    while isinstance(node, Internal):
        code = int(row[node.feature])
        if 0 <= code < len(node.children):
            node = node.children[code]
        else:
            sizes = [_subtree_total(c) for c in node.children]
            node = node.children[_argmax(sizes)]
            flagged = True
    return node, flagged


def _subtree_total(node: Node) -> float:
    if isinstance(node, Leaf):
        return node.total
    return sum(_subtree_total(c) for c in node.children)


def _confidence(leaf: Leaf, k: int) -> np.ndarray:
    counts = np.asarray(leaf.class_counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return np.full(k, 1.0 / k)
    return counts / total


def predict(tree: DecisionTree, row) -> tuple[int, np.ndarray, bool]:
    """``(class, confidence vector, rerouted)`` for one row."""
    leaf, flagged = _route(tree.root, row)
    return leaf.predicted_class, _confidence(leaf, tree.num_classes), flagged


def leaf_for(tree: DecisionTree, row) -> Leaf:
    return _route(tree.root, row)[0]


def predict_batch(tree: DecisionTree, rows) -> tuple[np.ndarray, np.ndarray]:
    """Classes and confidence vectors for many rows."""
    rows = np.atleast_2d(np.asarray(rows))
    k = tree.num_classes
    classes = np.empty(rows.shape[0], dtype=np.int64)
    conf = np.empty((rows.shape[0], k))
    leaf_ids = apply(tree, rows)
    for lid, leaf in enumerate(tree.leaves()):
        hit = leaf_ids == lid
        if hit.any():
            classes[hit] = leaf.predicted_class
            conf[hit] = _confidence(leaf, k)
    return classes, conf


def apply(tree: DecisionTree, rows) -> np.ndarray:
    """Index into ``tree.leaves()`` of the leaf each row lands in."""
    rows = np.atleast_2d(np.asarray(rows))
    leaves = tree.leaves()
    ids = {id(leaf): i for i, leaf in enumerate(leaves)}
    out = np.empty(rows.shape[0], dtype=np.int64)

    def walk(node, idx):
        if idx.size == 0:
            return
        if isinstance(node, Leaf):
            out[idx] = ids[id(node)]
            return
        codes = rows[idx, node.feature].astype(np.int64)
        ok = (codes >= 0) & (codes < len(node.children))
        for c in range(len(node.children)):
            walk(node.children[c], idx[ok & (codes == c)])
        if not ok.all():
            sizes = [_subtree_total(ch) for ch in node.children]
            walk(node.children[_argmax(sizes)], idx[~ok])

    walk(tree.root, np.arange(rows.shape[0]))
    return out
