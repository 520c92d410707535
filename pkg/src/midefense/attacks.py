"""Attribute-inference (model inversion) attacks on a sensitive categorical feature.

Every attack produces a score vector over the candidate codes of the
sensitive feature per instance; the prediction is its argmax with ties
going to the lowest code.  The MAP attacks weight candidates by the
attacker-known marginal prior of the sensitive feature.
"""

from __future__ import annotations

import io
import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Dataset, FeatureSchema, encode, encoding_for, format_real
from .linreg import LinearModel
from .nn import Regressor, train_regressor
from .tree import DecisionTree, apply, predict_batch

__all__ = [
    "SensitivePrior",
    "AttackResult",
    "map_attack_linreg",
    "map_attack_tree",
    "prior_baseline",
    "run_map_linreg",
    "run_map_tree",
    "run_prior_baseline",
    "InversionConfig",
    "InversionModel",
    "train_inversion_model",
    "invert",
    "run_knowledge_alignment",
    "results_to_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensitivePrior:
    probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("prior must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"prior must be non-negative and sum to 1, got sum {p.sum()!r}")
        object.__setattr__(self, "probs", tuple(float(v) for v in p))

    @property
    def k(self) -> int:
        return len(self.probs)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.probs)

    @classmethod
    def uniform(cls, k: int) -> "SensitivePrior":
        return cls(tuple([1.0 / k] * k))

    @classmethod
    def from_dataset(cls, data: Dataset) -> "SensitivePrior":
        """Empirical marginal of the sensitive codes."""
        k = data.schema.sensitive.cardinality
        counts = np.bincount(data.sensitive_codes, minlength=k).astype(float)
        return cls(tuple(counts / counts.sum()))


@dataclass(frozen=True, eq=False)
class AttackResult:
    """Per-instance scores for one attack on one split."""

    true_codes: np.ndarray
    scores: np.ndarray  # n x k, rows sum to 1
    split: str = "test"
    flagged: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.scores, dtype=float))
        t = np.asarray(self.true_codes, dtype=np.int64)
        if s.shape[0] != t.shape[0]:
            raise ValueError("one score vector per instance required")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "true_codes", t)
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(t.shape[0], dtype=bool))

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predicted == self.true_codes))

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.true_codes

    def rows(self):
        pred = self.predicted
        for i in range(self.true_codes.shape[0]):
            yield [str(i), self.split, str(int(self.true_codes[i])), str(int(pred[i]))] + [
                format_real(v) for v in self.scores[i]
            ]


def results_to_csv(results: list[AttackResult]) -> str:
    """CSV with ``instance_id, split, true_code, predicted_code, score_0..``."""
    if not results:
        raise ValueError("no attack results")
    k = results[0].scores.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "split", "true_code", "predicted_code"] + [f"score_{j}" for j in range(k)])
    for r in results:
        if r.scores.shape[1] != k:
            raise ValueError("mixed candidate counts in one CSV")
        w.writerows(r.rows())
    return buf.getvalue()


def _normalize(scores: np.ndarray, prior: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; all-zero rows fall back to the prior and are flagged."""
    tot = scores.sum(axis=1, keepdims=True)
    dead = tot[:, 0] <= 0
    out = np.where(dead[:, None], prior[None, :], scores / np.where(tot > 0, tot, 1.0))
    return out, dead


def _as_batch(rows, y):
    rows = np.asarray(rows, dtype=float)
    single = rows.ndim == 1
    rows = np.atleast_2d(rows)
    y = np.broadcast_to(np.asarray(y), (rows.shape[0],))
    return rows, y, single


def _candidates(schema: FeatureSchema, rows: np.ndarray, v: int) -> np.ndarray:
    out = rows.copy()
    out[:, schema.sensitive_index] = v
    return out


def _check_prior(schema: FeatureSchema, prior: SensitivePrior):
    if prior.k != schema.sensitive.cardinality:
        raise ValueError(f"prior has {prior.k} codes, sensitive feature has {schema.sensitive.cardinality}")


def _linreg_scores(model: LinearModel, rows, y, prior: SensitivePrior):
    schema = model.schema
    _check_prior(schema, prior)
    rows, y, single = _as_batch(rows, y)
    y = y.astype(float)
    if not np.all(np.isfinite(y)):
        raise ValueError("observed outputs must be finite")
    pi = prior.array
    preds = np.stack([model.predict(_candidates(schema, rows, v)) for v in range(prior.k)], axis=1)
    resid = y[:, None] - preds
    sigma = model.residual_sigma
    flagged = np.zeros(rows.shape[0], dtype=bool)
    if sigma > 0:
        with np.errstate(divide="ignore"):
            logs = np.log(pi)[None, :] - resid**2 / (2.0 * sigma**2)
        top = logs.max(axis=1, keepdims=True)
        scores = np.exp(logs - top)
    else:
        exact = (resid == 0) & (pi[None, :] > 0)
        scores = exact * pi[None, :]
        miss = ~exact.any(axis=1)
        if miss.any():
            # nothing matches exactly: nearest prediction among possible codes
            dist = np.where(pi[None, :] > 0, np.abs(resid), np.inf)
            near = np.argmin(dist[miss], axis=1)
            fallback = np.zeros((int(miss.sum()), prior.k))
            fallback[np.arange(near.size), near] = 1.0
            scores[miss] = fallback
            flagged = miss
    scores, dead = _normalize(scores, pi)
    return scores, flagged | dead, single


def map_attack_linreg(model: LinearModel, x_ns, y, prior: SensitivePrior) -> np.ndarray:
    """Posterior ``pi(v) * N(y; f(v, x_ns), sigma_e^2)`` over the sensitive codes.

    ``x_ns`` is a full feature row (or a batch of rows); its sensitive column
    is ignored.  ``sigma_e`` is the model's residual standard deviation.
    """
    scores, _, single = _linreg_scores(model, x_ns, y, prior)
    return scores[0] if single else scores


def _tree_scores(tree: DecisionTree, rows, y_label, prior: SensitivePrior, mode: str, smoothing: bool):
    schema = tree.schema
    _check_prior(schema, prior)
    rows, y, single = _as_batch(rows, y_label)
    y = y.astype(np.int64)
    pi = prior.array
    scores = np.empty((rows.shape[0], prior.k))
    if mode == "blackbox":
        for v in range(prior.k):
            _, conf = predict_batch(tree, _candidates(schema, rows, v))
            scores[:, v] = pi[v] * conf[np.arange(rows.shape[0]), y]
    elif mode == "counts":
        leaves = tree.leaves()
        table = np.array([leaf.class_counts for leaf in leaves], dtype=float)
        if smoothing:
            table = table + 1.0
        total = table.sum()
        for v in range(prior.k):
            lid = apply(tree, _candidates(schema, rows, v))
            scores[:, v] = pi[v] * table[lid, y] / total
    else:
        raise ValueError(f"unknown tree attack mode {mode!r}")
    scores, dead = _normalize(scores, pi)
    return scores, dead, single


def map_attack_tree(
    tree: DecisionTree,
    x_ns,
    y_label,
    prior: SensitivePrior,
    mode: str = "blackbox",
    smoothing: bool = False,
) -> np.ndarray:
    """MAP scores from a tree.

    ``mode="blackbox"`` weights by the confidence of the observed label;
    ``mode="counts"`` by the training count of the label in the reached
    leaf over the training size (add-one if ``smoothing``).  Rows whose
    scores are all zero get the prior.
    """
    scores, _, single = _tree_scores(tree, x_ns, y_label, prior, mode, smoothing)
    return scores[0] if single else scores


def prior_baseline(prior: SensitivePrior, n: int | None = None) -> np.ndarray:
    """Scores equal to the prior; the prediction is its mode."""
    pi = prior.array
    return pi.copy() if n is None else np.tile(pi, (n, 1))


def run_map_linreg(model: LinearModel, data: Dataset, prior: SensitivePrior, split: str = "test") -> AttackResult:
    scores, flagged, _ = _linreg_scores(model, data.rows, data.labels, prior)
    if flagged.any():
        log.info("map linreg: %d instances used the nearest-prediction fallback", int(flagged.sum()))
    return AttackResult(data.sensitive_codes, scores, split, flagged)


def run_map_tree(
    tree: DecisionTree,
    data: Dataset,
    prior: SensitivePrior,
    mode: str = "blackbox",
    split: str = "test",
    smoothing: bool = False,
) -> AttackResult:
    scores, flagged, _ = _tree_scores(tree, data.rows, data.labels, prior, mode, smoothing)
    return AttackResult(data.sensitive_codes, scores, split, flagged)


def run_prior_baseline(data: Dataset, prior: SensitivePrior, split: str = "test") -> AttackResult:
    return AttackResult(data.sensitive_codes, prior_baseline(prior, data.n), split)


# ---------------------------------------------------------------------------
# Knowledge alignment


@dataclass
class InversionConfig:
    hidden: int = 64
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True, eq=False)
class InversionModel:
    """``g``: confidence vector -> encoded feature vector (one-hot categoricals)."""

    net: Regressor
    schema: FeatureSchema
    num_classes: int
    train_mse: float

    @property
    def output_dim(self) -> int:
        return encoding_for(self.schema).width

    def sensitive_scores(self, recon: np.ndarray) -> np.ndarray:
        a, b = encoding_for(self.schema).sensitive_block
        block = np.atleast_2d(recon)[:, a:b]
        scores, _ = _normalize(np.clip(block, 0.0, None), np.full(b - a, 1.0 / (b - a)))
        # keep the raw argmax when every coordinate is clipped away
        dead = np.clip(block, 0.0, None).sum(axis=1) <= 0
        if dead.any():
            top = np.argmax(block[dead], axis=1)
            scores[dead] = np.eye(b - a)[top]
        return scores


def train_inversion_model(
    target: Callable[[np.ndarray], np.ndarray],
    aux: Dataset,
    config: InversionConfig | None = None,
) -> InversionModel:
    """Fit ``g`` by SGD on ``mean ||g(f(x)) - x||^2`` over the auxiliary rows."""
    config = config or InversionConfig()
    if aux.n < 1:
        raise ValueError("auxiliary dataset is empty")
    conf = np.atleast_2d(np.asarray(target(aux.rows), dtype=float))
    if conf.shape[0] != aux.n:
        raise ValueError("target oracle returned the wrong number of rows")
    x = encode(aux.schema, aux.rows)
    net = train_regressor(
        conf,
        x,
        hidden=config.hidden,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        seed=config.seed,
    )
    err = net(conf) - x
    return InversionModel(net, aux.schema, conf.shape[1], float(np.mean(np.sum(err * err, axis=1))))


def invert(g: InversionModel, confidence) -> np.ndarray:
    """Reconstructed encoded feature vector(s) for confidence vector(s)."""
    c = np.asarray(confidence, dtype=float)
    if c.shape[-1] != g.num_classes:
        raise ValueError(f"expected confidence of length {g.num_classes}, got {c.shape[-1]}")
    out = g.net(c)
    return out[0] if c.ndim == 1 else out


def run_knowledge_alignment(
    g: InversionModel,
    target: Callable[[np.ndarray], np.ndarray],
    data: Dataset,
    split: str = "test",
) -> AttackResult:
    """Reconstruct each row from its confidence and decode the sensitive block."""
    recon = invert(g, np.atleast_2d(target(data.rows)))
    x = encode(data.schema, data.rows)
    result = AttackResult(data.sensitive_codes, g.sensitive_scores(recon), split)
    result.metrics["reconstruction_mse"] = float(np.mean(np.sum((recon - x) ** 2, axis=1)))
    return result
