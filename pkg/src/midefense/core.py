"""Data model, CSV ingestion, synthetic generators and shared numeric helpers.

Randomness: every randomized operation takes an integer seed and builds a
``numpy.random.Generator`` over PCG64 from it (:func:`make_rng`).  Child seeds
for repetitions, trials and grid points come from :func:`derive_seed`, which
hashes ``(seed, *keys)`` through ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SchemaError",
    "Feature",
    "LabelSpec",
    "FeatureSchema",
    "Dataset",
    "SynthConfig",
    "make_rng",
    "derive_seed",
    "load_csv",
    "write_csv",
    "dataset_to_csv",
    "synth_generate",
    "split_indices",
    "train_test_split",
    "empirical_entropy",
    "encode",
    "format_real",
]

UINT64_MAX = 2**64 - 1


class SchemaError(ValueError):
    """Raised when data or configuration violates a schema invariant."""


def make_rng(seed: int) -> np.random.Generator:
    if not 0 <= int(seed) <= UINT64_MAX:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


def format_real(x: float) -> str:
    # 17 significant digits round-trips every finite double
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # "categorical" | "continuous"
    cardinality: int = 0
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self):
        if self.kind == "categorical":
            if int(self.cardinality) < 2:
                raise SchemaError(f"feature {self.name!r}: cardinality must be >= 2")
        elif self.kind == "continuous":
            if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
                raise SchemaError(f"feature {self.name!r}: need finite lo < hi")
        else:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @classmethod
    def categorical(cls, name: str, cardinality: int) -> "Feature":
        return cls(name, "categorical", cardinality=int(cardinality))

    @classmethod
    def continuous(cls, name: str, lo: float, hi: float) -> "Feature":
        return cls(name, "continuous", lo=float(lo), hi=float(hi))

    def to_dict(self) -> dict:
        if self.is_categorical:
            return {"name": self.name, "kind": self.kind, "cardinality": self.cardinality}
        return {"name": self.name, "kind": self.kind, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class LabelSpec:
    kind: str  # "regression" | "classification"
    num_classes: int = 0

    def __post_init__(self):
        if self.kind == "classification":
            if int(self.num_classes) < 2:
                raise SchemaError("num_classes must be >= 2")
        elif self.kind != "regression":
            raise SchemaError(f"unknown label kind {self.kind!r}")

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    def to_dict(self) -> dict:
        if self.is_classification:
            return {"kind": self.kind, "num_classes": self.num_classes}
        return {"kind": self.kind}


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered features, the index of the single sensitive one, and the label."""

    features: tuple[Feature, ...]
    sensitive_index: int
    label: LabelSpec

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise SchemaError("schema needs at least one feature")
        if not 0 <= self.sensitive_index < len(self.features):
            raise SchemaError("sensitive_index out of range")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names) or "label" in names:
            raise SchemaError("feature names must be unique and must not be 'label'")

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def sensitive(self) -> Feature:
        return self.features[self.sensitive_index]

    @property
    def nonsensitive_indices(self) -> list[int]:
        return [i for i in range(self.d) if i != self.sensitive_index]

    def to_dict(self) -> dict:
        return {
            "features": [f.to_dict() for f in self.features],
            "sensitive": self.sensitive.name,
            "label": self.label.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        feats = []
        for f in obj["features"]:
            if f["kind"] == "categorical":
                feats.append(Feature.categorical(f["name"], f["cardinality"]))
            else:
                feats.append(Feature.continuous(f["name"], f["lo"], f["hi"]))
        sens = obj["sensitive"]
        if isinstance(sens, str):
            names = [f.name for f in feats]
            if sens not in names:
                raise SchemaError(f"sensitive feature {sens!r} not in features")
            sens = names.index(sens)
        lab = obj["label"]
        return cls(tuple(feats), int(sens), LabelSpec(lab["kind"], int(lab.get("num_classes", 0))))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class Dataset:
    """N x d value table plus labels; categoricals are integer codes."""

    schema: FeatureSchema
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != self.schema.d:
            raise SchemaError(f"rows must be N x {self.schema.d}, got {rows.shape}")
        labels = np.array(self.labels)
        if labels.ndim != 1 or labels.shape[0] != rows.shape[0]:
            raise SchemaError("rows and labels must have equal length")
        if rows.shape[0] < 1:
            raise SchemaError("dataset must have at least one row")
        if not np.all(np.isfinite(rows)):
            bad = np.argwhere(~np.isfinite(rows))[0]
            raise SchemaError(f"non-finite value at row {bad[0]}, column {self.schema.names[bad[1]]!r}")
        for j, f in enumerate(self.schema.features):
            if f.is_categorical:
                col = rows[:, j]
                bad = np.flatnonzero((col != np.round(col)) | (col < 0) | (col >= f.cardinality))
                if bad.size:
                    raise SchemaError(
                        f"row {bad[0]}, column {f.name!r}: code {col[bad[0]]:g} outside 0..{f.cardinality - 1}"
                    )
        if self.schema.label.is_classification:
            k = self.schema.label.num_classes
            bad = np.flatnonzero((labels != np.round(labels)) | (labels < 0) | (labels >= k))
            if bad.size:
                raise SchemaError(f"row {bad[0]}: class label outside 0..{k - 1}")
            labels = labels.astype(np.int64)
        else:
            labels = labels.astype(float)
            if not np.all(np.isfinite(labels)):
                raise SchemaError("non-finite regression label")
        rows.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def sensitive_codes(self) -> np.ndarray:
        return self.rows[:, self.schema.sensitive_index].astype(np.int64)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.schema, self.rows[idx], self.labels[idx])

    def with_sensitive(self, code: int) -> np.ndarray:
        """Copy of ``rows`` with the sensitive column overwritten by ``code``."""
        out = self.rows.copy()
        out[:, self.schema.sensitive_index] = code
        return out


# ---------------------------------------------------------------------------
# CSV


def _format_cell(value: float, categorical: bool) -> str:
    return str(int(value)) if categorical else format_real(value)


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(data.schema.names + ["label"])
    cats = [f.is_categorical for f in data.schema.features]
    lab_cat = data.schema.label.is_classification
    for row, lab in zip(data.rows, data.labels):
        w.writerow([_format_cell(v, c) for v, c in zip(row, cats)] + [_format_cell(lab, lab_cat)])
    return buf.getvalue()


def write_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(data))


def load_csv(path: str | Path, schema: FeatureSchema) -> Dataset:
    """Parse a CSV whose header is the schema's feature names plus ``label``."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        expected = schema.names + ["label"]
        missing = [c for c in expected if c not in header]
        extra = [c for c in header if c not in expected]
        if missing or extra:
            raise SchemaError(f"{path}: header mismatch (missing={missing}, extra={extra})")
        order = [header.index(c) for c in expected]
        cats = [f.is_categorical for f in schema.features] + [schema.label.is_classification]
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path}: line {lineno}: expected {len(header)} cells, got {len(rec)}")
            vals = []
            for col, (src, is_cat) in enumerate(zip(order, cats)):
                cell = rec[src].strip()
                try:
                    v = int(cell) if is_cat else float(cell)
                except ValueError:
                    raise SchemaError(
                        f"{path}: line {lineno} (row {lineno - 2}), column {expected[col]!r}: cannot parse {cell!r}"
                    ) from None
                vals.append(v)
            rows.append(vals[:-1])
            labels.append(vals[-1])
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    try:
        return Dataset(schema, np.array(rows, dtype=float), np.array(labels))
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthConfig:
    """Generative model: sensitive prior, per-code conditionals, label model.

    ``conditionals`` maps every non-sensitive feature name to either
    ``{"mean": [...], "std": [...]}`` (continuous, one entry per sensitive
    code) or ``{"probs": [[...], ...]}`` (categorical, one probability
    vector per sensitive code).

    ``label_weights`` maps feature names to effects.  For regression a
    categorical feature carries one effect per code and a continuous feature
    a slope; for classification each of those becomes a length-C vector of
    logit contributions.  ``label_bias`` is a scalar (regression) or length-C
    vector.
    """

    prior: list[float]
    conditionals: dict[str, dict]
    label_weights: dict[str, list]
    n_samples: int
    label_bias: float | list[float] = 0.0
    noise_scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "prior": list(self.prior),
            "conditionals": self.conditionals,
            "label_weights": self.label_weights,
            "label_bias": self.label_bias,
            "noise_scale": self.noise_scale,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        return cls(
            prior=list(obj["prior"]),
            conditionals=obj["conditionals"],
            label_weights=obj.get("label_weights", {}),
            n_samples=int(obj["n_samples"]),
            label_bias=obj.get("label_bias", 0.0),
            noise_scale=float(obj.get("noise_scale", 1.0)),
        )


def _check_prob(vec, what: str) -> np.ndarray:
    p = np.asarray(vec, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise SchemaError(f"{what} must be a probability vector summing to 1")
    return p


def synth_generate(config: SynthConfig, schema: FeatureSchema, seed: int) -> Dataset:
    """Draw ``n_samples`` rows: sensitive code from the prior, the rest conditionally."""
    rng = make_rng(seed)
    n = int(config.n_samples)
    if n < 1:
        raise SchemaError("n_samples must be >= 1")
    sens = schema.sensitive
    if not sens.is_categorical:
        raise SchemaError("synthetic generation needs a categorical sensitive feature")
    prior = _check_prob(config.prior, "prior")
    if prior.size != sens.cardinality:
        raise SchemaError(f"prior has {prior.size} entries, sensitive cardinality is {sens.cardinality}")

    rows = np.zeros((n, schema.d))
    s = rng.choice(sens.cardinality, size=n, p=prior)
    rows[:, schema.sensitive_index] = s
    for j in schema.nonsensitive_indices:
        f = schema.features[j]
        cond = config.conditionals.get(f.name)
        if cond is None:
            raise SchemaError(f"no conditional given for feature {f.name!r}")
        if f.is_categorical:
            probs = [_check_prob(p, f"{f.name} conditional") for p in cond["probs"]]
            if len(probs) != sens.cardinality or any(p.size != f.cardinality for p in probs):
                raise SchemaError(f"feature {f.name!r}: conditional probs have wrong shape")
            cdf = np.cumsum(np.array(probs), axis=1)
            u = rng.random(n)
            codes = (u[:, None] > cdf[s]).sum(axis=1)
            rows[:, j] = np.minimum(codes, f.cardinality - 1)
        else:
            mean = np.asarray(cond["mean"], dtype=float)
            std = np.asarray(cond["std"], dtype=float)
            if mean.size != sens.cardinality or std.size != sens.cardinality:
                raise SchemaError(f"feature {f.name!r}: mean/std need one entry per sensitive code")
            if np.any(std <= 0):
                raise SchemaError(f"feature {f.name!r}: std must be > 0")
            rows[:, j] = np.clip(mean[s] + std[s] * rng.standard_normal(n), f.lo, f.hi)

    if schema.label.is_classification:
        k = schema.label.num_classes
        logits = np.zeros((n, k)) + np.asarray(config.label_bias, dtype=float)
        for name, w in config.label_weights.items():
            j = schema.names.index(name)
            w = np.asarray(w, dtype=float)
            if schema.features[j].is_categorical:
                logits += w.reshape(schema.features[j].cardinality, k)[rows[:, j].astype(int)]
            else:
                logits += rows[:, j][:, None] * w.reshape(1, k)
        gumbel = -np.log(-np.log(rng.random((n, k))))
        labels = np.argmax(logits / max(config.noise_scale, 1e-12) + gumbel, axis=1)
    else:
        y = np.full(n, float(np.asarray(config.label_bias, dtype=float)))
        for name, w in config.label_weights.items():
            j = schema.names.index(name)
            w = np.asarray(w, dtype=float)
            if schema.features[j].is_categorical:
                y += w.reshape(-1)[rows[:, j].astype(int)]
            else:
                y += rows[:, j] * float(w.reshape(-1)[0])
        labels = y + config.noise_scale * rng.standard_normal(n)
    return Dataset(schema, rows, labels)


# ---------------------------------------------------------------------------
# Splits and entropy


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if n < 2:
        raise ValueError("need at least two rows to split")
    n_test = int(math.floor(test_fraction * n + 0.5))
    n_test = min(max(n_test, 1), n - 1)
    perm = make_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint partition; ``|test| = round(test_fraction * N)``."""
    tr, te = split_indices(data.n, test_fraction, seed)
    return data.subset(tr), data.subset(te)


def empirical_entropy(values: Sequence[int] | np.ndarray) -> float:
    """Plug-in entropy of the code frequencies, in nats."""
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empirical_entropy of an empty list")
    _, counts = np.unique(v, return_counts=True)
    q = counts / v.size
    return float(-np.sum(q * np.log(q)))


# ---------------------------------------------------------------------------
# Encoding


@dataclass(frozen=True)
class Encoding:
    """Column layout of an encoded design matrix."""

    blocks: tuple[tuple[int, int], ...]  # per feature: [start, stop) in encoded columns
    width: int
    drop_first: bool = False
    sensitive_block: tuple[int, int] = field(default=(0, 0))


def encoding_for(schema: FeatureSchema, drop_first: bool = False) -> Encoding:
    blocks, col = [], 0
    for f in schema.features:
        w = (f.cardinality - 1 if drop_first else f.cardinality) if f.is_categorical else 1
        blocks.append((col, col + w))
        col += w
    return Encoding(tuple(blocks), col, drop_first, blocks[schema.sensitive_index])


def encode(schema: FeatureSchema, rows: np.ndarray, drop_first: bool = False) -> np.ndarray:
    """One-hot categoricals (optionally dropping code 0), continuous as-is."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    enc = encoding_for(schema, drop_first)
    out = np.zeros((rows.shape[0], enc.width))
    for j, (f, (a, b)) in enumerate(zip(schema.features, enc.blocks)):
        if f.is_categorical:
            codes = rows[:, j].astype(np.int64)
            if drop_first:
                hit = codes > 0
                out[np.flatnonzero(hit), a + codes[hit] - 1] = 1.0
            else:
                out[np.arange(rows.shape[0]), a + codes] = 1.0
        else:
            out[:, a] = rows[:, j]
    return out
