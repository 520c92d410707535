"""Synthetic stand-ins for the benchmark datasets.

Each preset returns ``(schema, config)``; feed both to
:func:`midefense.core.synth_generate`.  The sensitive attribute is
imbalanced and correlated with the other features and the label, which is
what the inversion attacks exploit.

* ``iwpc``: dosing-style regression with a 3-valued genotype as the
  sensitive attribute.
* ``fivethirtyeight``: survey-style all-categorical classification with a
  binary sensitive answer.
* ``blobs``: small numeric classification task for the neural models.
"""

from __future__ import annotations

from .core import Feature, FeatureSchema, LabelSpec, SynthConfig

__all__ = ["iwpc_like", "fivethirtyeight_like", "blobs", "PRESETS", "preset"]


def iwpc_like(n_samples: int = 2000) -> tuple[FeatureSchema, SynthConfig]:
    schema = FeatureSchema(
        (
            Feature.categorical("vkorc1", 3),
            Feature.categorical("race", 3),
            Feature.categorical("age", 5),
            Feature.continuous("height", -4.0, 4.0),
            Feature.continuous("weight", -4.0, 4.0),
            Feature.categorical("cyp2c9", 3),
            Feature.categorical("amiodarone", 2),
        ),
        sensitive_index=0,
        label=LabelSpec("regression"),
    )
    age = [0.15, 0.2, 0.3, 0.2, 0.15]
    cond = {
        "race": {"probs": [[0.75, 0.15, 0.10], [0.55, 0.25, 0.20], [0.25, 0.45, 0.30]]},
        "age": {"probs": [age, age, age]},
        "height": {"mean": [0.1, 0.0, -0.3], "std": [1.0, 1.0, 1.0]},
        "weight": {"mean": [0.1, 0.0, -0.2], "std": [1.0, 1.0, 1.0]},
        "cyp2c9": {"probs": [[0.8, 0.15, 0.05]] * 3},
        "amiodarone": {"probs": [[0.9, 0.1]] * 3},
    }
    weights = {
        "vkorc1": [0.0, -0.6, -1.2],
        "race": [0.0, -0.3, 0.1],
        "age": [0.3, 0.15, 0.0, -0.15, -0.3],
        "height": [0.2],
        "weight": [0.25],
        "cyp2c9": [0.0, -0.4, -0.7],
        "amiodarone": [0.0, -0.4],
    }
    cfg = SynthConfig(
        prior=[0.55, 0.32, 0.13],
        conditionals=cond,
        label_weights=weights,
        n_samples=n_samples,
        label_bias=0.3,
        noise_scale=0.6,
    )
    return schema, cfg


def fivethirtyeight_like(n_samples: int = 600) -> tuple[FeatureSchema, SynthConfig]:
    schema = FeatureSchema(
        (
            Feature.categorical("cheated", 2),
            Feature.categorical("smoke", 2),
            Feature.categorical("alcohol", 2),
            Feature.categorical("gamble", 2),
            Feature.categorical("skydive", 2),
            Feature.categorical("gender", 2),
            Feature.categorical("age", 4),
        ),
        sensitive_index=0,
        label=LabelSpec("classification", 3),
    )
    age = [0.2, 0.3, 0.3, 0.2]
    cond = {
        "smoke": {"probs": [[0.85, 0.15], [0.6, 0.4]]},
        "alcohol": {"probs": [[0.35, 0.65], [0.15, 0.85]]},
        "gamble": {"probs": [[0.6, 0.4], [0.3, 0.7]]},
        "skydive": {"probs": [[0.95, 0.05], [0.85, 0.15]]},
        "gender": {"probs": [[0.5, 0.5], [0.4, 0.6]]},
        "age": {"probs": [age, [0.1, 0.25, 0.35, 0.3]]},
    }
    # logits for (rare, medium, well-done), per code
    weights = {
        "cheated": [0.0, 0.0, 0.0, 3.0, 0.0, -1.5],
        "gamble": [0.0, 0.0, 0.0, 0.6, 0.0, -0.3],
        "gender": [0.0, 0.0, 0.0, -0.3, 0.0, 0.4],
        "age": [0.3, 0.0, -0.5, 0.1, 0.0, -0.2, -0.1, 0.0, 0.2, -0.3, 0.0, 0.5],
        "smoke": [0.0, 0.0, 0.0, 0.4, 0.0, 0.0],
    }
    cfg = SynthConfig(
        prior=[0.8, 0.2],
        conditionals=cond,
        label_weights=weights,
        n_samples=n_samples,
        label_bias=[0.0, 0.5, 0.1],
        noise_scale=1.0,
    )
    return schema, cfg


def blobs(n_samples: int = 1000) -> tuple[FeatureSchema, SynthConfig]:
    schema = FeatureSchema(
        (
            Feature.categorical("group", 3),
            Feature.continuous("x1", -6.0, 6.0),
            Feature.continuous("x2", -6.0, 6.0),
            Feature.continuous("x3", -6.0, 6.0),
            Feature.continuous("x4", -6.0, 6.0),
        ),
        sensitive_index=0,
        label=LabelSpec("classification", 3),
    )
    cond = {
        "x1": {"mean": [1.0, -1.0, 0.0], "std": [1.0, 1.0, 1.0]},
        "x2": {"mean": [0.0, 1.0, -1.0], "std": [1.0, 1.0, 1.0]},
        "x3": {"mean": [0.5, 0.0, -0.5], "std": [1.0, 1.0, 1.0]},
        "x4": {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]},
    }
    weights = {
        "group": [1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0],
        "x1": [1.5, -1.5, 0.0],
        "x2": [0.0, 1.5, -1.5],
        "x3": [-0.5, 0.0, 0.5],
        "x4": [0.5, -0.5, 0.0],
    }
    cfg = SynthConfig(
        prior=[0.5, 0.3, 0.2],
        conditionals=cond,
        label_weights=weights,
        n_samples=n_samples,
        label_bias=[0.0, 0.0, 0.0],
        noise_scale=0.5,
    )
    return schema, cfg


PRESETS = {"iwpc": iwpc_like, "fivethirtyeight": fivethirtyeight_like, "blobs": blobs}


def preset(name: str, n_samples: int | None = None) -> tuple[FeatureSchema, SynthConfig]:
    try:
        fn = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown synthetic preset {name!r}; choose from {sorted(PRESETS)}") from None
    return fn() if n_samples is None else fn(n_samples)
