"""Small MLPs in numpy: variational information bottleneck and DPSGD.

Architecture (defaults): encoded input -> 64 tanh -> (mu, logvar) in R^K
-> affine -> softmax over C classes.  The VIB loss per example is the
cross-entropy of the decoder at ``z = mu + exp(logvar / 2) * xi`` plus
``lam`` times the KL divergence of ``N(mu, diag(exp(logvar)))`` from the
standard normal.  Gradients are hand-written; the tests compare them with
finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, FeatureSchema, SchemaError, encode, make_rng

__all__ = [
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "VibConfig",
    "DpsgdConfig",
    "MlpVib",
    "kl_to_standard_normal",
    "init_params",
    "vib_loss_and_grads",
    "train_vib",
    "predict_proba",
    "per_example_grads",
    "clip_per_example",
    "dpsgd_epsilon",
    "train_dpsgd",
    "Regressor",
    "train_regressor",
]

LOGVAR_MIN, LOGVAR_MAX = -20.0, 5.0
PARAM_ORDER = ("W1", "b1", "Wm", "bm", "Wv", "bv", "W2", "b2")


class TrainingAborted(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class VibConfig:
    lam: float = 0.0
    bottleneck_dim: int = 16
    hidden: int = 64
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    mc_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.bottleneck_dim < 1 or self.mc_samples < 1 or self.hidden < 1:
            raise ValueError("bottleneck_dim, hidden and mc_samples must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("bad training schedule")


@dataclass
class DpsgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    target_delta: float = 1e-5
    seed: int = 0
    bottleneck_dim: int = 16
    hidden: int = 64

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if not self.noise_multiplier > 0:
            raise ValueError("noise_multiplier must be > 0")
        if not 0 < self.target_delta < 1:
            raise ValueError("target_delta must lie in (0, 1)")


def kl_to_standard_normal(mu, logvar) -> float | np.ndarray:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)); sums over the last axis."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    kl = 0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar, axis=-1)
    # exp(x) - 1 - x >= 0 exactly, rounding can dip a hair below
    kl = np.maximum(kl, 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def init_params(d: int, hidden: int, k: int, c: int, rng: np.random.Generator) -> dict:
    def glorot(a, b):
        return rng.normal(0.0, math.sqrt(2.0 / (a + b)), size=(a, b))

    return {
        "W1": glorot(d, hidden),
        "b1": np.zeros(hidden),
        "Wm": glorot(hidden, k),
        "bm": np.zeros(k),
        "Wv": glorot(hidden, k) * 0.1,
        "bv": np.full(k, -4.0),
        "W2": glorot(k, c),
        "b2": np.zeros(c),
    }


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _encoder(params, x):
    h = np.tanh(x @ params["W1"] + params["b1"])
    mu = h @ params["Wm"] + params["bm"]
    lv_raw = h @ params["Wv"] + params["bv"]
    return h, mu, lv_raw


def vib_loss_and_grads(params: dict, x, y, xi, lam: float, deterministic: bool = False):
    """Mean loss over the batch, per-term means, and parameter gradients.

    ``xi`` holds the standard-normal draws (batch x K); fixing it freezes
    the randomness.  ``deterministic`` uses ``z = mu`` and drops the KL term.
    """
    x = np.asarray(x, dtype=float)
    b = x.shape[0]
    h, mu, lv_raw = _encoder(params, x)
    lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
    if deterministic:
        std = np.zeros_like(mu)
        z = mu
    else:
        std = np.exp(0.5 * lv)
        z = mu + std * xi
    logits = z @ params["W2"] + params["b2"]
    p = _softmax(logits)
    ce = -np.log(np.maximum(p[np.arange(b), y], 1e-300))
    kl = np.zeros(b) if deterministic else kl_to_standard_normal(mu, lv)
    lam_eff = 0.0 if deterministic else lam
    loss = float(ce.mean() + lam_eff * kl.mean())

    dlogits = p.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    grads = {"W2": z.T @ dlogits, "b2": dlogits.sum(axis=0)}
    dz = dlogits @ params["W2"].T
    dmu = dz + lam_eff * mu / b
    if deterministic:
        dlv_raw = np.zeros_like(lv_raw)
    else:
        dlv = dz * xi * 0.5 * std + lam_eff * 0.5 * (np.exp(lv) - 1.0) / b
        dlv_raw = dlv * ((lv_raw > LOGVAR_MIN) & (lv_raw < LOGVAR_MAX))
    grads["Wm"] = h.T @ dmu
    grads["bm"] = dmu.sum(axis=0)
    grads["Wv"] = h.T @ dlv_raw
    grads["bv"] = dlv_raw.sum(axis=0)
    dpre = (dmu @ params["Wm"].T + dlv_raw @ params["Wv"].T) * (1.0 - h * h)
    grads["W1"] = x.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return loss, {"ce": float(ce.mean()), "kl": float(kl.mean())}, grads


@dataclass(frozen=True, eq=False)
class MlpVib:
    params: dict
    schema: FeatureSchema
    deterministic: bool = False
    info: dict = field(default_factory=dict)

    @property
    def dims(self) -> dict:
        d, hdim = self.params["W1"].shape
        k, c = self.params["W2"].shape
        return {"input": d, "hidden": hdim, "bottleneck": k, "classes": c}

    def encode_rows(self, rows) -> np.ndarray:
        return encode(self.schema, rows)

    def encoder_outputs(self, rows) -> tuple[np.ndarray, np.ndarray]:
        _, mu, lv_raw = _encoder(self.params, self.encode_rows(rows))
        return mu, np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)

    def to_dict(self) -> dict:
        return {
            "format": "mlpvib/1",
            "dims": self.dims,
            "deterministic": self.deterministic,
            "schema": self.schema.to_dict(),
            "info": self.info,
            "layers": [
                {"name": n, "shape": list(self.params[n].shape), "values": self.params[n].ravel().tolist()}
                for n in PARAM_ORDER
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpVib":
        if obj.get("format") != "mlpvib/1":
            raise ValueError(f"unsupported model format {obj.get('format')!r}")
        params = {
            layer["name"]: np.asarray(layer["values"], dtype=float).reshape(layer["shape"])
            for layer in obj["layers"]
        }
        return cls(params, FeatureSchema.from_dict(obj["schema"]), bool(obj["deterministic"]), obj.get("info", {}))


def _check_nn_data(train: Dataset) -> tuple[np.ndarray, np.ndarray, int]:
    if not train.schema.label.is_classification:
        raise SchemaError("neural models need a classification label")
    return encode(train.schema, train.rows), train.labels.astype(np.int64), train.schema.label.num_classes


def _sgd(params, grads, velocity, lr, momentum):
    for name in params:
        velocity[name] = momentum * velocity[name] - lr * grads[name]
        params[name] += velocity[name]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for a in range(0, n, batch_size):
        yield perm[a : a + batch_size]


def train_vib(train: Dataset, config: VibConfig) -> MlpVib:
    """Minibatch SGD (with momentum) on cross-entropy + lam * KL.

    The step size is ``learning_rate / max(1, lam)``: the KL term has
    curvature ``lam`` in the bottleneck mean, so a fixed step diverges for
    large ``lam``.
    """
    x, y, c = _check_nn_data(train)
    lr = config.learning_rate / max(1.0, config.lam)
    rng = make_rng(config.seed)
    params = init_params(x.shape[1], config.hidden, config.bottleneck_dim, c, rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    ce = kl = float("nan")
    for epoch in range(config.epochs):
        for bi, idx in enumerate(_batches(x.shape[0], config.batch_size, rng)):
            grads_acc, loss_acc, terms_acc = None, 0.0, {"ce": 0.0, "kl": 0.0}
            for _ in range(config.mc_samples):
                xi = rng.standard_normal((idx.size, config.bottleneck_dim))
                loss, terms, grads = vib_loss_and_grads(params, x[idx], y[idx], xi, config.lam)
                if not math.isfinite(loss):
                    raise TrainingAborted(epoch, bi)
                loss_acc += loss / config.mc_samples
                for t in terms_acc:
                    terms_acc[t] += terms[t] / config.mc_samples
                if grads_acc is None:
                    grads_acc = {k: g / config.mc_samples for k, g in grads.items()}
                else:
                    for k2, g in grads.items():
                        grads_acc[k2] += g / config.mc_samples
            _sgd(params, grads_acc, velocity, lr, config.momentum)
    # final per-term losses on the full training set, fixed evaluation noise
    xi = make_rng(config.seed ^ 0x5EED).standard_normal((x.shape[0], config.bottleneck_dim))
    _, terms, _ = vib_loss_and_grads(params, x, y, xi, config.lam)
    ce, kl = terms["ce"], terms["kl"]
    info = {"lambda": config.lam, "final_ce": ce, "final_kl": kl, "epochs": config.epochs}
    return MlpVib(params, train.schema, False, info)


def predict_proba(model: MlpVib, rows, mode: str = "mean", seed: int | None = None) -> np.ndarray:
    """Confidence vectors; ``mode="mean"`` decodes ``z = mu``, ``"sample"`` draws ``z`` once."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    mu, lv = model.encoder_outputs(rows)
    if mode == "mean" or model.deterministic:
        z = mu
    elif mode == "sample":
        if seed is None:
            raise ValueError("sample mode needs an explicit seed")
        z = mu + np.exp(0.5 * lv) * make_rng(seed).standard_normal(mu.shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _softmax(z @ model.params["W2"] + model.params["b2"])


# ---------------------------------------------------------------------------
# DPSGD


def per_example_grads(params: dict, x, y) -> np.ndarray:
    """Flattened gradient of each example's cross-entropy (deterministic net), batch x P."""
    x = np.asarray(x, dtype=float)
    b = x.shape[0]
    h, mu, _ = _encoder(params, x)
    p = _softmax(mu @ params["W2"] + params["b2"])
    dlogits = p.copy()
    dlogits[np.arange(b), y] -= 1.0
    dz = dlogits @ params["W2"].T
    dpre = (dz @ params["Wm"].T) * (1.0 - h * h)
    parts = {
        "W1": np.einsum("bi,bj->bij", x, dpre),
        "b1": dpre,
        "Wm": np.einsum("bi,bj->bij", h, dz),
        "bm": dz,
        "Wv": np.zeros((b,) + params["Wv"].shape),
        "bv": np.zeros((b,) + params["bv"].shape),
        "W2": np.einsum("bi,bj->bij", mu, dlogits),
        "b2": dlogits,
    }
    return np.concatenate([parts[n].reshape(b, -1) for n in PARAM_ORDER], axis=1)


def clip_per_example(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return grads * scale[:, None]


def _unflatten(flat: np.ndarray, like: dict) -> dict:
    out, a = {}, 0
    for n in PARAM_ORDER:
        size = like[n].size
        out[n] = flat[a : a + size].reshape(like[n].shape)
        a += size
    return out


def dpsgd_epsilon(noise_multiplier: float, sample_rate: float, steps: int, delta: float) -> float:
    """Upper bound on epsilon after ``steps`` subsampled Gaussian steps.

    Half of ``delta`` is spread over the per-step mechanisms, half is the
    slack of advanced composition; the smaller of basic and advanced
    composition is returned.
    """
    if not noise_multiplier > 0:
        raise ValueError("noise_multiplier must be > 0")
    if steps < 1:
        return 0.0
    q = min(max(sample_rate, 0.0), 1.0)
    delta_step = delta / (2.0 * steps * q) if q > 0 else delta / (2.0 * steps)
    delta_step = min(delta_step, 0.5)
    eps0 = math.sqrt(2.0 * math.log(1.25 / delta_step)) / noise_multiplier
    if q == 0:
        return 0.0
    # log(1 + q (e^eps0 - 1)) without overflow for large eps0
    if eps0 < 30.0:
        eps_step = math.log1p(q * math.expm1(eps0))
    else:
        eps_step = eps0 + math.log(q + (1.0 - q) * math.exp(-eps0))
    basic = steps * eps_step
    if eps_step > 700.0:
        return basic
    advanced = math.sqrt(2.0 * steps * math.log(2.0 / delta)) * eps_step + steps * eps_step * math.expm1(eps_step)
    return min(basic, advanced)


def train_dpsgd(train: Dataset, config: DpsgdConfig, private: bool = True) -> tuple[MlpVib, float]:
    """Clip each example's gradient to ``clip_norm``, add Gaussian noise to the sum.

    With ``private=False`` the same loop runs without clipping or noise
    (the non-private reference) and epsilon is reported as infinity.
    """
    x, y, c = _check_nn_data(train)
    rng = make_rng(config.seed)
    params = init_params(x.shape[1], config.hidden, config.bottleneck_dim, c, rng)
    params["Wv"][:] = 0.0
    params["bv"][:] = LOGVAR_MIN
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = x.shape[0]
    steps, max_clipped = 0, 0.0
    for epoch in range(config.epochs):
        for bi, idx in enumerate(_batches(n, config.batch_size, rng)):
            g = per_example_grads(params, x[idx], y[idx])
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(epoch, bi)
            if private:
                g = clip_per_example(g, config.clip_norm)
                max_clipped = max(max_clipped, float(np.linalg.norm(g, axis=1).max()))
                total = g.sum(axis=0) + rng.normal(0.0, config.noise_multiplier * config.clip_norm, g.shape[1])
            else:
                total = g.sum(axis=0)
            grads = _unflatten(total / config.batch_size, params)
            grads["Wv"][:] = 0.0
            grads["bv"][:] = 0.0
            _sgd(params, grads, velocity, config.learning_rate, config.momentum)
            steps += 1
    if private:
        eps = dpsgd_epsilon(config.noise_multiplier, min(config.batch_size / n, 1.0), steps, config.target_delta)
    else:
        eps = math.inf
    info = {
        "mechanism": "dpsgd" if private else "sgd",
        "epsilon_upper_bound": eps,
        "delta": config.target_delta,
        "steps": steps,
        "max_clipped_norm": max_clipped,
        "accounting": "advanced composition (upper bound)",
    }
    return MlpVib(params, train.schema, True, info), eps


# ---------------------------------------------------------------------------
# Plain regression MLP (used by the inversion attack)


@dataclass(frozen=True, eq=False)
class Regressor:
    """One-hidden-layer tanh MLP with linear output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.tanh(x @ self.W1 + self.b1) @ self.W2 + self.b2


def train_regressor(
    x,
    t,
    hidden: int = 64,
    epochs: int = 100,
    batch_size: int = 64,
    learning_rate: float = 0.05,
    momentum: float = 0.9,
    seed: int = 0,
) -> Regressor:
    """Minibatch SGD on mean squared error ``||g(x) - t||^2`` (summed over outputs)."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    rng = make_rng(seed)
    din, dout = x.shape[1], t.shape[1]
    p = {
        "W1": rng.normal(0.0, math.sqrt(2.0 / (din + hidden)), (din, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, math.sqrt(2.0 / (hidden + dout)), (hidden, dout)),
        "b2": t.mean(axis=0),
    }
    vel = {k: np.zeros_like(v) for k, v in p.items()}
    for epoch in range(epochs):
        for bi, idx in enumerate(_batches(x.shape[0], batch_size, rng)):
            xb, tb = x[idx], t[idx]
            h = np.tanh(xb @ p["W1"] + p["b1"])
            out = h @ p["W2"] + p["b2"]
            d_out = 2.0 * (out - tb) / idx.size
            if not np.all(np.isfinite(d_out)):
                raise TrainingAborted(epoch, bi)
            dh = (d_out @ p["W2"].T) * (1.0 - h * h)
            grads = {"W2": h.T @ d_out, "b2": d_out.sum(axis=0), "W1": xb.T @ dh, "b1": dh.sum(axis=0)}
            for k in p:
                vel[k] = momentum * vel[k] - learning_rate * grads[k]
                p[k] += vel[k]
    return Regressor(p["W1"], p["b1"], p["W2"], p["b2"])
