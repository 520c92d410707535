"""Linear regression: ridge, the mutual-information regularized fit, and AdaSSP.

The regularizer approximates the entropy of the model output by the
entropy of a Gaussian mixture centred on the training predictions, with a
Taylor (zeroth order) expansion around each centre::

    I_lin = -(1/N) sum_i log( (1/N) sum_j N(o_i; o_j, sigma^2) ),   o = X w

The double sum is evaluated exactly in row blocks that stay cache
resident; there is no truncation or binning of the kernel.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .core import Dataset, FeatureSchema, SchemaError, encode, make_rng

__all__ = [
    "LinearModel",
    "MidLinConfig",
    "TrainingDivergedError",
    "design_matrix",
    "train_ridge",
    "mixture_entropy",
    "mi_lin_estimate",
    "default_bandwidth",
    "mid_linear_objective",
    "train_mid_linear",
    "adassp_release",
    "train_adassp",
    "schema_row_bound",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True, eq=False)
class LinearModel:
    """``y_hat = design(x) @ weights + intercept``; categoricals use reference coding."""

    weights: np.ndarray
    intercept: float
    residual_sigma: float
    schema: FeatureSchema
    privacy: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)) or not math.isfinite(self.intercept):
            raise ValueError("linear model weights must be finite")
        if not (math.isfinite(self.residual_sigma) and self.residual_sigma >= 0):
            raise ValueError("residual_sigma must be finite and >= 0")
        object.__setattr__(self, "weights", w)

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.weights, self.intercept)

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return design_matrix(self.schema, rows) @ self.theta

    def to_dict(self) -> dict:
        return {
            "weights": [float(v) for v in self.weights],
            "intercept": float(self.intercept),
            "residual_sigma": float(self.residual_sigma),
            "schema": self.schema.to_dict(),
            "privacy": self.privacy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "LinearModel":
        return cls(
            np.asarray(obj["weights"], dtype=float),
            float(obj["intercept"]),
            float(obj["residual_sigma"]),
            FeatureSchema.from_dict(obj["schema"]),
            obj.get("privacy", {}),
        )


@dataclass
class MidLinConfig:
    lam: float = 0.0
    bandwidth: float | None = None  # None: Silverman-style rule on the ridge outputs
    ridge: float = 0.0
    learning_rate: float = 1.0
    max_iters: int = 500
    grad_tolerance: float = 1e-8
    optimizer: str = "lbfgs"  # or "gd"

    def __post_init__(self):
        if self.lam < 0 or self.ridge < 0:
            raise ValueError("lambda and ridge must be >= 0")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.learning_rate <= 0 or self.max_iters < 0:
            raise ValueError("learning_rate must be > 0 and max_iters >= 0")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _require_regression(data: Dataset) -> None:
    if data.schema.label.is_classification:
        raise SchemaError("linear regression needs a regression label")


def design_matrix(schema: FeatureSchema, rows: np.ndarray) -> np.ndarray:
    """Encoded features with a trailing intercept column."""
    x = encode(schema, rows, drop_first=True)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _penalty_mask(p: int) -> np.ndarray:
    m = np.ones(p)
    m[-1] = 0.0  # intercept is not shrunk
    return m


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(r * r)))


def train_ridge(train: Dataset, ridge: float = 0.0) -> LinearModel:
    """Normal-equation solution of ``||y - Z w||^2 + ridge * ||w||^2`` (intercept unpenalized)."""
    _require_regression(train)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    z = design_matrix(train.schema, train.rows)
    y = train.labels
    a = z.T @ z + ridge * np.diag(_penalty_mask(z.shape[1]))
    if ridge == 0 and np.linalg.matrix_rank(a) < a.shape[0]:
        raise np.linalg.LinAlgError("singular normal matrix; use ridge > 0")
    theta = np.linalg.solve(a, z.T @ y)
    return LinearModel(theta[:-1], float(theta[-1]), _rms(y - z @ theta), train.schema)


# ---------------------------------------------------------------------------
# Gaussian-mixture entropy


_BLOCK = 32


def _pairwise_sums(o: np.ndarray, inv2s2: float, grad: bool):
    """Row sums ``s_i = sum_j K_ij`` and, if asked, ``sum_j K_kj d_kj (1/s_k + 1/s_j)``."""
    n = o.size
    s = np.empty(n)
    dbuf = np.empty((_BLOCK, n))
    kbuf = np.empty((_BLOCK, n))

    def kernel_block(a, b):
        d, k = dbuf[: b - a], kbuf[: b - a]
        np.subtract(o[a:b, None], o[None, :], out=d)
        np.multiply(d, d, out=k)
        k *= -inv2s2
        np.exp(k, out=k)
        return d, k

    for a in range(0, n, _BLOCK):
        b = min(a + _BLOCK, n)
        _, k = kernel_block(a, b)
        s[a:b] = k.sum(axis=1)
    if not grad:
        return s, None
    inv = 1.0 / s
    g = np.empty(n)
    for a in range(0, n, _BLOCK):
        b = min(a + _BLOCK, n)
        d, k = kernel_block(a, b)
        k *= d
        g[a:b] = k.sum(axis=1) * inv[a:b] + k @ inv
    return s, g


def mixture_entropy(outputs: np.ndarray, bandwidth: float, grad: bool = False):
    """Entropy approximation for outputs; optionally its gradient w.r.t. the outputs."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    o = np.ascontiguousarray(outputs, dtype=float).ravel()
    n = o.size
    if n < 1:
        raise ValueError("need at least one output")
    inv2s2 = 1.0 / (2.0 * bandwidth * bandwidth)
    s, g = _pairwise_sums(o, inv2s2, grad)
    value = 0.5 * math.log(2.0 * math.pi * bandwidth**2) + math.log(n) - float(np.mean(np.log(s)))
    if not grad:
        return value
    return value, g / (n * bandwidth**2)


def mi_lin_estimate(model: LinearModel, data: Dataset, bandwidth: float) -> float:
    """Mixture-entropy proxy for I(X; Y_hat) of a linear model on ``data`` (nats)."""
    return mixture_entropy(model.predict(data.rows), bandwidth)


def default_bandwidth(outputs: np.ndarray) -> float:
    o = np.asarray(outputs, dtype=float)
    sd = float(np.std(o, ddof=1)) if o.size > 1 else 0.0
    if sd <= 0:
        return 1.0
    return sd * o.size ** (-0.2)


# ---------------------------------------------------------------------------
# MID training


def mid_linear_objective(theta, z, y, ridge, lam, bandwidth):
    """Value and gradient of ``MSE + (ridge/N)||w||^2 + lam * I_lin``."""
    n = z.shape[0]
    mask = _penalty_mask(z.shape[1])
    o = z @ theta
    r = o - y
    value = float(r @ r) / n + ridge * float(np.sum(mask * theta**2)) / n
    g = 2.0 * (z.T @ r) / n + 2.0 * ridge * mask * theta / n
    if lam > 0:
        ent, g_o = mixture_entropy(o, bandwidth, grad=True)
        value += lam * ent
        g = g + lam * (z.T @ g_o)
    return value, g


def train_mid_linear(train: Dataset, config: MidLinConfig) -> LinearModel:
    """Minimize MSE + lam * I_lin starting from the ridge solution.

    Both optimizers work in coordinates whitened by the MSE curvature
    ``(Z'Z + ridge P)/N``, where the data-fit term is isotropic.  ``"gd"``
    takes fixed steps of ``learning_rate / (2 + 4 lam / sigma^2)`` (an upper
    bound on the curvature); ``"lbfgs"`` hands the same objective and
    gradient to scipy's L-BFGS.  Bandwidth is fixed before optimizing.
    """
    _require_regression(train)
    base = train_ridge(train, config.ridge)
    z = design_matrix(train.schema, train.rows)
    y = train.labels
    n, p = z.shape
    theta = base.theta.copy()
    sigma = config.bandwidth if config.bandwidth is not None else default_bandwidth(z @ theta)
    lam = config.lam
    info = {"bandwidth": sigma, "iterations": 0, "converged": True, "optimizer": config.optimizer}
    if lam > 0:
        m = (z.T @ z + config.ridge * np.diag(_penalty_mask(p))) / n
        chol = np.linalg.cholesky(m + 1e-12 * np.eye(p))

        def to_theta(u):
            return solve_triangular(chol.T, u, lower=False)

        def objective(u):
            value, g = mid_linear_objective(to_theta(u), z, y, config.ridge, lam, sigma)
            if not (math.isfinite(value) and np.all(np.isfinite(g))):
                raise TrainingDivergedError(info["iterations"])
            return value, solve_triangular(chol, g, lower=True)

        u = chol.T @ theta
        if config.optimizer == "gd":
            step = config.learning_rate / (2.0 + 4.0 * lam / sigma**2)
            info["converged"] = False
            for it in range(config.max_iters):
                _, gu = objective(u)
                if np.linalg.norm(gu) < config.grad_tolerance:
                    info["converged"] = True
                    break
                u = u - step * gu
                info["iterations"] = it + 1
        else:
            res = minimize(
                objective,
                u,
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": config.max_iters, "gtol": config.grad_tolerance},
            )
            u = res.x
            info["iterations"] = int(res.nit)
            info["converged"] = bool(res.success)
        theta = to_theta(u)
        if not np.all(np.isfinite(theta)):
            raise TrainingDivergedError(info["iterations"], "weights")
    resid = _rms(y - z @ theta)
    return LinearModel(theta[:-1], float(theta[-1]), resid, train.schema, {"mid": info, "lambda": lam})


# ---------------------------------------------------------------------------
# AdaSSP


def schema_row_bound(schema: FeatureSchema) -> float:
    """Public bound on the L2 norm of a design-matrix row (intercept included)."""
    sq = 1.0
    for f in schema.features:
        sq += 1.0 if f.is_categorical else max(f.lo**2, f.hi**2)
    return math.sqrt(sq)


def _clip_rows(z: np.ndarray, bound: float) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1)
    scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    return z * scale[:, None]


def adassp_release(z, y, epsilon, delta, bound_x, bound_y, rng, rho=0.05) -> dict:
    """The three noisy releases of AdaSSP, each at (epsilon/3, delta/3).

    Returns the noisy and exact statistics plus the noise scales so callers
    can audit calibration.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    z = _clip_rows(np.asarray(z, dtype=float), bound_x)
    y = np.clip(np.asarray(y, dtype=float), -bound_y, bound_y)
    d = z.shape[1]
    eps3 = epsilon / 3.0
    gauss = math.sqrt(math.log(6.0 / delta)) / eps3
    xtx = z.T @ z
    xty = z.T @ y

    lam_min = max(float(np.linalg.eigvalsh(xtx)[0]), 0.0)
    sigma_lam = gauss * bound_x**2
    lam_min_noisy = max(
        lam_min + sigma_lam * rng.standard_normal() - math.log(6.0 / delta) / eps3 * bound_x**2, 0.0
    )
    lam = max(
        0.0,
        math.sqrt(d * math.log(6.0 / delta) * math.log(2.0 * d * d / rho)) * bound_x**2 / eps3 - lam_min_noisy,
    )
    sigma_xtx = gauss * bound_x**2
    upper = np.triu(rng.standard_normal((d, d)))
    noise = upper + np.triu(upper, 1).T
    sigma_xty = gauss * bound_x * bound_y
    return {
        "xtx": xtx,
        "xty": xty,
        "xtx_noisy": xtx + sigma_xtx * noise,
        "xty_noisy": xty + sigma_xty * rng.standard_normal(d),
        "lambda_min_noisy": lam_min_noisy,
        "ridge": lam,
        "sigma_xtx": sigma_xtx,
        "sigma_xty": sigma_xty,
        "sigma_lambda_min": sigma_lam,
        "budget": [
            {"release": "lambda_min", "epsilon": eps3, "delta": delta / 3.0},
            {"release": "xtx", "epsilon": eps3, "delta": delta / 3.0},
            {"release": "xty", "epsilon": eps3, "delta": delta / 3.0},
        ],
    }


def train_adassp(
    train: Dataset,
    epsilon: float,
    delta: float,
    bounds: tuple[float, float],
    seed: int,
    rho: float = 0.05,
) -> LinearModel:
    """(epsilon, delta)-DP linear regression by sufficient-statistics perturbation."""
    _require_regression(train)
    bound_x, bound_y = bounds
    z = design_matrix(train.schema, train.rows)
    rel = adassp_release(z, train.labels, epsilon, delta, bound_x, bound_y, make_rng(seed), rho)
    a = rel["xtx_noisy"] + rel["ridge"] * np.eye(z.shape[1])
    try:
        theta = np.linalg.solve(a, rel["xty_noisy"])
    except np.linalg.LinAlgError:
        theta = np.linalg.pinv(a) @ rel["xty_noisy"]
    resid = _rms(train.labels - z @ theta)
    privacy = {
        "mechanism": "adassp",
        "epsilon": float(epsilon),
        "delta": float(delta),
        "budget": rel["budget"],
        "ridge": rel["ridge"],
    }
    return LinearModel(theta[:-1], float(theta[-1]), resid, train.schema, privacy)
