"""Semantic and indistinguishability inversion games on finite domains.

A joint ``p(x_s, x_ns, y)`` is a 3-d probability table.  Training sets of
``n`` records are drawn per trial, all trials at once: records are sampled
by inverse-CDF lookup of shared uniforms, so two experiments run with the
same seed on different joints use common random numbers.

Mechanisms turn a batch of training sets into a batch of releases;
adversaries and distinguishers are vectorized over trials:

* ``mechanism.release(cells, rng) -> release``, ``cells`` has shape (trials, n)
* ``adversary(release, x_ns, y, rng) -> guessed property code`` per trial
* ``distinguisher(release, rng) -> bit`` per trial
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import make_rng

__all__ = [
    "DiscreteJoint",
    "PropertyFunction",
    "GainEstimate",
    "NonPrivateHistogram",
    "LaplaceHistogram",
    "RandomizedResponse",
    "wilson_halfwidth",
    "product_marginal",
    "best_possible_gain",
    "random_joint",
    "run_sem_experiment",
    "adv_sem",
    "run_ind_experiment",
    "dp_gain_bound",
    "group_privacy_params",
    "disjointness_probability",
    "disjointness_exact",
    "constant_adversary",
    "uniform_adversary",
    "plugin_adversary",
    "constant_distinguisher",
    "random_distinguisher",
    "likelihood_ratio_distinguisher",
    "rr_distinguisher",
    "constructed_distinguisher",
    "verify_theorem1",
    "verify_dp_bound",
]

Z95 = 1.959963984540054


@dataclass(frozen=True, eq=False)
class DiscreteJoint:
    table: np.ndarray  # indexed [x_s, x_ns, y]

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 3 or t.size == 0:
            raise ValueError("joint table must be 3-dimensional and non-empty")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("joint entries must be finite and non-negative")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint must sum to 1, got {t.sum()!r}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.table.shape

    @property
    def p_s(self) -> np.ndarray:
        return self.table.sum(axis=(1, 2))

    @property
    def p_nsy(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def decode(self, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.unravel_index(cells, self.shape)

    def cells_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(self.table.ravel())
        cdf[-1] = 1.0
        # side="right" never selects a zero-probability cell
        return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)


@dataclass(frozen=True)
class PropertyFunction:
    mapping: tuple[int, ...]  # x_s code -> property code

    @property
    def num_values(self) -> int:
        return max(self.mapping) + 1

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)

    @classmethod
    def identity(cls, k: int) -> "PropertyFunction":
        return cls(tuple(range(k)))


@dataclass(frozen=True)
class GainEstimate:
    estimate: float
    trials: int
    ci: float  # 95% Wilson half-width
    successes: int

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "trials": self.trials, "ci": self.ci}


def wilson_halfwidth(successes: int, trials: int, z: float = Z95) -> float:
    """Half-width of the Wilson score interval."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ph = successes / trials
    return z * math.sqrt(ph * (1.0 - ph) / trials + z * z / (4.0 * trials * trials)) / (1.0 + z * z / trials)


def _estimate(wins: np.ndarray) -> GainEstimate:
    t = int(wins.size)
    s = int(np.count_nonzero(wins))
    return GainEstimate(s / t, t, wilson_halfwidth(s, t), s)


def product_marginal(p: DiscreteJoint) -> DiscreteJoint:
    """``q(x_s, x_ns, y) = p(x_s) * p(x_ns, y)``."""
    q = p.p_s[:, None, None] * p.p_nsy[None, :, :]
    return DiscreteJoint(q / q.sum())


def best_possible_gain(p: DiscreteJoint, tau: PropertyFunction) -> float:
    """``sum over (x_ns, y) of max_v p(tau(x_s) = v, x_ns, y)``."""
    m = tau.array
    if m.size != p.shape[0]:
        raise ValueError("property function must cover the sensitive domain")
    per_v = np.zeros((tau.num_values,) + p.shape[1:])
    np.add.at(per_v, m, p.table)
    return float(per_v.max(axis=0).sum())


def random_joint(shape, rng: np.random.Generator, concentration: float = 1.0) -> DiscreteJoint:
    t = rng.dirichlet(np.full(int(np.prod(shape)), concentration)).reshape(shape)
    return DiscreteJoint(t / t.sum())


# ---------------------------------------------------------------------------
# Mechanisms


def _histograms(cells: np.ndarray, shape) -> np.ndarray:
    trials = cells.shape[0]
    size = int(np.prod(shape))
    flat = (np.arange(trials)[:, None] * size + cells).ravel()
    return np.bincount(flat, minlength=trials * size).reshape((trials,) + tuple(shape)).astype(float)


@dataclass(frozen=True)
class NonPrivateHistogram:
    """Releases the exact count table of the training set."""

    shape: tuple[int, int, int]
    name: str = "nonprivate"
    epsilon: float | None = None
    delta: float = 0.0

    def release(self, cells, rng):
        return _histograms(cells, self.shape)


@dataclass(frozen=True)
class LaplaceHistogram:
    """Count table plus Laplace noise of scale ``2 / noise_epsilon`` per cell.

    Replacing one record moves two counts by one, so the release is
    ``noise_epsilon``-DP.  ``epsilon`` is the declared value the bounds are
    checked against; it normally equals ``noise_epsilon``.  With
    ``ignore_data`` the counts are all zero and the release is 0-DP.
    """

    shape: tuple[int, int, int]
    epsilon: float
    noise_epsilon: float | None = None
    ignore_data: bool = False
    delta: float = 0.0
    name: str = "laplace"

    def release(self, cells, rng):
        eps = self.epsilon if self.noise_epsilon is None else self.noise_epsilon
        if self.ignore_data:
            hist = np.zeros((cells.shape[0],) + tuple(self.shape))
        else:
            hist = _histograms(cells, self.shape)
        return hist + rng.laplace(0.0, 2.0 / eps, size=hist.shape)


@dataclass(frozen=True)
class RandomizedResponse:
    """Per-record randomized response on ``match[x_s, x_ns, y]``.

    Each bit is kept with probability ``e^eps / (1 + e^eps)``, which makes
    the release eps-DP.
    """

    match: np.ndarray
    epsilon: float
    delta: float = 0.0
    name: str = "randomized-response"

    def release(self, cells, rng):
        bits = np.asarray(self.match, dtype=bool).ravel()[cells]
        keep = rng.random(cells.shape) < expit(self.epsilon)
        return np.where(keep, bits, ~bits)


# ---------------------------------------------------------------------------
# Experiments


def _draw_cells(p: DiscreteJoint, rng, size) -> np.ndarray:
    return p.cells_from_uniforms(rng.random(size))


def _sem_wins(adv, mech, train: DiscreteJoint, test: DiscreteJoint, tau, n, trials, rng) -> np.ndarray:
    cells = _draw_cells(train, rng, (trials, n))
    release = mech.release(cells, rng)
    xs, xns, y = test.decode(_draw_cells(test, rng, trials))
    guess = np.asarray(adv(release, xns, y, rng))
    return guess == tau.array[xs]


def run_sem_experiment(adv, mech, p: DiscreteJoint, tau: PropertyFunction, n: int, trials: int, seed: int,
                       train_dist: DiscreteJoint | None = None) -> GainEstimate:
    """Fraction of trials where the adversary guesses ``tau(x_s)`` of a fresh record.

    Per trial: ``S ~ train_dist^n`` (default ``p``), ``f = M(S)``,
    ``(x_s, x_ns, y) ~ p``, then ``A(f, x_ns, y)`` is scored.
    """
    if trials < 1 or n < 1:
        raise ValueError("trials and n must be >= 1")
    rng = make_rng(seed)
    return _estimate(_sem_wins(adv, mech, train_dist or p, p, tau, n, trials, rng))


def adv_sem(adv, mech, p: DiscreteJoint, tau: PropertyFunction, n: int, trials: int, seed: int,
            baseline: str = "ideal") -> tuple[float, float, GainEstimate, GainEstimate]:
    """Advantage over a decorrelated baseline, with common random numbers.

    ``baseline="ideal"``: only the training set comes from the product
    distribution.  ``baseline="product"``: training set and test record both
    do.  Returns ``(advantage, combined CI, real gain, baseline gain)``.
    """
    q = product_marginal(p)
    real = run_sem_experiment(adv, mech, p, tau, n, trials, seed)
    if baseline == "ideal":
        base = run_sem_experiment(adv, mech, p, tau, n, trials, seed, train_dist=q)
    elif baseline == "product":
        base = run_sem_experiment(adv, mech, q, tau, n, trials, seed)
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    return real.estimate - base.estimate, math.hypot(real.ci, base.ci), real, base


def run_ind_experiment(dist, mech, p: DiscreteJoint, n: int, trials: int, seed: int) -> GainEstimate:
    """Fraction of trials where ``dist(M(S))`` recovers ``b``.

    ``b = 0``: ``S ~ p^n``; ``b = 1``: ``S ~ (p_s x p_nsy)^n``.
    """
    if trials < 1 or n < 1:
        raise ValueError("trials and n must be >= 1")
    rng = make_rng(seed)
    q = product_marginal(p)
    b = rng.random(trials) < 0.5
    u = rng.random((trials, n))
    cells = np.where(b[:, None], q.cells_from_uniforms(u), p.cells_from_uniforms(u))
    release = mech.release(cells, rng)
    guess = np.asarray(dist(release, rng)).astype(bool)
    return _estimate(guess == b)


# ---------------------------------------------------------------------------
# Closed forms


def dp_gain_bound(n: int, epsilon: float, delta: float) -> float:
    """``e^{n eps}/(e^{n eps}+1) + delta (e^{n eps}-1)/((e^{n eps}+1)(e^eps-1))``.

    Written as ``expit(n eps) + delta tanh(n eps / 2) / expm1(eps)``; the
    ``eps = 0`` limit of the second term is ``n delta / 2``.
    """
    if epsilon < 0 or not 0 <= delta < 1 or n < 1:
        raise ValueError("need n >= 1, epsilon >= 0, 0 <= delta < 1")
    if epsilon == 0:
        return 0.5 + n * delta / 2.0
    # 1 / (e^eps - 1) without overflow
    inv = 1.0 / math.expm1(epsilon) if epsilon < 1.0 else math.exp(-epsilon) / -math.expm1(-epsilon)
    return float(expit(n * epsilon) + delta * math.tanh(n * epsilon / 2.0) * inv)


def group_privacy_params(epsilon: float, delta: float, k: int) -> tuple[float, float]:
    """``(k eps, delta (e^{k eps}-1)/(e^eps-1))``; ``k delta`` at ``eps = 0``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return epsilon, delta
    if epsilon == 0:
        return 0.0, k * delta
    return k * epsilon, delta * math.expm1(k * epsilon) / math.expm1(epsilon)


def disjointness_exact(p: DiscreteJoint, n: int) -> float:
    """``(1 - sum_c p(c) q(c))^n`` for independent position-wise draws."""
    q = product_marginal(p)
    return float((1.0 - np.sum(p.table * q.table)) ** n)


def disjointness_probability(p: DiscreteJoint, n: int, trials: int, seed: int) -> float:
    """Monte-Carlo chance that ``S ~ p^n`` and ``S' ~ q^n`` differ at every position."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = make_rng(seed)
    q = product_marginal(p)
    a = _draw_cells(p, rng, (trials, n))
    b = _draw_cells(q, rng, (trials, n))
    return float(np.mean(np.all(a != b, axis=1)))


# ---------------------------------------------------------------------------
# Strategies


def constant_adversary(v: int):
    def adv(release, xns, y, rng):
        return np.full(np.shape(xns), v)

    return adv


def uniform_adversary(k: int):
    def adv(release, xns, y, rng):
        return rng.integers(0, k, size=np.shape(xns))

    return adv


def plugin_adversary(tau: PropertyFunction):
    """Guess the property with the most released mass in row ``(x_ns, y)``.

    Rows with no positive mass fall back to the released sensitive marginal.
    """
    m = tau.array

    def adv(release, xns, y, rng):
        h = np.clip(np.asarray(release, dtype=float), 0.0, None)
        t = np.arange(h.shape[0])
        row = h[t, :, xns, y]  # trials x |X_s|
        per_v = np.zeros((h.shape[0], tau.num_values))
        np.add.at(per_v.T, m, row.T)
        marg = np.zeros_like(per_v)
        np.add.at(marg.T, m, h.sum(axis=(2, 3)).T)
        empty = per_v.sum(axis=1) <= 0
        per_v[empty] = marg[empty]
        return np.argmax(per_v, axis=1)

    return adv


def constant_distinguisher(bit: int):
    def dist(release, rng):
        return np.full(np.shape(release)[0], bool(bit))

    return dist


def random_distinguisher():
    def dist(release, rng):
        return rng.random(np.shape(release)[0]) < 0.5

    return dist


def likelihood_ratio_distinguisher(p: DiscreteJoint):
    """Treat the (clipped) released counts as multinomial data; guess the likelier source."""
    q = product_marginal(p)
    with np.errstate(divide="ignore"):
        lp, lq = np.log(p.table), np.log(q.table)
    both = np.isfinite(lp) & np.isfinite(lq)
    diff = np.where(both, lp - lq, 0.0)
    only_q = ~np.isfinite(lp) & np.isfinite(lq)
    only_p = np.isfinite(lp) & ~np.isfinite(lq)

    def dist(release, rng):
        h = np.clip(np.asarray(release, dtype=float), 0.0, None)
        score = np.einsum("tabc,abc->t", h, diff)
        # mass in a cell impossible under one joint decides outright
        score = score - 1e300 * np.einsum("tabc,abc->t", h, only_q) + 1e300 * np.einsum("tabc,abc->t", h, only_p)
        return score < 0  # True means "product"

    return dist


def rr_distinguisher():
    """Guess the correlated source when most released bits are set."""

    def dist(release, rng):
        bits = np.asarray(release, dtype=bool)
        return bits.mean(axis=1) < 0.5

    return dist


def constructed_distinguisher(adv, p: DiscreteJoint, tau: PropertyFunction):
    """Draw a fresh record from ``p``; say ``b = 0`` exactly when ``adv`` guesses it."""

    def dist(release, rng):
        trials = np.shape(release)[0]
        xs, xns, y = p.decode(_draw_cells(p, rng, trials))
        return np.asarray(adv(release, xns, y, rng)) != tau.array[xs]

    return dist


# ---------------------------------------------------------------------------
# Verifiers


def verify_dp_bound(distinguishers: dict, mech, p: DiscreteJoint, n: int, trials: int, seed: int,
                    gamma_trials: int = 10_000) -> dict:
    """Check every distinguisher's gain against the DP bound with 3 CI slack."""
    if mech.epsilon is None:
        raise ValueError("mechanism declares no privacy parameters")
    bound = dp_gain_bound(n, mech.epsilon, mech.delta)
    rows = []
    for i, (name, dist) in enumerate(sorted(distinguishers.items())):
        g = run_ind_experiment(dist, mech, p, n, trials, seed + i)
        slack = bound + 3.0 * g.ci - g.estimate
        rows.append({"distinguisher": name, **g.to_dict(), "bound": bound, "slack": slack, "pass": slack >= 0})
    return {
        "check": "dp-gain-bound",
        "mechanism": mech.name,
        "epsilon": mech.epsilon,
        "delta": mech.delta,
        "n": n,
        "bound": bound,
        "gamma": 1.0 - disjointness_probability(p, n, gamma_trials, seed),
        "results": rows,
        "pass": all(r["pass"] for r in rows),
    }


def verify_theorem1(adversaries: dict, distinguishers: dict, mech, p: DiscreteJoint, tau: PropertyFunction,
                    n: int, trials: int, seed: int) -> dict:
    """Check ``Adv_ideal(A) <= 2 max_D gain_IND(D) - 1`` for every adversary.

    The distinguisher pool is the given set plus one constructed from each
    adversary.  Each adversary's pair with its own constructed distinguisher
    is also compared for near equality (``gain_IND = 1/2 + Adv_ideal / 2``).
    The product-data advantage is reported but not checked.
    """
    if not adversaries or not distinguishers:
        raise ValueError("need at least one adversary and one distinguisher")
    pool = dict(distinguishers)
    for name, adv in adversaries.items():
        pool[f"constructed:{name}"] = constructed_distinguisher(adv, p, tau)
    ind = {}
    for i, (name, dist) in enumerate(sorted(pool.items())):
        ind[name] = run_ind_experiment(dist, mech, p, n, trials, seed + 1000 + i)
    best_name = max(sorted(ind), key=lambda k: ind[k].estimate)
    best = ind[best_name]
    rhs = 2.0 * best.estimate - 1.0
    rows = []
    for i, (name, adv) in enumerate(sorted(adversaries.items())):
        a_ideal, ci_ideal, real, ideal = adv_sem(adv, mech, p, tau, n, trials, seed + i, "ideal")
        a_prod, ci_prod, _, _ = adv_sem(adv, mech, p, tau, n, trials, seed + i, "product")
        combined = math.hypot(ci_ideal, 2.0 * best.ci)
        own = ind[f"constructed:{name}"]
        own_rhs = 2.0 * own.estimate - 1.0
        own_ci = math.hypot(ci_ideal, 2.0 * own.ci)
        rows.append({
            "adversary": name,
            "gain_real": real.to_dict(),
            "gain_ideal": ideal.to_dict(),
            "adv_ideal": a_ideal,
            "adv_ideal_ci": ci_ideal,
            "adv_product": a_prod,
            "adv_product_ci": ci_prod,
            "rhs": rhs,
            "combined_ci": combined,
            "slack": rhs + 3.0 * combined - a_ideal,
            "pass": a_ideal <= rhs + 3.0 * combined,
            "constructed_gap": a_ideal - own_rhs,
            "constructed_ci": own_ci,
            "near_equality": abs(a_ideal - own_rhs) <= 3.0 * own_ci,
        })
    report = {
        "check": "theorem1",
        "mechanism": mech.name,
        "n": n,
        "trials": trials,
        "best_distinguisher": best_name,
        "distinguishers": {k: v.to_dict() for k, v in sorted(ind.items())},
        "results": rows,
        "pass": all(r["pass"] for r in rows),
    }
    if mech.epsilon is not None:
        cap = 2.0 * dp_gain_bound(n, mech.epsilon, mech.delta) - 1.0
        report["dp_rhs_cap"] = cap
        report["dp_chain_pass"] = rhs <= cap + 3.0 * 2.0 * best.ci
    return report
