import json
import math

import numpy as np
import pytest

from midefense.core import Dataset, Feature, FeatureSchema, LabelSpec, SchemaError, encode, synth_generate
from midefense.datasets import preset
from midefense.nn import (
    LOGVAR_MIN,
    PARAM_ORDER,
    DpsgdConfig,
    MlpVib,
    VibConfig,
    clip_per_example,
    dpsgd_epsilon,
    init_params,
    kl_to_standard_normal,
    per_example_grads,
    predict_proba,
    train_dpsgd,
    train_regressor,
    train_vib,
    vib_loss_and_grads,
)


def two_blobs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    centers = np.array([[-2.0, -2.0], [2.0, 2.0]])
    x = np.clip(centers[y] + 0.5 * rng.normal(size=(n, 2)), -6, 6)
    schema = FeatureSchema(
        (Feature.continuous("x1", -6, 6), Feature.continuous("x2", -6, 6)), 0, LabelSpec("classification", 2)
    )
    return Dataset(schema, x, y)


def blobs(n=600, seed=1):
    schema, cfg = preset("blobs", n)
    return synth_generate(cfg, schema, seed)


def test_kl_cases():
    assert kl_to_standard_normal([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert kl_to_standard_normal([1.0, 0.0], [0.0, 0.0]) == 0.5
    rng = np.random.default_rng(0)
    vals = kl_to_standard_normal(rng.normal(size=(100, 3)), rng.normal(scale=3, size=(100, 3)))
    assert np.all(vals >= 0)
    assert kl_to_standard_normal([1e-3], [0.0]) > 0
    assert kl_to_standard_normal([0.0], [1e-3]) > 0


def flat(params):
    return np.concatenate([params[n].ravel() for n in PARAM_ORDER])


def unflat(v, like):
    out, a = {}, 0
    for n in PARAM_ORDER:
        out[n] = v[a : a + like[n].size].reshape(like[n].shape)
        a += like[n].size
    return out


def fd_check(params, x, y, xi, lam, h=1e-4, deterministic=False):
    _, _, grads = vib_loss_and_grads(params, x, y, xi, lam, deterministic)
    g = flat(grads)
    v = flat(params)
    fd = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        fd[i] = (
            vib_loss_and_grads(unflat(v + e, params), x, y, xi, lam, deterministic)[0]
            - vib_loss_and_grads(unflat(v - e, params), x, y, xi, lam, deterministic)[0]
        ) / (2 * h)
    return np.linalg.norm(fd - g) / max(np.linalg.norm(fd), 1e-12)


def test_vib_gradients_micro_network():
    rng = np.random.default_rng(4)
    for _ in range(12):
        params = {k: rng.normal(size=v.shape) for k, v in init_params(1, 1, 1, 2, rng).items()}
        assert flat(params).size == 10
        x = rng.normal(size=(6, 1))
        y = rng.integers(0, 2, 6)
        xi = rng.normal(size=(6, 1))
        assert fd_check(params, x, y, xi, float(rng.uniform(0, 3))) < 1e-3


def test_vib_gradients_default_shape():
    rng = np.random.default_rng(5)
    for _ in range(10):
        params = init_params(4, 8, 3, 3, rng)
        params["bv"] = rng.normal(size=3)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, 5)
        xi = rng.normal(size=(5, 3))
        assert fd_check(params, x, y, xi, float(rng.uniform(0, 2))) < 1e-3
    assert fd_check(params, x, y, xi, 0.0, deterministic=True) < 1e-3


def test_vib_separable_blobs():
    data = two_blobs()
    m = train_vib(data, VibConfig(lam=0.0, epochs=50))
    acc = np.mean(predict_proba(m, data.rows).argmax(axis=1) == data.labels)
    assert acc >= 0.99


def test_vib_huge_lambda_kills_information():
    data = blobs()
    m0 = train_vib(data, VibConfig(lam=0.0, epochs=30))
    m = train_vib(data, VibConfig(lam=1e3, epochs=30))
    assert m.info["final_kl"] < 0.05
    spread0 = np.ptp(predict_proba(m0, data.rows), axis=0).max()
    spread = np.ptp(predict_proba(m, data.rows), axis=0).max()
    assert spread < 0.1 * spread0


def test_vib_determinism_and_json():
    data = blobs(200)
    a = train_vib(data, VibConfig(lam=0.1, epochs=3, seed=9))
    b = train_vib(data, VibConfig(lam=0.1, epochs=3, seed=9))
    assert abs(a.info["final_ce"] - b.info["final_ce"]) <= 1e-10
    assert a.to_json() == b.to_json()
    again = MlpVib.from_dict(json.loads(a.to_json()))
    np.testing.assert_array_equal(predict_proba(again, data.rows), predict_proba(a, data.rows))
    with pytest.raises(ValueError):
        MlpVib.from_dict({**json.loads(a.to_json()), "format": "other"})


def test_predict_modes():
    data = blobs(200)
    m = train_vib(data, VibConfig(lam=0.1, epochs=3))
    np.testing.assert_array_equal(predict_proba(m, data.rows), predict_proba(m, data.rows))
    s1 = predict_proba(m, data.rows, "sample", seed=1)
    assert np.array_equal(s1, predict_proba(m, data.rows, "sample", seed=1))
    assert not np.array_equal(s1, predict_proba(m, data.rows, "sample", seed=2))
    with pytest.raises(ValueError):
        predict_proba(m, data.rows, "sample")
    with pytest.raises(ValueError):
        predict_proba(m, data.rows, "median")


def test_sample_mode_with_clamped_logvar_matches_mean():
    rng = np.random.default_rng(0)
    data = blobs(50)
    params = init_params(encode(data.schema, data.rows).shape[1], 8, 4, 3, rng)
    params["Wv"][:] = 0.0
    params["bv"][:] = -1e3  # clamps to the lower bound
    # exp(-10) noise passes through the decoder; keep its gain small
    params["W2"] *= 0.01
    m = MlpVib(params, data.schema)
    rows = data.rows
    assert np.all(m.encoder_outputs(rows)[1] == LOGVAR_MIN)
    diff = np.abs(predict_proba(m, rows, "sample", seed=3) - predict_proba(m, rows))
    assert diff.max() <= 1e-6


def mc_variance(model, rows, draws=1000):
    ps = np.stack([predict_proba(model, rows, "sample", seed=s) for s in range(draws)])
    return float(ps.var(axis=0).sum(axis=1).mean())


def test_sample_variance_grows_with_lambda():
    data = blobs()
    rows = data.rows[:20]
    lo = mc_variance(train_vib(data, VibConfig(lam=0.001, epochs=30)), rows)
    hi = mc_variance(train_vib(data, VibConfig(lam=0.1, epochs=30)), rows)
    assert hi > lo


def test_simplex_invariant():
    data = blobs(200)
    m = train_vib(data, VibConfig(lam=0.01, epochs=2))
    for p in (predict_proba(m, data.rows), predict_proba(m, data.rows, "sample", seed=0)):
        assert np.all(p >= 0)
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)


def information_proxy(model, data):
    p = predict_proba(model, data.rows)
    mu, lv = model.encoder_outputs(data.rows)
    return float(p.var(axis=0).sum() + kl_to_standard_normal(mu, lv).mean())


def test_monotone_information_proxy():
    data = blobs()
    prev = None
    for lam in (0.001, 0.01, 0.1, 1.0):
        val = np.mean([information_proxy(train_vib(data, VibConfig(lam=lam, epochs=30, seed=s)), data) for s in range(3)])
        if prev is not None:
            assert val <= prev * 1.05
        prev = val


def test_classification_required():
    schema = FeatureSchema((Feature.continuous("x", 0, 1),), 0, LabelSpec("regression"))
    with pytest.raises(SchemaError):
        train_vib(Dataset(schema, [[0.5]], [1.0]), VibConfig())


def test_config_errors():
    with pytest.raises(ValueError):
        VibConfig(lam=-1)
    with pytest.raises(ValueError):
        VibConfig(mc_samples=0)
    with pytest.raises(ValueError):
        DpsgdConfig(noise_multiplier=0)
    with pytest.raises(ValueError):
        DpsgdConfig(clip_norm=-1)


# ---------------------------------------------------------------------------
# DPSGD


def test_per_example_grads_sum_to_batch_gradient():
    rng = np.random.default_rng(1)
    params = init_params(3, 5, 2, 3, rng)
    x = rng.normal(size=(7, 3))
    y = rng.integers(0, 3, 7)
    g = per_example_grads(params, x, y)
    _, _, batch = vib_loss_and_grads(params, x, y, np.zeros((7, 2)), 0.0, deterministic=True)
    ref = flat(batch)
    mask = np.concatenate([np.full(params[n].size, n not in ("Wv", "bv")) for n in PARAM_ORDER])
    np.testing.assert_allclose(g.mean(axis=0)[mask], ref[mask], rtol=1e-10, atol=1e-14)


def test_clipping_contract():
    rng = np.random.default_rng(2)
    g = rng.normal(scale=10, size=(50, 30))
    c = clip_per_example(g, 1.5)
    assert np.all(np.linalg.norm(c, axis=1) <= 1.5 + 1e-9)
    small = rng.normal(scale=1e-3, size=(5, 30))
    np.testing.assert_array_equal(clip_per_example(small, 1.5), small)


def test_dpsgd_training_clip_norm_bound():
    data = blobs(300)
    _, eps = train_dpsgd(data, DpsgdConfig(clip_norm=0.3, epochs=2))
    m, _ = train_dpsgd(data, DpsgdConfig(clip_norm=0.3, epochs=2))
    assert m.info["max_clipped_norm"] <= 0.3 + 1e-9
    assert m.deterministic and math.isfinite(eps) and eps > 0


def test_dpsgd_noiseless_limit_matches_sgd():
    data = two_blobs()
    cfg = DpsgdConfig(clip_norm=1e6, noise_multiplier=1e-9, epochs=10)
    m_dp, _ = train_dpsgd(data, cfg)
    m_sgd, eps = train_dpsgd(data, cfg, private=False)
    assert eps == math.inf
    acc = [np.mean(predict_proba(m, data.rows).argmax(1) == data.labels) for m in (m_dp, m_sgd)]
    assert abs(acc[0] - acc[1]) <= 0.02


def oracle_epsilon(sigma, q, steps, delta):
    # independent transcription with mpmath at high precision
    import mpmath

    mpmath.mp.dps = 30
    d_step = mpmath.mpf(delta) / (2 * steps * q)
    e0 = mpmath.sqrt(2 * mpmath.log(mpmath.mpf("1.25") / d_step)) / sigma
    es = mpmath.log(1 + q * (mpmath.exp(e0) - 1))
    adv = mpmath.sqrt(2 * steps * mpmath.log(2 / mpmath.mpf(delta))) * es + steps * es * (mpmath.exp(es) - 1)
    return float(min(steps * es, adv))


def test_dpsgd_epsilon_formula_and_monotonicity():
    q, delta, per_epoch = 0.05, 1e-5, 20
    grid = {}
    for epochs in (1, 5, 20):
        for sigma in (0.8, 1.5, 4.0):
            eps = dpsgd_epsilon(sigma, q, epochs * per_epoch, delta)
            assert math.isclose(eps, oracle_epsilon(sigma, q, epochs * per_epoch, delta), rel_tol=1e-10)
            grid[epochs, sigma] = eps
    for sigma in (0.8, 1.5, 4.0):
        assert grid[1, sigma] < grid[5, sigma] < grid[20, sigma]
    for epochs in (1, 5, 20):
        assert grid[epochs, 0.8] > grid[epochs, 1.5] > grid[epochs, 4.0]
    with pytest.raises(ValueError):
        dpsgd_epsilon(0.0, q, 10, delta)


def test_dpsgd_reported_epsilon_monotone_in_training():
    data = blobs(200)
    e1 = train_dpsgd(data, DpsgdConfig(epochs=1))[1]
    e3 = train_dpsgd(data, DpsgdConfig(epochs=3))[1]
    e3_noisier = train_dpsgd(data, DpsgdConfig(epochs=3, noise_multiplier=3.0))[1]
    assert e1 < e3 and e3_noisier < e3


def test_regressor_fits_linear_map():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(500, 2))
    t = np.column_stack([0.5 * x[:, 0] - 0.2 * x[:, 1], 0.1 * x[:, 1]])
    g = train_regressor(x, t, hidden=16, epochs=50)
    assert np.mean((g(x) - t) ** 2) < 1e-3
