import itertools
import json
import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from midefense.core import Dataset, Feature, FeatureSchema, LabelSpec, SchemaError, empirical_entropy, synth_generate
from midefense.datasets import preset
from midefense.tree import (
    DecisionTree,
    Internal,
    Leaf,
    TreeConfig,
    dp_quality,
    dp_sensitivity,
    exponential_mechanism_probs,
    predict,
    predict_batch,
    root_score_table,
    train_dp_id3,
    train_id3,
    train_priority,
)

from conftest import binary_schema


# ---------------------------------------------------------------------------
# Reference ID3 written from the textbook description, on plain Python lists


def ref_entropy(labels):
    n = len(labels)
    return -sum(c / n * math.log(c / n) for c in Counter(labels).values())


def ref_majority(labels, k):
    counts = [labels.count(c) for c in range(k)]
    return counts.index(max(counts))


def ref_id3(rows, labels, feats, depth, max_depth, k, zero_gain_stop, parent_major=None):
    counts = tuple(float(labels.count(c)) for c in range(k))
    if not labels:
        return ("leaf", counts, parent_major)
    major = ref_majority(labels, k)
    if len(set(labels)) <= 1 or depth >= max_depth or len(labels) < 2 or not feats:
        return ("leaf", counts, major)
    h = ref_entropy(labels)
    gains = []
    for a in feats:
        rem = 0.0
        for v in (0, 1):
            sub = [y for r, y in zip(rows, labels) if r[a] == v]
            if sub:
                rem += len(sub) / len(labels) * ref_entropy(sub)
        gains.append(h - rem)
    best = 0
    for i in range(1, len(feats)):
        if gains[i] > gains[best] + 1e-12:
            best = i
    if zero_gain_stop and gains[best] <= 1e-12:
        return ("leaf", counts, major)
    a = feats[best]
    rest = [f for f in feats if f != a]
    kids = []
    for v in (0, 1):
        sel = [(r, y) for r, y in zip(rows, labels) if r[a] == v]
        kids.append(
            ref_id3([r for r, _ in sel], [y for _, y in sel], rest, depth + 1, max_depth, k, zero_gain_stop, major)
        )
    return ("split", a, counts, tuple(kids))


def as_ref(node):
    if isinstance(node, Leaf):
        return ("leaf", tuple(float(c) for c in node.class_counts), node.predicted_class)
    return ("split", node.feature, tuple(float(c) for c in node.class_counts), tuple(as_ref(c) for c in node.children))


def random_binary(rng, n, d, k=2):
    rows = rng.integers(0, 2, (n, d))
    # correlate the label with a random feature half the time so trees are not trivial
    y = rng.integers(0, k, n)
    if rng.random() < 0.5:
        y = np.where(rng.random(n) < 0.8, rows[:, int(rng.integers(0, d))] % k, y)
    return Dataset(binary_schema(d, 0, k), rows, y)


@pytest.mark.parametrize("null_split", [True, False])
def test_lambda_zero_matches_reference(null_split):
    rng = np.random.default_rng(11)
    for trial in range(400):
        n, d = int(rng.integers(1, 33)), int(rng.integers(1, 5))
        k = int(rng.integers(2, 4))
        data = random_binary(rng, n, d, k)
        depth = int(rng.integers(1, 6))
        tree = train_id3(data, TreeConfig(lam=0.0, max_depth=depth, null_split=null_split))
        ref = ref_id3(data.rows.astype(int).tolist(), data.labels.astype(int).tolist(), list(range(d)), 0, depth, k, null_split)
        assert as_ref(tree.root) == ref, trial


def test_exhaustive_tiny_datasets():
    # every labelling of every 3-row dataset over 2 binary features
    cells = list(itertools.product((0, 1), repeat=3))
    for combo in itertools.product(cells, repeat=3):
        rows = [list(c[:2]) for c in combo]
        labels = [c[2] for c in combo]
        data = Dataset(binary_schema(2), rows, labels)
        for null_split in (True, False):
            tree = train_id3(data, TreeConfig(max_depth=3, null_split=null_split))
            assert as_ref(tree.root) == ref_id3(rows, labels, [0, 1], 0, 3, 2, null_split)


def four_class_example():
    # f0 halves the classes {0,1} vs {2,3}; f1 separates all four
    schema = FeatureSchema(
        (Feature.categorical("f0", 2), Feature.categorical("f1", 4)), 0, LabelSpec("classification", 4)
    )
    rows, labels = [], []
    for c in range(4):
        for _ in range(3):
            rows.append([c // 2, c])
            labels.append(c)
    return Dataset(schema, rows, labels)


def test_large_lambda_prefers_two_way_split():
    data = four_class_example()
    table = root_score_table(data, TreeConfig(lam=1e3, null_split=False))
    by_feat = {r["feature"]: r for r in table}
    # hand formula: gain(f0) = ln 2, H = ln 2; gain(f1) = ln 4, H = ln 4
    assert abs(by_feat[0]["gain"] - math.log(2)) < 1e-12
    assert abs(by_feat[1]["gain"] - math.log(4)) < 1e-12
    assert abs(by_feat[0]["score"] - (math.log(2) - 1e3 * math.log(2))) < 1e-9
    assert abs(by_feat[1]["score"] - (math.log(4) - 1e3 * math.log(4))) < 1e-9
    tree = train_id3(data, TreeConfig(lam=1e3, max_depth=1, null_split=False))
    assert tree.root.feature == 0
    assert train_id3(data, TreeConfig(lam=0.0, max_depth=1)).root.feature == 1


def test_large_lambda_with_null_candidate_keeps_single_leaf():
    tree = train_id3(four_class_example(), TreeConfig(lam=1e3))
    assert isinstance(tree.root, Leaf)


def test_root_score_table_eight_rows():
    rows = [[0, 0, 1], [0, 1, 0], [1, 0, 0], [1, 1, 1], [0, 0, 0], [1, 1, 0], [0, 1, 1], [1, 0, 1]]
    labels = [0, 0, 1, 1, 0, 1, 1, 0]
    data = Dataset(binary_schema(3), rows, labels)
    lam = 0.37
    table = root_score_table(data, TreeConfig(lam=lam))
    root_major = ref_majority(labels, 2)
    for r in table:
        a = r["feature"]
        gain = ref_entropy(labels)
        preds = []
        for v in (0, 1):
            sub = [y for row, y in zip(rows, labels) if row[a] == v]
            gain -= len(sub) / 8 * ref_entropy(sub)
            preds += [ref_majority(sub, 2) if sub else root_major] * len(sub)
        h = ref_entropy(preds)
        assert abs(r["gain"] - gain) < 1e-10
        assert abs(r["entropy"] - h) < 1e-10
        assert abs(r["score"] - (gain - lam * h)) < 1e-10


def prediction_entropy(tree, data):
    return empirical_entropy(predict_batch(tree, data.rows)[0])


def test_prediction_entropy_non_increasing_in_lambda():
    schema, cfg = preset("fivethirtyeight", 600)
    data = synth_generate(cfg, schema, 3)
    hs = [prediction_entropy(train_id3(data, TreeConfig(lam=lam, max_depth=4)), data) for lam in (0, 0.01, 0.1, 1, 10)]
    assert all(b <= a + 1e-9 for a, b in zip(hs, hs[1:])), hs


def test_empty_child_gets_parent_majority():
    schema = FeatureSchema((Feature.categorical("a", 3), Feature.categorical("b", 2)), 0, LabelSpec("classification", 2))
    data = Dataset(schema, [[0, 0], [0, 0], [1, 1], [1, 1], [1, 1]], [0, 0, 1, 1, 1])
    tree = train_id3(data, TreeConfig(max_depth=2))
    assert tree.root.feature == 0
    empty = tree.root.children[2]
    assert isinstance(empty, Leaf) and empty.total == 0 and empty.predicted_class == 1


def test_config_errors():
    with pytest.raises(ValueError):
        TreeConfig(max_depth=0)
    with pytest.raises(ValueError):
        TreeConfig(min_samples_split=1)
    with pytest.raises(ValueError):
        TreeConfig(criterion="chi2")
    schema = FeatureSchema((Feature.continuous("x", 0, 1),), 0, LabelSpec("classification", 2))
    with pytest.raises(SchemaError):
        train_id3(Dataset(schema, [[0.5]], [0]), TreeConfig())


def test_gini_criterion_runs_and_splits_on_signal():
    data = Dataset(binary_schema(2), [[0, 0], [0, 1], [1, 0], [1, 1]] * 3, [0, 0, 1, 1] * 3)
    tree = train_id3(data, TreeConfig(criterion="gini"))
    assert tree.root.feature == 0


# ---------------------------------------------------------------------------
# Priority


def sensitive_depths(tree):
    out = []
    for path, _ in tree.paths():
        for depth, (feat, _) in enumerate(path):
            if feat == tree.schema.sensitive_index:
                out.append(depth)
    return out


def fivethirtyeight(n=800, seed=5):
    schema, cfg = preset("fivethirtyeight", n)
    return synth_generate(cfg, schema, seed)


def test_priority_zero_is_plain_id3():
    data = fivethirtyeight()
    cfg = TreeConfig(max_depth=4)
    assert train_priority(data, cfg, 0).root == train_id3(data, cfg).root


def test_priority_beyond_depth_never_splits_sensitive():
    data = fivethirtyeight()
    tree = train_priority(data, TreeConfig(max_depth=3), 4)
    assert sensitive_depths(tree) == []


def test_priority_min_depth_two():
    data = fivethirtyeight()
    # the unrestricted tree splits the sensitive feature at the root
    assert 0 in sensitive_depths(train_id3(data, TreeConfig(max_depth=4)))
    tree = train_priority(data, TreeConfig(max_depth=4), 2)
    assert all(d >= 2 for d in sensitive_depths(tree))
    with pytest.raises(ValueError):
        train_priority(data, TreeConfig(), -1)


# ---------------------------------------------------------------------------
# DP-ID3


def test_dp_large_epsilon_matches_root():
    data = fivethirtyeight(2000)
    cfg = TreeConfig(max_depth=3)
    plain = train_id3(data, cfg).root.feature
    agree = sum(
        isinstance(t.root, Internal) and t.root.feature == plain
        for t in (train_dp_id3(data, 1e6, cfg, s) for s in range(20))
    )
    assert agree >= 19


def test_dp_determinism_and_budget():
    data = fivethirtyeight(500)
    cfg = TreeConfig(max_depth=3)
    a = train_dp_id3(data, 2.0, cfg, 7)
    assert a.to_json() == train_dp_id3(data, 2.0, cfg, 7).to_json()
    assert a.to_json() != train_dp_id3(data, 2.0, cfg, 8).to_json()
    assert a.meta["epsilon_spent"] <= 2.0
    assert a.meta["epsilon_per_release"] == 2.0 / 8
    big = train_dp_id3(data, 1e6, cfg, 0)
    assert big.meta["epsilon_spent"] == 1e6
    for leaf in a.leaves():
        assert min(leaf.class_counts) >= 0
    with pytest.raises(ValueError):
        train_dp_id3(data, 0.0, cfg, 0)


def test_exponential_mechanism_probs():
    p = exponential_mechanism_probs([0.0, math.log(3.0)], 2.0, 1.0)
    np.testing.assert_allclose(p, [0.25, 0.75], rtol=1e-12)
    q = exponential_mechanism_probs([-1e6, 0.0, -5e5], 1e6, 1.0)
    np.testing.assert_allclose(q, [0, 1, 0], atol=1e-300)


def test_dp_quality_and_sensitivity():
    cc = np.array([[3.0, 1.0], [0.0, 2.0]])
    assert math.isclose(dp_quality(cc, "infogain"), 3 * math.log(0.75) + math.log(0.25))
    assert math.isclose(dp_quality(cc, "gini"), -(4 - 10 / 4) - (2 - 2))
    assert dp_sensitivity("infogain", 99) == math.log(100) + 1
    assert dp_sensitivity("gini", 99) == 2.0


def test_dp_root_distribution_matches_mechanism():
    rng = np.random.default_rng(2)
    n = 40
    rows = rng.integers(0, 2, (n, 3))
    y = np.where(rng.random(n) < 0.7, rows[:, 0], rows[:, 1])
    data = Dataset(binary_schema(3), rows, y)
    eps, cfg = 4.0, TreeConfig(max_depth=1)
    eps_level = eps / 4
    quals = []
    for a in range(3):
        cc = np.zeros((2, 2))
        np.add.at(cc, (rows[:, a], y), 1.0)
        quals.append(dp_quality(cc, "infogain"))
    probs = exponential_mechanism_probs(quals, eps_level, math.log(n + 1) + 1)
    roots = [train_dp_id3(data, eps, cfg, s).root for s in range(500)]
    feats = [r.feature for r in roots if isinstance(r, Internal)]
    assert len(feats) >= 490
    obs = np.bincount(feats, minlength=3)
    assert stats.chisquare(obs, probs * obs.sum()).pvalue > 0.01


# ---------------------------------------------------------------------------
# Inference


def hand_tree():
    schema = binary_schema(2)
    root = Internal(
        0,
        (
            Leaf((5.0, 0.0), 0, 1),
            Internal(1, (Leaf((2.0, 2.0), 0, 2), Leaf((1.0, 3.0), 1, 2)), (3.0, 5.0), 1),
        ),
        (8.0, 5.0),
        0,
    )
    return DecisionTree(root, schema, "infogain")


def test_predict_hand_tree():
    t = hand_tree()
    cls, conf, flagged = predict(t, [0, 1])
    assert cls == 0 and conf.tolist() == [1.0, 0.0] and not flagged
    cls, conf, _ = predict(t, [1, 0])
    assert cls == 0 and conf.tolist() == [0.5, 0.5]
    cls, conf, _ = predict(t, [1, 1])
    assert cls == 1 and conf.tolist() == [0.25, 0.75]
    classes, confs = predict_batch(t, [[0, 1], [1, 0], [1, 1]])
    assert classes.tolist() == [0, 0, 1]
    np.testing.assert_array_equal(confs[2], [0.25, 0.75])


def test_predict_missing_child_routes_to_largest_sibling():
    schema = FeatureSchema((Feature.categorical("a", 3),), 0, LabelSpec("classification", 2))
    root = Internal(0, (Leaf((1.0, 0.0), 0, 1), Leaf((0.0, 4.0), 1, 1)), (1.0, 4.0), 0)
    t = DecisionTree(root, schema, "infogain")
    cls, _, flagged = predict(t, [2])
    assert cls == 1 and flagged
    assert predict_batch(t, [[2], [0]])[0].tolist() == [1, 0]


def test_zero_total_leaf_is_uniform():
    schema = binary_schema(1)
    t = DecisionTree(Leaf((0.0, 0.0), 0, 0), schema, "infogain")
    assert predict(t, [0])[1].tolist() == [0.5, 0.5]


def test_json_roundtrip_and_invariants():
    data = fivethirtyeight(400)
    t = train_id3(data, TreeConfig(max_depth=3))
    again = DecisionTree.from_dict(json.loads(t.to_json()))
    assert again.to_json() == t.to_json()
    assert t.depth() <= 3
    # leaf counts partition the training set
    assert sum(leaf.total for leaf in t.leaves()) == data.n
    for path, _ in t.paths():
        feats = [f for f, _ in path]
        assert len(feats) == len(set(feats))
