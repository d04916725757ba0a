from __future__ import annotations

import json
from collections import Counter, defaultdict
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shockkit.cohort import EventSpec, build_cohort
from shockkit.errors import DataError
from shockkit.predictor import (
    FEATURE_WINDOW,
    LEAVE,
    STAY,
    FeatureSpace,
    MlpModel,
    TrainConfig,
    auc,
    build_features,
    cross_validate,
    decide,
    f1,
    one_hot,
    predict,
    stratified_folds,
    train,
    transfer_eval,
)


def separable(seed, n=500, m=12, signal="s00", vocab_prefix="s"):
    """Leavers post in ``signal``; stayers never do."""
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < 0.4).astype(np.int64)
    vocab = [f"{vocab_prefix}{i:02d}" for i in range(m)]
    counts = rng.poisson(3, size=(n, m))
    counts[:, vocab.index(signal)] = np.where(labels == 1, rng.poisson(20, n), 0)
    return FeatureSpace(vocab, [f"u{i}" for i in range(n)], counts, labels)


def numeric_gradients(model, x, targets, eps=1e-6):
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = model.loss(x, targets)
            p[idx] = old - eps
            down = model.loss(x, targets)
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-7):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# gradients

@pytest.mark.parametrize("seed,loss", list(product(range(3), ["lmse", "mse"])))
def test_gradient_check(seed, loss):
    rng = np.random.default_rng(seed)
    config = TrainConfig(hidden=7, seed=seed, loss=loss)
    model = MlpModel.initialize(5, config)
    for p in model.parameters():
        p += rng.normal(0, 0.3, size=p.shape)
    x = np.log1p(rng.poisson(4, size=(9, 5)))
    targets = one_hot(rng.integers(0, 2, size=9))
    _, analytic = model.loss_and_gradients(x, targets)
    assert max_rel_error(analytic, numeric_gradients(model, x, targets)) < 1e-4


def test_zero_input_bias_gradient():
    config = TrainConfig(hidden=4)
    model = MlpModel.initialize(3, config)
    for p in model.parameters():
        p[...] = 0.0
    x = np.zeros((6, 3))
    targets = one_hot(np.array([0, 1, 1, 0, 1, 1]))
    out = model.forward(x)
    assert np.allclose(out, 0.5)
    model.biases[-1][:] = [0.3, -0.2]
    assert np.allclose(model.forward(x), 1 / (1 + np.exp(-np.array([0.3, -0.2]))))
    _, grads = model.loss_and_gradients(x, targets)
    numeric = numeric_gradients(model, x, targets)
    assert np.allclose(grads[-1], numeric[-1], rtol=1e-6, atol=1e-10)


def test_loss_definition():
    model = MlpModel.initialize(2, TrainConfig(hidden=3))
    x = np.array([[0.5, 1.0], [2.0, 0.0]])
    t = one_hot(np.array([1, 0]))
    o = model.forward(x)
    assert model.loss(x, t) == pytest.approx(((np.log1p(o) - np.log1p(t)) ** 2).sum() / 2, rel=1e-12)
    assert np.all((o > 0) & (o < 1))


# training

def test_training_is_deterministic():
    fs = separable(0, n=120)
    a = train(fs.features(), fs.labels, TrainConfig(seed=3, epochs=5))
    b = train(fs.features(), fs.labels, TrainConfig(seed=3, epochs=5))
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = train(fs.features(), fs.labels, TrainConfig(seed=4, epochs=5))
    assert not all(np.array_equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_loss_decreases_on_separable_data():
    fs = separable(1)
    model = train(fs.features(), fs.labels, TrainConfig(seed=1))
    first = model.history[:11]
    assert all(b < a for a, b in zip(first, first[1:]))


def test_single_class_is_fatal():
    with pytest.raises(DataError):
        train(np.zeros((5, 2)), np.zeros(5, dtype=int))


def test_model_json_round_trip(tmp_path):
    fs = separable(2, n=80)
    model = train(fs.features(), fs.labels, TrainConfig(seed=0, epochs=2, hidden=5), fs.vocabulary)
    model.save(tmp_path / "m.json")
    again = MlpModel.from_dict(json.loads((tmp_path / "m.json").read_text()))
    assert np.array_equal(again.forward(fs.features()), model.forward(fs.features()))
    assert again.vocabulary == fs.vocabulary and again.layer_sizes == [12, 5, 5, 2]


# prediction and metrics

def test_tie_goes_to_stay():
    scores, labels = decide(np.array([[0.4, 0.4], [0.1, 0.9], [0.9, 0.1]]))
    assert labels.tolist() == [STAY, LEAVE, STAY]
    assert scores.tolist() == pytest.approx([0.5, 0.9, 0.1])


def test_predictions_invariant_to_batch_order():
    fs = separable(3, n=60)
    model = train(fs.features(), fs.labels, TrainConfig(seed=0, epochs=3, hidden=6))
    x = fs.features()
    perm = np.random.default_rng(0).permutation(len(x))
    s1, l1 = predict(model, x)
    s2, l2 = predict(model, x[perm])
    assert np.allclose(s1[perm], s2, rtol=0, atol=1e-15) and np.array_equal(l1[perm], l2)


def brute_force_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_extremes():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_auc_matches_all_pairs(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=30)
    labels[:2] = [0, 1]
    scores = np.round(rng.random(30), 1)  # coarse grid forces ties
    assert auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)
    assert auc(np.exp(3 * scores), labels) == pytest.approx(auc(scores, labels), abs=1e-12)


def test_f1_leave_class():
    assert f1([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert f1([0, 0], [0, 0]) == 0.0
    assert f1([1, 0], [1, 0]) == 1.0


# cross validation and transfer

@settings(max_examples=30, deadline=None)
@given(n=st.integers(10, 80), folds=st.integers(2, 6), seed=st.integers(0, 999))
def test_folds_partition_examples(n, folds, seed):
    labels = np.random.default_rng(seed).integers(0, 2, size=n)
    assignment = stratified_folds(labels, folds, seed)
    assert assignment.shape == (n,) and set(assignment) <= set(range(folds))
    for cls in (0, 1):
        per_fold = np.bincount(assignment[labels == cls], minlength=folds)
        assert per_fold.max() - per_fold.min() <= 1


def test_cv_on_separable_cohort():
    result = cross_validate(separable(0), 5, TrainConfig(seed=0))
    mean, half = result.summary("auc")
    assert len(result.folds) == 5 and mean >= 0.95 and half >= 0.0


def test_cv_needs_examples_of_each_class():
    fs = separable(0, n=30)
    fs.labels[:] = 0
    fs.labels[:3] = 1
    with pytest.raises(DataError):
        cross_validate(fs, 5)


def test_self_transfer_equals_in_sample():
    fs = separable(4, n=150)
    config = TrainConfig(seed=2, epochs=10)
    result = transfer_eval(fs, fs, config)
    scores, labels = predict(train(fs.features(), fs.labels, config, fs.vocabulary), fs.features())
    assert result.auc == auc(scores, fs.labels) and result.f1 == f1(labels, fs.labels)


def test_disjoint_vocabularies_give_chance_auc():
    train_fs = separable(5, n=150, vocab_prefix="a", signal="a00")
    test_fs = separable(6, n=150, vocab_prefix="b", signal="b00")
    result = transfer_eval(train_fs, test_fs, TrainConfig(seed=0, epochs=5))
    assert result.auc == 0.5


def test_alignment_by_name():
    fs = FeatureSpace(["a", "b", "c"], ["u"], np.array([[1, 2, 3]]), np.array([0]))
    aligned = fs.aligned(["c", "z", "a"])
    assert aligned.counts.tolist() == [[3, 0, 1]]


@pytest.mark.parametrize("seed", range(3))
def test_shared_signal_transfers(seed):
    train_fs = separable(seed, signal="s03")
    test_fs = separable(seed + 100, signal="s03", m=15)
    assert transfer_eval(train_fs, test_fs, TrainConfig(seed=seed)).auc > 0.8


# features from a store

@pytest.fixture(scope="module")
def features(synth_world):
    store, truth, _ = synth_world
    cohort = build_cohort(store, EventSpec("target", truth.spec.event_time))
    return cohort, build_features(store, cohort)


def test_labels_match_ground_truth(features, synth_world):
    _, truth, _ = synth_world
    cohort, fs = features
    assert fs.users == cohort.treatment_users
    expected = [int(truth.users[u]["inactive_by_grace"]["4"]) for u in fs.users]
    assert fs.labels.tolist() == expected


def test_vocabulary_and_counts_match_full_scan(features, synth_world):
    _, truth, out = synth_world
    cohort, fs = features
    event = truth.spec.event_time
    users = set(fs.users)
    per_user = defaultdict(Counter)
    for name in ("RS_synth.ndjson", "RC_synth.ndjson"):
        with open(out / "raw" / name) as fh:
            for line in fh:
                r = json.loads(line)
                if r["author"] in users and event - FEATURE_WINDOW <= r["created_utc"] < event:
                    per_user[r["author"]][r["subreddit"]] += 1
    vocab = sorted(set().union(*per_user.values()))
    assert fs.vocabulary == vocab
    for i, u in enumerate(fs.users):
        assert fs.counts[i].tolist() == [per_user[u][s] for s in vocab]
    assert np.array_equal(fs.features(), np.log1p(fs.counts))


def test_user_outside_vocabulary_is_zero_vector():
    fs = FeatureSpace(["a"], ["u", "v"], np.array([[0], [4]]), np.array([0, 1]))
    assert fs.aligned(["b"]).counts.tolist() == [[0], [0]]
