import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedep.client import HyperParams
from fedep.data import SyntheticSpec, generate_synthetic
from fedep.detection import (
    ConfusionCounts,
    ScoredDataset,
    ThresholdPolicy,
    calibration_shards,
    confusion,
    evaluate_bases,
    evaluate_run,
    feature_importance,
    metrics,
    percentile_nearest_rank,
    reconstruction_score,
    reconstruction_scores,
    roc_auc,
    select_threshold,
)
from fedep.federation import init_run, run_to_completion
from fedep.linalg import ShapeError
from oracles import best_f1_sweep, mann_whitney_auc, random_stiefel


def test_scored_dataset_validation():
    with pytest.raises(ValueError):
        ScoredDataset([], [])
    with pytest.raises(ValueError):
        ScoredDataset([1.0, 2.0], [0])
    with pytest.raises(ValueError):
        ScoredDataset([-1.0], [0])
    with pytest.raises(ValueError):
        ScoredDataset([1.0], [2])


def test_reconstruction_score_examples(rng):
    W = random_stiefel(rng, 5, 2)
    assert reconstruction_score(W[:, 0], W) < 1e-28
    x = rng.standard_normal(5)
    x_perp = x - W @ (W.T @ x)
    assert reconstruction_score(x_perp, W) == pytest.approx(x_perp @ x_perp, rel=1e-12)
    P = np.eye(5) - W @ W.T
    assert abs(reconstruction_score(x, W) - np.sum((P @ x) ** 2)) <= 1e-10
    with pytest.raises(ShapeError):
        reconstruction_score(np.ones(4), W)


def test_score_rotation_invariance(rng):
    W = random_stiefel(rng, 6, 3)
    O = random_stiefel(rng, 3, 3)
    X = rng.standard_normal((6, 20))
    np.testing.assert_allclose(reconstruction_scores(X, W), reconstruction_scores(X, W @ O), atol=1e-10)


def test_percentile_threshold_examples():
    assert select_threshold(np.arange(1, 101)) == 95
    assert select_threshold(np.full(7, 2.5), ThresholdPolicy(q=30)) == 2.5
    assert percentile_nearest_rank([3.0, 1.0, 2.0], 0) == 1.0
    assert percentile_nearest_rank([3.0, 1.0, 2.0], 100) == 3.0
    with pytest.raises(ValueError):
        select_threshold([])
    with pytest.raises(ValueError):
        ThresholdPolicy(kind="otsu")
    with pytest.raises(ValueError):
        select_threshold([1.0, 2.0], ThresholdPolicy("best_f1"))


def test_best_f1_matches_exhaustive_sweep():
    s = np.array([0.1, 0.4, 0.35, 0.8, 0.7, 0.2])
    y = np.array([0, 1, 0, 1, 1, 0])
    thr = select_threshold(s, ThresholdPolicy("best_f1"), y)
    assert metrics(confusion(ScoredDataset(s, y), thr))["f1"] == pytest.approx(best_f1_sweep(s, y))
    rng = np.random.default_rng(5)
    for _ in range(20):
        s = rng.random(12).round(1)
        y = rng.integers(0, 2, 12)
        y[0] = 1
        thr = select_threshold(s, ThresholdPolicy("best_f1"), y)
        assert metrics(confusion(ScoredDataset(s, y), thr))["f1"] == pytest.approx(best_f1_sweep(s, y))


def test_confusion_examples():
    s = np.array([0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8, 0.4])
    y = np.array([0, 1, 0, 1, 0, 0, 0, 1])
    c = confusion(ScoredDataset(s, y), 0.45)
    # flagged: 0.9(1) 0.7(1) 0.5(0) 0.8(0); unflagged 0.1 0.3 0.2 (0) and 0.4(1)
    assert (c.TP, c.TN, c.FP, c.FN) == (2, 3, 2, 1)
    lo = confusion(ScoredDataset(s, y), -1.0)
    assert lo.TN == lo.FN == 0
    hi = confusion(ScoredDataset(s, y), 1.0)
    assert hi.TP == hi.FP == 0
    # ties go to normal
    assert confusion(ScoredDataset([0.5], [1]), 0.5).FN == 1


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=30), st.data())
def test_confusion_monotone_in_threshold(scores, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    sd = ScoredDataset(scores, y)
    ts = sorted(data.draw(st.lists(st.floats(-1, 11, allow_nan=False), min_size=2, max_size=5)))
    cs = [confusion(sd, t) for t in ts]
    for a, b in zip(cs, cs[1:]):
        assert b.TP <= a.TP and b.FP <= a.FP
    assert all(c.total == len(scores) for c in cs)


def test_metrics_examples():
    m = metrics(ConfusionCounts(TP=1, TN=1, FP=0, FN=0))
    assert m["acc"] == 1 and m["f1"] == 1 and m["fnr"] == 0
    m = metrics(ConfusionCounts(TP=3, FP=1, FN=2, TN=4))
    assert m["pre"] == 0.75 and m["rec"] == 0.6 and m["acc"] == 0.7
    assert m["f1"] == pytest.approx(2 / 3, abs=1e-4)
    # undefined is None, not zero
    m = metrics(ConfusionCounts(TN=5))
    assert m["pre"] is None and m["rec"] is None and m["fnr"] is None and m["f1"] is None
    assert m["acc"] == 1.0


def test_rec_fnr_identity_from_reported_row():
    # published operating point: recall 96.67% with FNR 3.33%
    c = ConfusionCounts(TP=9667, FN=333, FP=10, TN=10)
    m = metrics(c)
    assert m["rec"] == pytest.approx(0.9667) and m["fnr"] == pytest.approx(0.0333)
    assert m["rec"] + m["fnr"] == 1.0


def test_roc_examples():
    pts, auc = roc_auc(ScoredDataset([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))
    assert auc == 1.0
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    # alternating labels by rank
    s = np.arange(10, dtype=float)
    y = np.array([0, 1] * 5)
    assert roc_auc(ScoredDataset(s, y))[1] == pytest.approx(mann_whitney_auc(s, y), abs=1e-12)
    assert roc_auc(ScoredDataset([1.0, 1.0, 1.0], [0, 1, 0]))[1] == 0.5
    with pytest.raises(ValueError):
        roc_auc(ScoredDataset([1.0, 2.0], [1, 1]))


def test_auc_matches_rank_sum_on_random_sets():
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = int(rng.integers(4, 60))
        s = rng.integers(0, 8, n).astype(float) if rng.random() < 0.5 else rng.random(n)
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        assert abs(roc_auc(ScoredDataset(s, y))[1] - mann_whitney_auc(s, y)) <= 1e-12


def test_feature_importance(rng):
    W = np.zeros((4, 2))
    W[2] = [0.6, -0.8]
    np.testing.assert_allclose(feature_importance(W), [0, 0, 1.4, 0])
    W = random_stiefel(rng, 6, 2)
    perm = rng.permutation(6)
    np.testing.assert_allclose(feature_importance(W[perm]), feature_importance(W)[perm])
    oracle = [sum(abs(v) for v in row) for row in W]
    np.testing.assert_allclose(feature_importance(W), oracle)


@pytest.fixture(scope="module")
def trained():
    data = generate_synthetic(SyntheticSpec(n=12, p=60, m_true=3, d=3, seed=4, n_test=80))
    run = init_run(data.shards, HyperParams(rank=3, K_max=5), seed=4)
    run_to_completion(run, serial=True)
    return run, list(zip(data.test_X, data.test_labels))


def test_evaluate_run_pooled_is_sum(trained):
    run, test = trained
    rep = evaluate_run(run, test)
    total = ConfusionCounts()
    for c in rep.clients:
        total = total + c.counts
    assert rep.pooled_counts == total
    assert rep.pooled_counts.total == sum(len(y) for _, y in test)
    m = rep.pooled_metrics
    if m["rec"] is not None:
        assert m["rec"] + m["fnr"] == pytest.approx(1.0, abs=1e-15)


def test_evaluate_run_modes(trained):
    run, test = trained
    with pytest.raises(ValueError):
        evaluate_run(run, test, mode="local")
    with pytest.raises(ValueError):
        evaluate_run(run, test[:1])
    rep = evaluate_run(run, test, mode="global", calibration="raw")
    assert rep.mode == "global"
    with pytest.raises(ValueError):
        calibration_shards(run, "clean")


def test_identical_bases_make_modes_agree(rng):
    W = random_stiefel(rng, 6, 2)
    test = [(rng.standard_normal((6, 30)), rng.integers(0, 2, 30)) for _ in range(3)]
    cal = [(rng.standard_normal((6, 20)), None) for _ in range(3)]
    a = evaluate_bases([W] * 3, test, cal, mode="personalized")
    b = evaluate_bases([W] * 3, test, cal, mode="global")
    assert a.pooled_counts == b.pooled_counts and a.auc == b.auc


def test_single_client_pooled_equals_client(rng):
    W = random_stiefel(rng, 6, 2)
    test = [(rng.standard_normal((6, 30)), np.r_[np.zeros(15, int), np.ones(15, int)])]
    rep = evaluate_bases([W], test, [(rng.standard_normal((6, 20)), None)])
    assert rep.pooled_counts == rep.clients[0].counts
    assert rep.pooled_metrics == rep.clients[0].metrics
    assert rep.auc == rep.clients[0].auc


def test_empty_shard_skipped(rng):
    W = random_stiefel(rng, 6, 2)
    test = [(np.zeros((6, 0)), np.zeros(0, int)), (rng.standard_normal((6, 10)), np.r_[np.zeros(5, int), np.ones(5, int)])]
    cal = [(rng.standard_normal((6, 5)), None)] * 2
    rep = evaluate_bases([W, W], test, cal)
    assert rep.clients[0].skipped and rep.clients[1].skipped is None
    assert rep.pooled_counts.total == 10


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_rec_plus_fnr_is_one(seed):
    r = np.random.default_rng(seed)
    s = r.random(20)
    y = r.integers(0, 2, 20)
    m = metrics(confusion(ScoredDataset(s, y), float(r.random())))
    if m["rec"] is not None:
        assert m["rec"] + m["fnr"] == 1.0
