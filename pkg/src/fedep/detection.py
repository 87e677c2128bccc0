"""Reconstruction-error anomaly scoring, thresholds, metrics and ROC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import Array, ShapeError

THRESHOLD_POLICIES = ("percentile", "best_f1")
EVAL_MODES = ("personalized", "global")
CALIBRATION_SOURCES = ("purified", "raw")


@dataclass
class ScoredDataset:
    scores: Array
    labels: Array

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        self.labels = np.asarray(self.labels, dtype=int).ravel()
        if self.scores.size < 1 or self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels need equal nonzero length")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and nonnegative")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    @property
    def n_samples(self) -> int:
        return self.scores.size


def reconstruction_scores(X: Array, W: Array) -> Array:
    """Per-column ||x - W W^T x||^2 for X of shape features x samples."""
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != W.shape[0]:
        raise ShapeError(f"samples have {X.shape[0]} features, basis has {W.shape[0]} rows")
    R = X - W @ (W.T @ X)
    return np.maximum(np.einsum("ij,ij->j", R, R), 0.0)


def reconstruction_score(x: Array, W: Array) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("reconstruction_score takes a single sample vector")
    return float(reconstruction_scores(x, W)[0])


@dataclass
class ConfusionCounts:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.TP + other.TP, self.TN + other.TN, self.FP + other.FP, self.FN + other.FN
        )


def confusion(scored: ScoredDataset, threshold: float) -> ConfusionCounts:
    """Predict attack iff score > threshold."""
    pred = scored.scores > threshold
    y = scored.labels == 1
    return ConfusionCounts(
        TP=int(np.sum(pred & y)),
        TN=int(np.sum(~pred & ~y)),
        FP=int(np.sum(pred & ~y)),
        FN=int(np.sum(~pred & y)),
    )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def metrics(c: ConfusionCounts) -> dict[str, float | None]:
    """acc, pre, rec, fnr, f1; a metric with a zero denominator is None."""
    return {
        "acc": _ratio(c.TP + c.TN, c.total),
        "pre": _ratio(c.TP, c.TP + c.FP),
        "rec": _ratio(c.TP, c.TP + c.FN),
        "fnr": _ratio(c.FN, c.TP + c.FN),
        "f1": _ratio(2 * c.TP, 2 * c.TP + c.FP + c.FN),
    }


def percentile_nearest_rank(scores: Array, q: float) -> float:
    """Smallest score with at least q% of the sample at or below it."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("cannot take a percentile of no scores")
    if not 0.0 <= q <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    rank = max(1, math.ceil(q / 100.0 * s.size))
    return float(s[rank - 1])


def best_f1_threshold(scored: ScoredDataset) -> float:
    """Threshold maximizing F1 over the midpoints between distinct scores.

    Candidates also include one point below the minimum and the maximum
    itself (everything flagged, nothing flagged). Ties go to the smaller
    threshold.
    """
    u = np.unique(scored.scores)
    cands = np.concatenate([[u[0] - 1.0], 0.5 * (u[:-1] + u[1:]), [u[-1]]])
    best, best_f1 = float(cands[0]), -1.0
    for thr in cands:
        f1 = metrics(confusion(scored, thr))["f1"]
        f1 = -1.0 if f1 is None else f1
        if f1 > best_f1:
            best, best_f1 = float(thr), f1
    return best


@dataclass(frozen=True)
class ThresholdPolicy:
    kind: str = "percentile"
    q: float = 95.0

    def __post_init__(self):
        if self.kind not in THRESHOLD_POLICIES:
            raise ValueError(f"threshold policy must be one of {THRESHOLD_POLICIES}, got {self.kind!r}")


def select_threshold(
    scores: Array,
    policy: ThresholdPolicy = ThresholdPolicy(),
    labels: Array | None = None,
) -> float:
    """Percentile of ``scores``, or the best-F1 cut when labels are given."""
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("threshold selection needs at least one score")
    if policy.kind == "percentile":
        return percentile_nearest_rank(scores, policy.q)
    if labels is None:
        raise ValueError("best_f1 threshold needs labeled calibration scores")
    return best_f1_threshold(ScoredDataset(scores, labels))


def roc_curve(scored: ScoredDataset) -> list[tuple[float, float]]:
    """(fpr, tpr) after each distinct threshold, from (0, 0) to (1, 1)."""
    y = scored.labels
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    ys = y[order]
    # last index of each tied-score group in descending order
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(ys)[ends]
    fp = np.cumsum(1 - ys)[ends]
    return [(0.0, 0.0)] + [(float(f / N), float(t / P)) for f, t in zip(fp, tp)]


def roc_auc(scored: ScoredDataset) -> tuple[list[tuple[float, float]], float]:
    """ROC points and trapezoidal AUC (tied scores count one half)."""
    pts = roc_curve(scored)
    f = np.array([p[0] for p in pts])
    t = np.array([p[1] for p in pts])
    auc = float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))
    return pts, min(1.0, max(0.0, auc))


def feature_importance(W: Array) -> Array:
    """Per-feature sum of absolute loadings."""
    return np.abs(np.asarray(W, dtype=float)).sum(axis=1)


@dataclass
class ClientEval:
    id: int
    n_samples: int
    threshold: float | None = None
    counts: ConfusionCounts | None = None
    metrics: dict | None = None
    auc: float | None = None
    skipped: str | None = None


@dataclass
class EvalReport:
    mode: str
    clients: list[ClientEval]
    pooled_counts: ConfusionCounts
    pooled_metrics: dict
    roc: list[tuple[float, float]] | None = None
    auc: float | None = None
    extra: dict = field(default_factory=dict)


def evaluate_bases(
    bases: Sequence[Array],
    test: Sequence[tuple[Array, Array]],
    calibration: Sequence[tuple[Array, Array | None]],
    policy: ThresholdPolicy = ThresholdPolicy(),
    mode: str = "personalized",
) -> EvalReport:
    """Score client i's test shard with ``bases[i]`` and a threshold from its
    calibration shard; pool the counts and the raw scores.

    Test and calibration shards are features x samples. A client with an
    empty test shard is skipped.
    """
    if not (len(bases) == len(test) == len(calibration)):
        raise ValueError("need one basis, test shard and calibration shard per client")
    per, counts = [], ConfusionCounts()
    all_s, all_y = [], []
    for i, (W, (Xt, yt), (Xc, yc)) in enumerate(zip(bases, test, calibration)):
        Xt = np.asarray(Xt, dtype=float)
        if Xt.ndim != 2 or Xt.shape[1] == 0:
            per.append(ClientEval(id=i, n_samples=0, skipped="empty test shard"))
            continue
        thr = select_threshold(reconstruction_scores(Xc, W), policy, yc)
        scored = ScoredDataset(reconstruction_scores(Xt, W), yt)
        c = confusion(scored, thr)
        auc = None
        if 0 < scored.labels.sum() < scored.n_samples:
            auc = roc_auc(scored)[1]
        per.append(ClientEval(i, scored.n_samples, thr, c, metrics(c), auc))
        counts = counts + c
        all_s.append(scored.scores)
        all_y.append(scored.labels)
    roc = auc = None
    if all_s:
        pooled = ScoredDataset(np.concatenate(all_s), np.concatenate(all_y))
        if 0 < pooled.labels.sum() < pooled.n_samples:
            roc, auc = roc_auc(pooled)
    return EvalReport(mode, per, counts, metrics(counts), roc, auc)


def calibration_shards(run, source: str = "purified") -> list[tuple[Array, None]]:
    """Unlabeled per-client training data for threshold selection.

    ``purified`` uses X_i - S_i, the shard with its estimated sparse
    outliers removed; ``raw`` uses X_i.
    """
    if source not in CALIBRATION_SOURCES:
        raise ValueError(f"calibration source must be one of {CALIBRATION_SOURCES}, got {source!r}")
    if source == "raw":
        return [(c.X, None) for c in run.clients]
    return [(c.X - c.S, None) for c in run.clients]


def evaluate_run(
    run,
    test: Sequence[tuple[Array, Array]],
    mode: str = "personalized",
    policy: ThresholdPolicy = ThresholdPolicy(),
    calibration: Sequence[tuple[Array, Array | None]] | str = "purified",
) -> EvalReport:
    """Evaluate a federation run on per-client test shards.

    ``personalized`` scores client i with its own W_i, ``global`` scores
    every client with the orthonormalized consensus. ``calibration`` is a
    source name for :func:`calibration_shards` or explicit per-client
    (X, labels) pairs.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"eval mode must be one of {EVAL_MODES}, got {mode!r}")
    if len(test) != run.d:
        raise ValueError(f"{len(test)} test shards for {run.d} clients")
    if mode == "personalized":
        bases = [c.W for c in run.clients]
    else:
        bases = [run.V_orth] * run.d
    if isinstance(calibration, str):
        calibration = calibration_shards(run, calibration)
    return evaluate_bases(bases, test, calibration, policy, mode)
