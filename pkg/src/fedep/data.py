"""Dataset ingestion, z-score normalization, non-IID sharding and synthetic data.

Tabular data is held samples x features (one row per flow record); the
federation works on the transpose, features x samples.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .linalg import Array, qr_positive

log = logging.getLogger(__name__)

ONE_HOT_MAX_CATEGORIES = 8


class DataError(Exception):
    """Base class for ingestion failures."""


class MissingFileError(DataError):
    pass


class MalformedHeaderError(DataError):
    pass


class LabelColumnError(DataError):
    pass


@dataclass
class Schema:
    """How to read one delimited dataset.

    ``normal_values`` lists label strings that mean benign traffic; every
    other label value is an attack. ``positive_values`` instead lists the
    attack labels explicitly (everything else is normal); set at most one.
    """

    label_column: str
    normal_values: list[str] = field(default_factory=lambda: ["normal", "0"])
    positive_values: list[str] | None = None
    categorical: list[str] = field(default_factory=list)
    drop: list[str] = field(default_factory=list)
    partition_key: str = "dst_bytes"
    delimiter: str = ","

    @classmethod
    def from_file(cls, path: str | Path) -> "Schema":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"schema file not found: {path}")
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if "label_column" not in raw:
            raise DataError(f"{path}: schema needs a 'label_column' entry")
        return cls(**raw)

    def is_attack(self, value: str) -> int:
        v = value.strip().lower()
        if self.positive_values is not None:
            return int(v in {p.lower() for p in self.positive_values})
        return int(v not in {p.lower() for p in self.normal_values})


@dataclass
class TabularDataset:
    feature_names: list[str]
    X: Array
    labels: Array | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.feature_names):
            raise ValueError(
                f"X has shape {self.X.shape} but {len(self.feature_names)} feature names"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (self.X.shape[0],):
                raise ValueError("labels must have one entry per sample")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "TabularDataset":
        idx = np.asarray(idx, dtype=int)
        labels = None if self.labels is None else self.labels[idx]
        return TabularDataset(list(self.feature_names), self.X[idx], labels, dict(self.provenance))


def ingest_csv(path: str | Path, schema: Schema) -> TabularDataset:
    """Read a header-first delimited file into a numeric dataset.

    Categorical columns with at most eight levels are one-hot encoded,
    larger ones ordinal-encoded (levels in sorted order). Rows with a
    wrong cell count or an unparseable numeric cell are dropped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedHeaderError(f"{path}: file is empty") from None
        if not header or any(h == "" for h in header) or len(set(header)) != len(header):
            raise MalformedHeaderError(f"{path}: header has empty or duplicate column names")
        if schema.label_column not in header:
            raise LabelColumnError(f"{path}: label column {schema.label_column!r} not in header")
        rows = list(reader)

    label_idx = header.index(schema.label_column)
    skip = set(schema.drop) | {schema.label_column}
    cat_cols = [c for c in header if c in set(schema.categorical) and c not in skip]
    num_cols = [c for c in header if c not in skip and c not in cat_cols]
    col_idx = {c: i for i, c in enumerate(header)}

    kept_num, kept_cat, labels = [], [], []
    dropped = 0
    for row in rows:
        if len(row) == 0:
            continue
        if len(row) != len(header):
            dropped += 1
            continue
        try:
            vals = [float(row[col_idx[c]]) for c in num_cols]
        except ValueError:
            dropped += 1
            continue
        if not all(np.isfinite(vals)):
            dropped += 1
            continue
        kept_num.append(vals)
        kept_cat.append([row[col_idx[c]].strip() for c in cat_cols])
        labels.append(schema.is_attack(row[label_idx]))

    blocks = [np.asarray(kept_num, dtype=float).reshape(len(kept_num), len(num_cols))]
    names = list(num_cols)
    encodings = {}
    for j, c in enumerate(cat_cols):
        col = [r[j] for r in kept_cat]
        levels = sorted(set(col))
        lookup = {v: k for k, v in enumerate(levels)}
        codes = np.array([lookup[v] for v in col], dtype=int)
        if len(levels) <= ONE_HOT_MAX_CATEGORIES:
            blocks.append(np.eye(len(levels))[codes] if len(col) else np.zeros((0, len(levels))))
            names.extend(f"{c}={v}" for v in levels)
            encodings[c] = {"kind": "one-hot", "levels": levels}
        else:
            blocks.append(codes[:, None].astype(float))
            names.append(c)
            encodings[c] = {"kind": "ordinal", "levels": levels}
    X = np.hstack(blocks) if blocks else np.zeros((len(labels), 0))
    prov = {
        "source": str(path),
        "rows_read": len(rows),
        "rows_kept": len(labels),
        "rows_dropped": dropped,
        "encodings": encodings,
    }
    log.info("ingested %s: kept %d rows, dropped %d", path, len(labels), dropped)
    return TabularDataset(names, X, np.asarray(labels, dtype=int), prov)


@dataclass
class NormalizationModel:
    feature_names: list[str]
    mean: Array
    std: Array

    @property
    def constant_features(self) -> list[str]:
        return [n for n, s in zip(self.feature_names, self.std) if s == 0]


def fit_zscore(train: TabularDataset) -> NormalizationModel:
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    return NormalizationModel(list(train.feature_names), mean, std)


def apply_zscore(model: NormalizationModel, data: TabularDataset) -> TabularDataset:
    """(x - mean) / std per feature; zero-variance features map to 0."""
    if data.X.shape[1] != len(model.mean):
        raise ValueError(
            f"model has {len(model.mean)} features, data has {data.X.shape[1]}"
        )
    safe = np.where(model.std > 0, model.std, 1.0)
    Z = (data.X - model.mean) / safe
    Z[:, model.std == 0] = 0.0
    prov = dict(data.provenance, normalized=True)
    return TabularDataset(list(data.feature_names), Z, data.labels, prov)


def align_features(data: TabularDataset, names: list[str]) -> TabularDataset:
    """Reorder columns to ``names``; absent columns become zeros, extras are dropped.

    Needed when a test file lacks some categorical level seen in training.
    """
    index = {n: j for j, n in enumerate(data.feature_names)}
    X = np.zeros((data.n_samples, len(names)))
    for j, n in enumerate(names):
        if n in index:
            X[:, j] = data.X[:, index[n]]
    missing = [n for n in names if n not in index]
    prov = dict(data.provenance, aligned_missing=missing)
    return TabularDataset(list(names), X, data.labels, prov)


def partition_noniid(
    data: TabularDataset,
    d: int,
    key_feature: str,
    mode: str = "contiguous",
    seed: int = 0,
) -> list[TabularDataset]:
    """Split into ``d`` shards by sorting on ``key_feature``.

    ``contiguous`` cuts the stably sorted order (ties by original index) into
    near-equal runs. ``quantile`` groups samples into ``4 d`` key-quantile
    bins and orders them randomly within each bin before cutting, so heavily
    tied keys do not leave shard membership to file order.
    """
    if key_feature not in data.feature_names:
        raise KeyError(f"partition key {key_feature!r} is not a feature")
    if d < 1 or d > data.n_samples:
        raise ValueError(f"cannot split {data.n_samples} samples into {d} shards")
    key = data.X[:, data.feature_names.index(key_feature)]
    if mode == "contiguous":
        order = np.argsort(key, kind="stable")
    elif mode == "quantile":
        edges = np.quantile(key, np.linspace(0, 1, 4 * d + 1)[1:-1])
        bins = np.searchsorted(edges, key, side="right")
        jitter = np.random.default_rng(seed).random(len(key))
        order = np.lexsort((jitter, bins))
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [data.subset(p) for p in np.array_split(order, d)]


def split_validation(data: TabularDataset, fraction: float = 0.1, seed: int = 0) -> tuple[TabularDataset, TabularDataset]:
    """Carve a seeded random validation subset off a shard."""
    n = data.n_samples
    k = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[k:])), data.subset(np.sort(perm[:k]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Low-rank-plus-sparse generator settings.

    The clean signal W* C has unit entry variance, so ``noise_sigma`` is
    relative to it. Outliers have magnitude ``outlier_magnitude``, which
    defaults to ``10 * noise_sigma``.
    """

    n: int = 30
    p: int = 200
    m_true: int = 5
    d: int = 5
    outlier_fraction: float = 0.05
    noise_sigma: float = 0.1
    seed: int = 0
    outlier_magnitude: float | None = None
    n_test: int = 200
    anomaly_fraction: float = 0.2
    anomaly_magnitude: float = 0.2
    n_val: int = 50

    def __post_init__(self):
        if not 1 <= self.m_true <= self.n:
            raise ValueError("need 1 <= m_true <= n")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.d < 1 or self.p < 1:
            raise ValueError("need d >= 1 and p >= 1")

    @property
    def magnitude(self) -> float:
        return 10.0 * self.noise_sigma if self.outlier_magnitude is None else self.outlier_magnitude


@dataclass
class SyntheticData:
    W_true: Array
    shards: list[Array]           # each n x p, features x samples
    clean: list[Array]
    outliers: list[Array]
    test_X: list[Array]           # per client, n x n_test
    test_labels: list[Array]
    val_X: list[Array] = field(default_factory=list)
    val_labels: list[Array] = field(default_factory=list)


def _labeled_draw(W: Array, spec: SyntheticSpec, count: int, rng) -> tuple[Array, Array]:
    n, m = W.shape
    L = W @ (np.sqrt(n / m) * rng.standard_normal((m, count)))
    y = (rng.random(count) < spec.anomaly_fraction).astype(int)
    off = rng.standard_normal((n, count))
    off -= W @ (W.T @ off)
    off *= spec.anomaly_magnitude * np.sqrt(n) / np.linalg.norm(off, axis=0)
    return L + off * y + spec.noise_sigma * rng.standard_normal((n, count)), y


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Shards X_i = W* C_i + S*_i + noise with a shared planted basis W*.

    Test samples per client are fresh in-subspace points (label 0) or
    in-subspace points plus an off-subspace offset of norm
    ``anomaly_magnitude * sqrt(n)`` (label 1), all with the same noise.
    A labeled validation draw of ``n_val`` per client comes from a separate
    stream, so it never shifts the shards or the test set.
    """
    rng = np.random.default_rng(spec.seed)
    n, m = spec.n, spec.m_true
    W = qr_positive(rng.standard_normal((n, m)))[0]
    coef_scale = np.sqrt(n / m)
    shards, clean, outs, tX, tY = [], [], [], [], []
    for _ in range(spec.d):
        L = W @ (coef_scale * rng.standard_normal((m, spec.p)))
        mask = rng.random((n, spec.p)) < spec.outlier_fraction
        S = np.zeros((n, spec.p))
        S[mask] = spec.magnitude * rng.choice([-1.0, 1.0], size=int(mask.sum()))
        E = spec.noise_sigma * rng.standard_normal((n, spec.p))
        shards.append(L + S + E)
        clean.append(L)
        outs.append(S)
        Xt, y = _labeled_draw(W, spec, spec.n_test, rng)
        tX.append(Xt)
        tY.append(y)
    vrng = np.random.default_rng([spec.seed, 1])
    val = [_labeled_draw(W, spec, spec.n_val, vrng) for _ in range(spec.d)]
    return SyntheticData(W, shards, clean, outs, tX, tY, [v[0] for v in val], [v[1] for v in val])
