"""End-to-end pipelines behind the CLI subcommands.

Everything here returns plain data; writing files is the CLI's job.
"""

from __future__ import annotations

import itertools
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .client import ABLATIONS, HyperParams
from .config import ExperimentConfig
from .data import (
    DataError,
    Schema,
    align_features,
    apply_zscore,
    fit_zscore,
    generate_synthetic,
    ingest_csv,
    partition_noniid,
    split_validation,
)
from .detection import EvalReport, evaluate_run
from .federation import FederationRun, RoundRecord, init_run, run_to_completion
from .linalg import Array


@dataclass
class Prepared:
    """Client shards (features x samples) and matching labeled test/validation shards."""

    shards: list[Array]
    test: list[tuple[Array, Array]]
    feature_names: list[str]
    validation: list[tuple[Array, Array]] = field(default_factory=list)
    W_true: Array | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.shards[0].shape[0]


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def prepare_data(cfg: ExperimentConfig, d: int | None = None, base_dir: Path | None = None) -> Prepared:
    """Synthetic draw, or ingest, normalize and partition the CSV files.

    The z-score model is fitted on the training file only. Training shards
    lose a seeded ``validation_fraction`` that serves grid search; test rows
    are partitioned on the same key so each gateway sees its own slice.
    """
    d = cfg.d if d is None else d
    dc = cfg.data
    if dc.is_synthetic:
        syn = generate_synthetic(dc.synthetic_spec(d, cfg.seed))
        return Prepared(
            shards=syn.shards,
            test=list(zip(syn.test_X, syn.test_labels)),
            feature_names=[f"f{j}" for j in range(syn.W_true.shape[0])],
            validation=list(zip(syn.val_X, syn.val_labels)),
            W_true=syn.W_true,
            provenance={"source": "synthetic"},
        )
    if dc.schema is None or dc.test is None:
        raise DataError("CSV input needs data.train, data.test and data.schema")
    schema = Schema.from_file(_resolve(dc.schema, base_dir))
    key = cfg.partition_key or schema.partition_key
    train = ingest_csv(_resolve(dc.train, base_dir), schema)
    test = align_features(ingest_csv(_resolve(dc.test, base_dir), schema), train.feature_names)
    if train.n_samples == 0 or test.n_samples == 0:
        raise DataError("training or test file has no usable rows")
    norm = fit_zscore(train)
    train, test = apply_zscore(norm, train), apply_zscore(norm, test)
    try:
        train_parts = partition_noniid(train, d, key, dc.partition_mode, cfg.seed)
        test_parts = partition_noniid(test, d, key, dc.partition_mode, cfg.seed)
    except (KeyError, ValueError) as e:
        raise DataError(f"partitioning failed: {e}") from e
    shards, val = [], []
    for i, part in enumerate(train_parts):
        fit, hold = split_validation(part, dc.validation_fraction, seed=cfg.seed + i)
        shards.append(fit.X.T.copy())
        val.append((hold.X.T.copy(), hold.labels))
    return Prepared(
        shards=shards,
        test=[(p.X.T.copy(), p.labels) for p in test_parts],
        feature_names=list(train.feature_names),
        validation=val,
        provenance={
            "train": train.provenance,
            "test": test.provenance,
            "constant_features": norm.constant_features,
        },
    )


def check_rank(rank: int, prepared: Prepared) -> None:
    if not 1 <= rank <= prepared.n_features:
        raise ValueError(f"rank {rank} outside [1, {prepared.n_features}]")


def train(
    cfg: ExperimentConfig,
    prepared: Prepared,
    hp: HyperParams | None = None,
    serial: bool = False,
    run: FederationRun | None = None,
    on_round: Callable[[FederationRun, RoundRecord], None] | None = None,
    track_metrics: bool = True,
) -> FederationRun:
    """Federate from scratch, or continue ``run`` up to ``hp.K_max``.

    With ``track_metrics`` every round record carries pooled test metrics in
    the configured eval mode.
    """
    hp = cfg.hp if hp is None else hp
    check_rank(hp.rank, prepared)
    if run is None:
        run = init_run(prepared.shards, hp, seed=cfg.seed)
    else:
        run.hp = hp
    evaluate = None
    if track_metrics:
        def evaluate(r):
            return summary(evaluate_model(cfg, r, prepared.test, cfg.eval_mode))
    return run_to_completion(run, serial=serial, evaluate=evaluate, on_round=on_round)


def evaluate_model(cfg: ExperimentConfig, run: FederationRun, test, mode: str) -> EvalReport:
    return evaluate_run(run, test, mode=mode, policy=cfg.threshold, calibration=cfg.calibration)


def summary(report: EvalReport) -> dict:
    out = dict(report.pooled_metrics)
    out["auc"] = report.auc
    return out


def ablate(cfg: ExperimentConfig, prepared: Prepared, serial: bool = False) -> dict[str, EvalReport]:
    """All four cases on one partition and seed."""
    out = {}
    for case in ABLATIONS:
        run = train(cfg, prepared, replace(cfg.hp, ablation=case), serial=serial, track_metrics=False)
        out[case] = evaluate_model(cfg, run, prepared.test, cfg.eval_mode)
    return out


def rank_sweep(cfg: ExperimentConfig, prepared: Prepared, ranks: list[int], serial: bool = False) -> dict[int, EvalReport]:
    if not ranks:
        raise ValueError("rank sweep needs at least one rank")
    for r in ranks:
        check_rank(r, prepared)
    out = {}
    for r in ranks:
        run = train(cfg, prepared, replace(cfg.hp, rank=r), serial=serial, track_metrics=False)
        out[r] = evaluate_model(cfg, run, prepared.test, cfg.eval_mode)
    return out


def grid_cells(grid: dict) -> list[dict]:
    keys = [k for k in ("alpha", "beta", "mu", "nu", "rank") if k in grid]
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("grid search needs a nonempty list for every grid key")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _grid_key(row: dict, hp: HyperParams):
    f1 = row["f1"]
    return (-(f1 if f1 is not None else -1.0), hp.rank, hp.alpha + hp.beta)


def grid_search(cfg: ExperimentConfig, prepared: Prepared, serial: bool = False) -> tuple[list[dict], dict]:
    """Score every cell on the validation shards; never reads the test shards.

    Best pooled F1 wins; ties go to the smaller rank, then smaller alpha + beta.
    """
    if not prepared.validation:
        raise DataError("grid search needs validation shards")
    cells = grid_cells(cfg.grid)
    for cell in cells:
        check_rank(cell.get("rank", cfg.hp.rank), prepared)
    rows, best, best_key = [], None, None
    for cell in cells:
        hp = replace(cfg.hp, **cell)
        run = train(cfg, prepared, hp, serial=serial, track_metrics=False)
        calibration = cfg.calibration
        if cfg.threshold.kind == "best_f1":
            calibration = prepared.validation
        rep = evaluate_run(run, prepared.validation, cfg.eval_mode, cfg.threshold, calibration)
        row = dict(cell, **summary(rep))
        rows.append(row)
        key = _grid_key(row, hp)
        if best_key is None or key < best_key:
            best, best_key = row, key
    return rows, best


def bench(cfg: ExperimentConfig, client_counts: list[int], serial: bool = False,
          base_dir: Path | None = None) -> list[dict]:
    """Median per-round wall time over all rounds of all repeats, per client count."""
    if not client_counts:
        raise ValueError("bench needs at least one client count")
    hp = replace(cfg.hp, K_max=cfg.bench_rounds, epsilon=0.0)
    rows = []
    for d in client_counts:
        prepared = prepare_data(cfg, d=d, base_dir=base_dir)
        times = []
        for _ in range(cfg.bench_repeats):
            run = train(cfg, prepared, hp, serial=serial, track_metrics=False)
            times.extend(r.duration_ms for r in run.history)
        rows.append({
            "clients": d,
            "median_ms": statistics.median(times),
            "rounds": hp.K_max,
            "repeats": cfg.bench_repeats,
        })
    return rows


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), r2
