"""Command-line entry point: ``fedep <command> --config PATH``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure. Every file written starts with a header naming the tool version
and the config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import DataError
from .detection import EVAL_MODES, EvalReport, feature_importance
from .experiment import (
    Prepared,
    ablate,
    bench,
    evaluate_model,
    grid_search,
    linear_fit,
    prepare_data,
    rank_sweep,
    train,
)
from .federation import AggregationError, init_run, monotonicity_check, write_telemetry
from .linalg import ShapeError

log = logging.getLogger("fedep")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_KEYS = ("acc", "pre", "rec", "fnr", "f1")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


class Outputs:
    """Writes header-stamped files into one directory."""

    def __init__(self, out_dir: str | Path, config_hash: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.header = f"fedep {__version__} config {config_hash}"
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.written.append(p)
        return p

    def table(self, name: str, columns: list[str], rows: list[list]) -> Path:
        p = self.path(name)
        with open(p, "w") as f:
            f.write(f"# {self.header}\n")
            f.write("\t".join(columns) + "\n")
            for r in rows:
                f.write("\t".join(fmt(v) for v in r) + "\n")
        return p

    def text(self, name: str, body: str) -> Path:
        p = self.path(name)
        p.write_text(f"# {self.header}\n{body}")
        return p

    def figure(self, name: str, fn, *args, **kw) -> Path:
        return fn(*args, path=self.path(name), header=self.header, **kw)


def report_rows(report: EvalReport) -> list[list]:
    rows = []
    for c in report.clients:
        if c.skipped:
            rows.append([report.mode, c.id, 0, None, None, None, None, None] + [None] * 6)
            continue
        k = c.counts
        rows.append([report.mode, c.id, c.n_samples, c.threshold, k.TP, k.TN, k.FP, k.FN]
                    + [c.metrics[m] for m in METRIC_KEYS] + [c.auc])
    k = report.pooled_counts
    rows.append([report.mode, "pooled", k.total, None, k.TP, k.TN, k.FP, k.FN]
                + [report.pooled_metrics[m] for m in METRIC_KEYS] + [report.auc])
    return rows


REPORT_COLUMNS = ["mode", "client", "n", "threshold", "TP", "TN", "FP", "FN", *METRIC_KEYS, "auc"]


def write_eval(out: Outputs, prefix: str, reports: dict[str, EvalReport]) -> None:
    rows = []
    for mode in EVAL_MODES:
        rows.extend(report_rows(reports[mode]))
    out.table(f"{prefix}metrics.tsv", REPORT_COLUMNS, rows)
    curves = {}
    for mode in EVAL_MODES:
        if reports[mode].roc is not None:
            out.table(f"{prefix}roc_{mode}.tsv", ["fpr", "tpr"], [list(p) for p in reports[mode].roc])
            curves[f"{mode} (AUC {reports[mode].auc:.3f})"] = reports[mode].roc
    if curves:
        out.figure(f"{prefix}roc.png", plotting.roc_figure, curves)


def _check_shapes(run, prepared: Prepared) -> None:
    if run.d != len(prepared.shards):
        raise ShapeError(f"checkpoint has {run.d} clients, config yields {len(prepared.shards)}")
    if run.clients[0].W.shape[0] != prepared.n_features:
        raise ShapeError(
            f"checkpoint bases have {run.clients[0].W.shape[0]} features, data has {prepared.n_features}"
        )


def cmd_train(cfg, args, out: Outputs, base_dir: Path) -> int:
    prepared = prepare_data(cfg, base_dir=base_dir)
    if args.resume:
        run = load_checkpoint(args.resume, expected_hash=out.config_hash)
        _check_shapes(run, prepared)
        log.info("resuming from round %d", run.round)
    else:
        run = init_run(prepared.shards, cfg.hp, seed=cfg.seed)

    tele_path = out.path("telemetry.jsonl")
    with open(tele_path, "w") as tele:
        tele.write(json.dumps({"tool": "fedep", "version": __version__, "config_hash": out.config_hash}) + "\n")

        def on_round(r, rec):
            write_telemetry(rec, tele)
            if cfg.checkpoint_every and r.round % cfg.checkpoint_every == 0:
                save_checkpoint(out.path(f"checkpoint_round{r.round:04d}.npz"), r, out.config_hash, __version__)

        try:
            train(cfg, prepared, serial=args.serial, run=run, on_round=on_round)
        except AggregationError:
            # run_round leaves the run untouched when aggregation fails
            save_checkpoint(out.path("checkpoint_failed.npz"), run, out.config_hash, __version__)
            raise

    save_checkpoint(out.path("checkpoint.npz"), run, out.config_hash, __version__)
    trace = run.lagrangian_trace()
    rows = [[0, trace[0], None, None, None, None, None]]
    for rec in run.history:
        m = rec.metrics or {}
        rows.append([rec.round, rec.lagrangian, rec.gap_max, rec.gap_mean, m.get("acc"), m.get("f1"), m.get("auc")])
    out.table("trace.tsv", ["round", "lagrangian", "gap_max", "gap_mean", "acc", "f1", "auc"], rows)
    out.table("timing.tsv", ["round", "duration_ms"], [[r.round, r.duration_ms] for r in run.history])
    violations = monotonicity_check(trace) if len(trace) >= 2 else []
    out.table("monotonicity.tsv", ["round", "previous", "current", "excess"],
              [[v.round, v.previous, v.current, v.excess] for v in violations])
    if violations:
        log.warning("Lagrangian increased in %d round(s): %s", len(violations),
                    ", ".join(str(v.round) for v in violations))

    reports = {m: evaluate_model(cfg, run, prepared.test, m) for m in EVAL_MODES}
    write_eval(out, "", reports)
    names = prepared.feature_names
    imp = [feature_importance(run.V_orth)] + [feature_importance(c.W) for c in run.clients]
    out.table("importance.tsv", ["feature", "consensus"] + [f"client{c.id}" for c in run.clients],
              [[names[j]] + [v[j] for v in imp] for j in range(len(names))])
    out.figure("importance.png", plotting.importance_figure, names, imp[0])
    out.figure("lagrangian.png", plotting.lagrangian_figure, trace)
    if run.history:
        rounds = [r.round for r in run.history]
        series = {k: [(r.metrics or {}).get(k) for r in run.history] for k in ("acc", "f1")}
        out.figure("accuracy.png", plotting.rounds_figure, rounds, series)
    pooled = reports[cfg.eval_mode]
    print(f"trained {run.round} rounds on {run.d} clients; {cfg.eval_mode} pooled "
          f"F1 {fmt(pooled.pooled_metrics['f1'])} AUC {fmt(pooled.auc)}; "
          f"{len(violations)} monotonicity violation(s); outputs in {out.dir}")
    return EXIT_OK


def cmd_eval(cfg, args, out: Outputs, base_dir: Path) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else out.dir / "checkpoint.npz"
    run = load_checkpoint(ckpt, expected_hash=out.config_hash)
    prepared = prepare_data(cfg, base_dir=base_dir)
    _check_shapes(run, prepared)
    reports = {m: evaluate_model(cfg, run, prepared.test, m) for m in EVAL_MODES}
    write_eval(out, "eval_", reports)
    for m in EVAL_MODES:
        r = reports[m]
        print(f"{m}: " + " ".join(f"{k}={fmt(r.pooled_metrics[k])}" for k in METRIC_KEYS) + f" auc={fmt(r.auc)}")
    return EXIT_OK


def _summary_rows(label, reports: dict) -> list[list]:
    return [[k] + [r.pooled_metrics[m] for m in METRIC_KEYS] + [r.auc] for k, r in reports.items()]


def cmd_ablate(cfg, args, out: Outputs, base_dir: Path) -> int:
    prepared = prepare_data(cfg, base_dir=base_dir)
    reports = ablate(cfg, prepared, serial=args.serial)
    rows = _summary_rows("case", reports)
    out.table("ablation.tsv", ["case", *METRIC_KEYS, "auc"], rows)
    out.figure("ablation.png", plotting.bar_figure, list(reports),
               {"F1": [r.pooled_metrics["f1"] for r in reports.values()],
                "AUC": [r.auc for r in reports.values()]})
    for r in rows:
        print("\t".join(fmt(v) for v in r))
    return EXIT_OK


def cmd_rank_sweep(cfg, args, out: Outputs, base_dir: Path) -> int:
    ranks = [int(r) for r in args.ranks.split(",")] if args.ranks else list(cfg.ranks)
    prepared = prepare_data(cfg, base_dir=base_dir)
    reports = rank_sweep(cfg, prepared, ranks, serial=args.serial)
    rows = _summary_rows("rank", reports)
    out.table("rank_sweep.tsv", ["rank", *METRIC_KEYS, "auc"], rows)
    out.figure("rank_sweep.png", plotting.bar_figure, [str(r) for r in reports],
               {"Acc": [r.pooled_metrics["acc"] for r in reports.values()],
                "F1": [r.pooled_metrics["f1"] for r in reports.values()]}, xlabel="rank")
    for r in rows:
        print("\t".join(fmt(v) for v in r))
    return EXIT_OK


def cmd_grid(cfg, args, out: Outputs, base_dir: Path) -> int:
    prepared = prepare_data(cfg, base_dir=base_dir)
    rows, best = grid_search(cfg, prepared, serial=args.serial)
    keys = [k for k in ("alpha", "beta", "mu", "nu", "rank") if k in cfg.grid]
    out.table("grid.tsv", keys + [*METRIC_KEYS, "auc"],
              [[r[k] for k in keys] + [r[m] for m in METRIC_KEYS] + [r["auc"]] for r in rows])
    best_cfg = replace(cfg, hp=replace(cfg.hp, **{k: best[k] for k in keys}))
    out.text("grid_best.yaml", best_cfg.to_yaml())
    print("best: " + " ".join(f"{k}={fmt(best[k])}" for k in keys) + f" f1={fmt(best['f1'])}")
    return EXIT_OK


def cmd_bench(cfg, args, out: Outputs, base_dir: Path) -> int:
    counts = [int(c) for c in args.clients.split(",")] if args.clients else list(cfg.client_counts)
    rows = bench(cfg, counts, serial=args.serial, base_dir=base_dir)
    out.table("bench.tsv", ["clients", "median_ms", "rounds", "repeats"],
              [[r["clients"], r["median_ms"], r["rounds"], r["repeats"]] for r in rows])
    out.figure("timing.png", plotting.timing_figure, [r["clients"] for r in rows], [r["median_ms"] for r in rows])
    for r in rows:
        print(f"d={r['clients']}\t{r['median_ms']:.2f} ms/round")
    if len(rows) >= 2:
        slope, _, r2 = linear_fit([r["clients"] for r in rows], [r["median_ms"] for r in rows])
        print(f"slope {slope:.3f} ms/client, R^2 {r2:.3f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "rank-sweep": cmd_rank_sweep,
    "grid": cmd_grid,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedep", description="Personalized federated PCA for anomaly detection.")
    p.add_argument("--version", action="version", version=f"fedep {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--serial", action="store_true", help="run clients on one thread")
        s.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--resume", default=None, help="checkpoint to continue from")
        if name == "eval":
            s.add_argument("--checkpoint", default=None, help="defaults to OUT/checkpoint.npz")
        if name == "rank-sweep":
            s.add_argument("--ranks", default=None, help="comma-separated ranks")
        if name == "bench":
            s.add_argument("--clients", default=None, help="comma-separated client counts")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out_dir=args.out)
        out = Outputs(cfg.out_dir, cfg.hash())
        out.text("config.yaml", cfg.to_yaml())
        return COMMANDS[args.command](cfg, args, out, Path(args.config).resolve().parent)
    except (ConfigError, CheckpointError, ShapeError) as e:
        print(f"fedep: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"fedep: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"fedep: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"fedep: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
