"""Command-line entry point.

    tabcascade synth      --out cohort.csv
    tabcascade preprocess cohort.csv --out clean.csv
    tabcascade train      cohort.csv --out model.json
    tabcascade cv         cohort.csv --out metrics.json
    tabcascade predict    model.json rows.csv --out predictions.csv
    tabcascade explain    model.json rows.csv --out importance.json
    tabcascade report     metrics.json

Exit codes: 0 success, 1 usage or configuration error, 2 data or schema
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cascade import (FHLabel, Superclass, cascade_from_dict, cascade_predict, cascade_to_dict,
                      explain, train_cascade)
from .config import RunConfig, load_config
from .data import FeatureEncoder, clean_table, load_csv, write_csv
from .errors import ConfigError, DataError, NumericError, SchemaError
from .experiment import render_table, run_cv_experiment
from .synthetic import generate_synthetic_cohort

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump_json(doc, path: Path | None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        _write_text(path, text)


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _read_json(path: Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path} is not valid JSON: {exc.msg}") from None


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _resolve(args, name: str):
    """Positional argument, else the matching ``paths`` entry of the config."""
    value = getattr(args, name, None) or getattr(args.config_obj.paths, name)
    if value is None:
        raise UsageError(f"{args.command}: no {name} path given (argument or paths.{name} in config)")
    return Path(value)


def _out_path(args) -> Path | None:
    out = args.out or args.config_obj.paths.out
    return Path(out) if out else None


def _log_epochs(args):
    if not args.verbose:
        return None

    def log(stage, epoch, lr, loss):
        print(f"{stage} epoch {epoch + 1} lr {lr:.6g} loss {loss:.6f}", file=sys.stderr, flush=True)

    return log


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_path(args)
    if out is None:
        raise UsageError("synth: --out is required")
    table = generate_synthetic_cohort(cfg.synthetic)
    write_csv(table, out, {"provenance": cfg.provenance()})
    counts = np.bincount(table.class_labels(), minlength=4)
    summary = {
        "path": str(out),
        "n_rows": table.n_rows,
        "n_columns": len(table.columns),
        "missing_cells": int(table.missing_mask().sum()),
        "class_distribution": {FHLabel(c).display: int(counts[c]) for c in range(4)},
    }
    if args.format == "json":
        _dump_json(summary, None)
    else:
        print(f"wrote {out} ({summary['n_rows']} rows, {summary['n_columns']} columns, "
              f"{summary['missing_cells']} missing cells)")
        for name, n in summary["class_distribution"].items():
            print(f"  {name:<9} {n}")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    table = load_csv(_resolve(args, "data"))
    clean, report = clean_table(table, cfg.evaluation.missing_threshold)
    doc = {**report.to_dict(), "provenance": cfg.provenance()}
    out = _out_path(args)
    if out is not None:
        write_csv(clean, out, {"provenance": cfg.provenance()})
        _dump_json(doc, out.with_name(out.stem + ".report.json"))
    if args.format == "json":
        _dump_json(doc, None)
    else:
        print(f"rows kept {report.n_rows} (dropped {report.rows_dropped}); "
              f"columns kept {report.n_columns}, encoded width {report.n_features}")
        for name, rate in report.dropped_columns.items():
            print(f"  dropped column {name} ({rate:.1%} missing)")
        for name, n in report.class_distribution.items():
            print(f"  {name:<9} {n}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_path(args)
    if out is None:
        raise UsageError("train: --out is required")
    table = load_csv(_resolve(args, "data"))
    clean, report = clean_table(table, cfg.evaluation.missing_threshold)
    encoder = FeatureEncoder.fit(clean)
    fm = encoder.transform(clean)
    model = train_cascade(fm.values, clean.class_labels(), cfg.plan, columns=fm.columns,
                          jobs=cfg.jobs, log=_log_epochs(args))
    model.preprocessor = encoder
    doc = cascade_to_dict(model)
    doc["provenance"] = cfg.provenance()
    doc["preprocess_report"] = report.to_dict()
    _write_text(out, json.dumps(doc) + "\n")
    final = {name: log[-1] for name, log in model.training_log.items()}
    if args.format == "json":
        _dump_json({"checkpoint": str(out), "final_loss": final}, None)
    else:
        print(f"wrote {out}")
        for name, loss in final.items():
            print(f"  {name:<8} final loss {loss:.6f}")
    return EXIT_OK


def _load_model_and_rows(args):
    doc = _read_json(_resolve(args, "checkpoint"), "checkpoint")
    try:
        model = cascade_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"checkpoint is malformed: {exc}") from None
    if model.preprocessor is None:
        raise SchemaError("checkpoint carries no preprocessing manifest")
    table = load_csv(_resolve(args, "rows"))
    expected = [c.name for c in model.preprocessor.columns]
    missing = [c for c in expected if c not in table.column_names]
    if missing:
        raise SchemaError(f"rows lack columns the model was trained on: {missing}")
    declared = {c.name: c for c in table.columns}
    clash = [c.name for c in model.preprocessor.columns if declared[c.name].kind != c.kind]
    if clash:
        raise SchemaError(f"column kinds differ from the training schema: {clash}")
    incomplete = np.flatnonzero(table.select_columns(expected).missing_mask().any(axis=1))
    if incomplete.size:
        raise DataError(f"rows with missing model inputs cannot be scored: {incomplete[:10].tolist()}")
    x = model.preprocessor.transform(table).values
    return doc, model, x


def cmd_predict(args, cfg: RunConfig) -> int:
    doc, model, x = _load_model_and_rows(args)
    batch = cascade_predict(model, x)
    out = _out_path(args)
    fh = sys.stdout if out is None else None
    rows = []
    for i in range(x.shape[0]):
        rows.append([i, Superclass(int(batch.route[i])).display, repr(float(batch.stage1_proba[i, 1])),
                     FHLabel(int(batch.labels[i])).display, repr(float(batch.final_proba[i]))])
    header = ["row_id", "stage1_route", "stage1_p_patient", "final_label", "final_p"]
    if out is None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return EXIT_OK
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc.strerror}") from None
    meta = {"provenance": doc.get("provenance"), "checkpoint": str(_resolve(args, "checkpoint")),
            "rows": str(_resolve(args, "rows"))}
    _dump_json(meta, _meta_path(out))
    if args.format == "json":
        _dump_json({"predictions": str(out), "n_rows": len(rows)}, None)
    else:
        print(f"wrote {out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_explain(args, cfg: RunConfig) -> int:
    doc, model, x = _load_model_and_rows(args)
    ranked = explain(model, x)
    result = {
        "stages": {stage: [{"feature": f, "weight": w} for f, w in items]
                   for stage, items in ranked.items()},
        "n_rows": int(x.shape[0]),
        "provenance": doc.get("provenance"),
    }
    out = _out_path(args)
    if out is not None:
        _dump_json(result, out)
    if args.format == "json" and out is None:
        _dump_json(result, None)
    elif args.format == "text":
        for stage, items in ranked.items():
            print(stage)
            for f, w in items[: args.top]:
                print(f"  {f:<32} {w:.4f}")
    return EXIT_OK


def cmd_cv(args, cfg: RunConfig) -> int:
    data = getattr(args, "data", None) or cfg.paths.data
    if data:
        table = load_csv(data)
    else:
        table = generate_synthetic_cohort(cfg.synthetic)
    log = None
    if args.verbose and cfg.jobs == 1:
        def log(fold, model, stage, epoch, lr, loss):
            print(f"fold {fold} {model}/{stage} epoch {epoch + 1} loss {loss:.6f}",
                  file=sys.stderr, flush=True)
    ev = cfg.evaluation
    report = run_cv_experiment(table, cfg.plan, k=ev.k, seed=cfg.seed, models=ev.models,
                               hyperparams=ev.hyperparams, jobs=cfg.jobs,
                               threshold=ev.missing_threshold, log=log)
    report["provenance"] = cfg.provenance()
    report["data"] = str(data) if data else "synthetic"
    out = _out_path(args)
    if out is not None:
        _dump_json(report, out)
    if args.format == "json" and out is None:
        _dump_json(report, None)
    elif args.format == "text":
        print(render_table(report))
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    report = _read_json(Path(args.metrics), "metrics report")
    if "models" not in report:
        raise SchemaError(f"{args.metrics} is not a metrics report")
    text = render_table(report)
    out = _out_path(args)
    if out is not None:
        _write_text(out, text + "\n")
    if args.format == "json":
        _dump_json({name: m["aggregate"] for name, m in report["models"].items()}, None)
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "cv": cmd_cv,
    "predict": cmd_predict, "explain": cmd_explain, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, help="parallel workers (default 1)")
    common.add_argument("--out", type=Path, help="output path")
    common.add_argument("--format", choices=("json", "text"), default="text")
    common.add_argument("-v", "--verbose", action="store_true", help="per-epoch loss lines on stderr")

    parser = _Parser(prog="tabcascade", description="Two-stage FH staging cascade.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p = sub.add_parser("preprocess", parents=[common], help="apply the cleaning rules")
    p.add_argument("data", nargs="?")
    p = sub.add_parser("train", parents=[common], help="train a cascade checkpoint")
    p.add_argument("data", nargs="?")
    p = sub.add_parser("cv", parents=[common], help="stratified cross-validation report")
    p.add_argument("data", nargs="?", help="CSV to evaluate (default: synthetic cohort)")
    helps = {"predict": "label rows with a trained checkpoint",
             "explain": "per-stage feature importance"}
    for name in ("predict", "explain"):
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument("checkpoint", nargs="?")
        p.add_argument("rows", nargs="?")
        if name == "explain":
            p.add_argument("--top", type=int, default=10, help="features shown per stage in text mode")
    p = sub.add_parser("report", parents=[common], help="render a metrics JSON as a table")
    p.add_argument("metrics")
    return parser


def _run(argv) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        cfg.jobs = args.jobs
    args.config_obj = cfg
    limit = threadpool_limits(1) if cfg.jobs == 1 else nullcontext()
    with limit:
        return COMMANDS[args.command](args, cfg)


def main(argv=None) -> int:
    try:
        return _run(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
