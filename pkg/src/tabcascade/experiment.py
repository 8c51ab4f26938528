"""Cross-validated comparison of the cascade against single-stage and classical models."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import BaselineKind, predict_baseline, resolve_hyperparams, train_baseline
from .cascade import FHLabel, StagePlan, cascade_predict, superclass_of, train_cascade
from .data import FeatureEncoder, RawTable, clean_table
from .errors import ConfigError
from .metrics import binary_summary, classification_summary, stratified_kfold

CASCADE = "Cascade"
DEFAULT_MODELS = (CASCADE, "SingleStageTabNet", "LogisticRegression", "Ridge", "LDA", "KNN")
CLASS_NAMES = [FHLabel(c).display for c in range(4)]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _canonical_models(models) -> list[str]:
    out = []
    for m in models:
        name = CASCADE if str(m).lower() == CASCADE.lower() else BaselineKind.parse(m).value
        if name not in out:
            out.append(name)
    if not out:
        raise ConfigError("no models requested")
    return out


def _four_way(y_true, y_pred) -> dict:
    s = classification_summary(y_true, y_pred, 4)
    for key in ("f1", "precision", "recall"):
        s[key] = dict(zip(CLASS_NAMES, s[key]))
    return s


def _stage2_metrics(y, batch, rows_for) -> dict:
    """Binary metrics for both Stage-2 encoders on the rows selected by ``rows_for``."""
    out = {}
    for name, superclass, proba in (("stage2p", 1, batch.stage2p_proba),
                                    ("stage2h", 0, batch.stage2h_proba)):
        rows = rows_for(superclass)
        sub = y[rows]
        # rows Stage 1 sent the wrong way have no within-stage truth; count them only
        ok = superclass_of(sub) == superclass
        rows, sub = rows[ok], sub[ok]
        entry = {"n_rows": int(rows.size), "n_misrouted": int((~ok).sum())}
        if rows.size:
            entry.update(binary_summary(sub % 2, np.argmax(proba[rows], axis=1), proba[rows, 1]))
        out[name] = entry
    return out


def _cascade_fold(xtr, ytr, xte, yte, plan, columns, log):
    model = train_cascade(xtr, ytr, plan, columns=columns, log=log)
    batch = cascade_predict(model, xte)
    entry = _four_way(yte, batch.labels)
    sup = superclass_of(yte)
    entry["stage1"] = binary_summary(sup, batch.route, batch.stage1_proba[:, 1])
    entry["stage2_ground_truth"] = _stage2_metrics(yte, batch, lambda s: np.flatnonzero(sup == s))
    entry["stage2_stage1_routed"] = _stage2_metrics(
        yte, batch, lambda s: np.flatnonzero(batch.route == s))
    return entry


def run_fold(table: RawTable, labels, train_idx, test_idx, fold: int, plan: StagePlan,
             models, hyperparams, seed: int, log=None) -> dict:
    """Fit transforms on the training rows, train every model, score the held-out rows."""
    with threadpool_limits(1):
        encoder = FeatureEncoder.fit(table.take(train_idx))
        xtr = encoder.transform(table.take(train_idx)).values
        xte = encoder.transform(table.take(test_idx)).values
        ytr, yte = labels[train_idx], labels[test_idx]
        fplan = replace(plan, seed=fold_seed(seed, fold))
        out = {}
        for name in models:
            stage_log = None if log is None else (
                lambda stage, e, lr, loss, name=name: log(fold, name, stage, e, lr, loss))
            started = time.perf_counter()
            if name == CASCADE:
                entry = _cascade_fold(xtr, ytr, xte, yte, fplan, encoder.feature_names, stage_log)
            else:
                b = train_baseline(name, xtr, ytr, hyperparams.get(name), plan=fplan, log=stage_log)
                pred, _ = predict_baseline(b, xte)
                entry = _four_way(yte, pred)
            entry.update(fold=fold, n_train=int(len(train_idx)), n_test=int(len(test_idx)),
                         test_class_counts=dict(zip(CLASS_NAMES, np.bincount(yte, minlength=4).tolist())),
                         seconds=round(time.perf_counter() - started, 3))
            out[name] = entry
        return out


def _mean_std(values) -> dict:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}


def aggregate(per_fold: list[dict]) -> dict:
    agg = {c: _mean_std([f["f1"][c] for f in per_fold]) for c in CLASS_NAMES}
    agg["accuracy"] = _mean_std([f["accuracy"] for f in per_fold])
    agg["macro_f1"] = _mean_std([f["macro_f1"] for f in per_fold])
    if "stage1" in per_fold[0]:
        agg["stage1"] = {key: _mean_std([f["stage1"][key] for f in per_fold])
                         for key in ("accuracy", "sensitivity", "specificity", "f1_positive", "auc")}
        for routing in ("stage2_ground_truth", "stage2_stage1_routed"):
            agg[routing] = {
                stage: {key: _mean_std([f[routing][stage].get(key) for f in per_fold])
                        for key in ("accuracy", "sensitivity", "specificity", "f1_positive", "auc")}
                for stage in ("stage2p", "stage2h")}
    return agg


def run_cv_experiment(table: RawTable, plan: StagePlan = StagePlan(), k: int = 5, seed: int = 0,
                      models=DEFAULT_MODELS, hyperparams: dict | None = None, jobs: int = 1,
                      threshold: float = 0.05, log=None) -> dict:
    """Stratified k-fold comparison; returns the report as a JSON-ready dict.

    Cleaning (column filter, row exclusion) runs once on the whole table since
    it uses no label or feature statistics; one-hot levels and standardisation
    are fitted per fold on training rows.  Each fold trains with its own seed
    derived from ``(seed, fold)``, so ``jobs > 1`` (one process per fold)
    reproduces the sequential result.
    """
    started = _now()
    models = _canonical_models(models)
    hyperparams = {BaselineKind.parse(k_).value if k_ != CASCADE else k_: v
                   for k_, v in (hyperparams or {}).items()}
    clean, report = clean_table(table, threshold)
    labels = clean.class_labels()
    folds = stratified_kfold(labels, k, seed)
    tasks = [(clean, labels, tr, te, i, plan, models, hyperparams, seed)
             for i, (tr, te) in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold, *zip(*tasks)))
    else:
        results = [run_fold(*t, log=log) for t in tasks]
    finished = _now()
    out = {
        "k": k,
        "seed": seed,
        "preprocess": report.to_dict(),
        "fold_class_counts": [dict(zip(CLASS_NAMES, np.bincount(labels[folds.fold == i],
                                                                 minlength=4).tolist()))
                              for i in range(k)],
        "positive_classes": {"stage1": "Patient", "stage2p": "Definite", "stage2h": "Possible"},
        "models": {},
        "timestamps": {"started": started, "finished": finished},
    }
    for name in models:
        per_fold = [r[name] for r in results]
        hp = plan.to_dict() if name in (CASCADE, "SingleStageTabNet") else \
            resolve_hyperparams(BaselineKind.parse(name), hyperparams.get(name))
        out["models"][name] = {
            "per_fold": per_fold,
            "aggregate": aggregate(per_fold),
            "hyperparams": hp,
            "seed": seed,
            "timestamps": {"started": started, "finished": finished},
        }
    return out


def strip_volatile(report: dict) -> dict:
    """Copy of a report without wall-clock fields, for determinism comparisons."""
    if isinstance(report, dict):
        return {k: strip_volatile(v) for k, v in report.items() if k not in ("timestamps", "seconds")}
    if isinstance(report, list):
        return [strip_volatile(v) for v in report]
    return report


def render_table(report: dict) -> str:
    """Plain-text per-class F1 table (percent, mean +- sample std)."""
    width = max(len("Model"), *(len(m) for m in report["models"]))
    head = f"{'Model':<{width}}  " + "  ".join(f"{c:>15}" for c in CLASS_NAMES)
    lines = [head, "-" * len(head)]
    for name, entry in report["models"].items():
        cells = []
        for c in CLASS_NAMES:
            a = entry["aggregate"][c]
            cells.append(f"{100 * a['mean']:6.2f} ± {100 * a['std']:5.2f}")
        lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>15}" for c in cells))
    cascade = report["models"].get(CASCADE)
    if cascade:
        s1 = cascade["aggregate"]["stage1"]
        parts = [f"{k} {100 * s1[k]['mean']:.2f}" for k in ("accuracy", "sensitivity", "specificity")]
        if s1["auc"]["mean"] is not None:
            parts.append(f"auc {s1['auc']['mean']:.4f}")
        lines += ["", "Cascade stage 1 (Patient vs Healthy): " + ", ".join(parts)]
    return "\n".join(lines)
