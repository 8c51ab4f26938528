"""Tabular ingestion, cleaning rules and feature encoding.

Tables are held as rows of cells: ``None`` marks a missing value,
categorical cells are strings from the column's declared level set and
continuous cells are floats.  CSV files travel with a JSON schema sidecar
(``<name>.schema.json``) that declares column kinds, category sets and the
names of the score and label columns.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .cascade import FHLabel
from .errors import ConfigError, DataError, EmptyTableError, ParseError, SchemaError

CONTINUOUS = "continuous"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: Literal["categorical", "continuous"]
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.categories:
            raise SchemaError(f"categorical column {self.name!r} declares no categories")
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"column {self.name!r} repeats a category")

    def to_dict(self) -> dict:
        doc = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            doc["categories"] = list(self.categories)
        return doc


@dataclass
class RawTable:
    columns: list[ColumnSpec]
    rows: list[list]
    scores: list[float | None] | None = None
    labels: list[FHLabel | None] | None = None
    score_column: str = "dutch_score"
    label_column: str | None = None

    def __post_init__(self):
        if self.labels is not None and self.label_column is None:
            self.label_column = "label"
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        reserved = {self.score_column, self.label_column} & set(names)
        if reserved:
            raise SchemaError(f"feature columns clash with score/label columns: {sorted(reserved)}")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise DataError(f"row {i} has {len(row)} cells, expected {len(self.columns)}")
            for spec, cell in zip(self.columns, row):
                if cell is None:
                    continue
                if spec.kind == "categorical" and cell not in spec.categories:
                    raise DataError(f"row {i}, column {spec.name!r}: {cell!r} is not a declared level")
        for extra, what in ((self.scores, "scores"), (self.labels, "labels")):
            if extra is not None and len(extra) != len(self.rows):
                raise DataError(f"{len(extra)} {what} for {len(self.rows)} rows")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> list:
        j = self.column_names.index(name)
        return [row[j] for row in self.rows]

    def take(self, indices) -> RawTable:
        idx = [int(i) for i in indices]
        return RawTable(
            columns=list(self.columns),
            rows=[list(self.rows[i]) for i in idx],
            scores=None if self.scores is None else [self.scores[i] for i in idx],
            labels=None if self.labels is None else [self.labels[i] for i in idx],
            score_column=self.score_column,
            label_column=self.label_column,
        )

    def select_columns(self, names: Sequence[str]) -> RawTable:
        pos = {n: j for j, n in enumerate(self.column_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise SchemaError(f"unknown columns: {missing}")
        keep = [pos[n] for n in names]
        return RawTable([self.columns[j] for j in keep], [[r[j] for j in keep] for r in self.rows],
                        self.scores, self.labels, self.score_column, self.label_column)

    def class_labels(self) -> np.ndarray:
        """Four-way labels: the label column when present, else derived from scores."""
        if self.labels is not None:
            if any(v is None for v in self.labels):
                raise DataError("label column has missing entries")
            return np.array([int(v) for v in self.labels], dtype=np.int64)
        if self.scores is None:
            raise DataError("table has neither a label nor a score column")
        if any(v is None for v in self.scores):
            raise DataError("score column has missing entries")
        return np.array([int(dutch_score_to_label(s)) for s in self.scores], dtype=np.int64)

    def missing_mask(self) -> np.ndarray:
        return np.array([[c is None for c in row] for row in self.rows], dtype=bool).reshape(
            len(self.rows), len(self.columns))

    def schema_dict(self) -> dict:
        return {
            "columns": [c.to_dict() for c in self.columns],
            "score_column": self.score_column if self.scores is not None else None,
            "label_column": self.label_column if self.labels is not None else None,
        }


def dutch_score_to_label(score: float) -> FHLabel:
    """Clinical score bands: >8 Definite, [5, 8] Probable, [3, 5) Possible, <3 Unlikely."""
    if score is None or not math.isfinite(score):
        raise DataError(f"score must be a finite number, got {score!r}")
    if score < 0:
        raise DataError(f"score must be non-negative, got {score}")
    if score > 8:
        return FHLabel.DEFINITE
    if score >= 5:
        return FHLabel.PROBABLE
    if score >= 3:
        return FHLabel.POSSIBLE
    return FHLabel.UNLIKELY


# -- cleaning -----------------------------------------------------------------

@dataclass
class PreprocessReport:
    dropped_columns: dict[str, float] = field(default_factory=dict)
    rows_dropped: int = 0
    n_rows: int = 0
    n_columns: int = 0
    n_features: int = 0
    class_distribution: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dropped_columns": dict(self.dropped_columns),
            "rows_dropped": self.rows_dropped,
            "n_rows": self.n_rows,
            "n_columns": self.n_columns,
            "n_features": self.n_features,
            "class_distribution": dict(self.class_distribution),
        }


def filter_missing_columns(t: RawTable, threshold: float = 0.05) -> tuple[RawTable, dict]:
    """Keep columns whose missing fraction is strictly below ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    n = max(t.n_rows, 1)
    rates = t.missing_mask().sum(axis=0) / n if t.n_rows else np.zeros(len(t.columns))
    keep = [c.name for c, r in zip(t.columns, rates) if r < threshold]
    dropped = {c.name: float(r) for c, r in zip(t.columns, rates) if r >= threshold}
    if not keep:
        raise EmptyTableError(f"every column has >= {threshold:.1%} missing values")
    return t.select_columns(keep), {"dropped_columns": dropped}


def drop_incomplete_rows(t: RawTable) -> tuple[RawTable, dict]:
    """Keep rows without a missing feature cell (or missing score/label)."""
    complete = ~t.missing_mask().any(axis=1)
    if t.scores is not None:
        complete &= np.array([s is not None for s in t.scores], dtype=bool)
    if t.labels is not None:
        complete &= np.array([v is not None for v in t.labels], dtype=bool)
    kept = np.flatnonzero(complete)
    if kept.size == 0:
        raise EmptyTableError("no complete rows remain")
    return t.take(kept), {"rows_dropped": int(t.n_rows - kept.size)}


def clean_table(t: RawTable, threshold: float = 0.05) -> tuple[RawTable, PreprocessReport]:
    """Column filter followed by row exclusion, with a report of both."""
    t1, frag1 = filter_missing_columns(t, threshold)
    t2, frag2 = drop_incomplete_rows(t1)
    labels = t2.class_labels() if (t2.scores is not None or t2.labels is not None) else None
    dist = {}
    if labels is not None:
        counts = np.bincount(labels, minlength=4)
        dist = {FHLabel(c).display: int(counts[c]) for c in range(4)}
    report = PreprocessReport(
        dropped_columns=frag1["dropped_columns"],
        rows_dropped=frag2["rows_dropped"],
        n_rows=t2.n_rows,
        n_columns=len(t2.columns),
        n_features=sum(len(c.categories) if c.kind == "categorical" else 1 for c in t2.columns),
        class_distribution=dist,
    )
    return t2, report


# -- encoding -----------------------------------------------------------------

@dataclass
class FeatureMatrix:
    values: np.ndarray
    manifest: list[tuple[str, str]]
    stats: dict[str, tuple[float, float]]

    @property
    def columns(self) -> list[str]:
        return [src if level == CONTINUOUS else f"{src}={level}" for src, level in self.manifest]


@dataclass
class FeatureEncoder:
    """One-hot expansion of categoricals and z-scoring of continuous columns.

    Standardisation statistics are fitted on the rows given to :meth:`fit`
    only (population standard deviation; a constant column gets std 1).
    Levels unseen in the declared set map to an all-zero block at transform
    time.
    """

    columns: list[ColumnSpec]
    stats: dict[str, tuple[float, float]]

    @classmethod
    def fit(cls, t: RawTable) -> FeatureEncoder:
        stats = {}
        for j, spec in enumerate(t.columns):
            values = [row[j] for row in t.rows]
            if any(v is None for v in values):
                raise DataError(f"column {spec.name!r} has missing values; clean the table first")
            if spec.kind == "categorical":
                bad = sorted({v for v in values if v not in spec.categories})
                if bad:
                    raise SchemaError(f"column {spec.name!r}: undeclared categories {bad}")
            else:
                arr = np.array(values, dtype=np.float64)
                if arr.size == 0:
                    raise EmptyTableError("cannot fit standardisation on zero rows")
                mean = float(arr.mean())
                std = float(arr.std())
                stats[spec.name] = (mean, std if std > 0 else 1.0)
        return cls(list(t.columns), stats)

    @property
    def manifest(self) -> list[tuple[str, str]]:
        out = []
        for spec in self.columns:
            if spec.kind == "categorical":
                out += [(spec.name, level) for level in spec.categories]
            else:
                out.append((spec.name, CONTINUOUS))
        return out

    @property
    def feature_names(self) -> list[str]:
        return [src if level == CONTINUOUS else f"{src}={level}" for src, level in self.manifest]

    def transform(self, t: RawTable) -> FeatureMatrix:
        pos = {n: j for j, n in enumerate(t.column_names)}
        missing = [c.name for c in self.columns if c.name not in pos]
        if missing:
            raise SchemaError(f"table lacks columns required by the encoder: {missing}")
        blocks = []
        for spec in self.columns:
            j = pos[spec.name]
            values = [row[j] for row in t.rows]
            if any(v is None for v in values):
                raise DataError(f"column {spec.name!r} has missing values")
            if spec.kind == "categorical":
                index = {level: k for k, level in enumerate(spec.categories)}
                block = np.zeros((len(values), len(spec.categories)))
                for i, v in enumerate(values):
                    k = index.get(v)
                    if k is not None:
                        block[i, k] = 1.0
            else:
                mean, std = self.stats[spec.name]
                try:
                    arr = np.array(values, dtype=np.float64)
                except (TypeError, ValueError) as exc:
                    raise DataError(f"column {spec.name!r} holds non-numeric cells") from exc
                block = ((arr - mean) / std)[:, None]
            blocks.append(block)
        values = np.hstack(blocks) if blocks else np.zeros((t.n_rows, 0))
        return FeatureMatrix(values, self.manifest, dict(self.stats))

    def to_dict(self) -> dict:
        return {
            "columns": [c.to_dict() for c in self.columns],
            "stats": {k: [float(m).hex(), float(s).hex()] for k, (m, s) in self.stats.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FeatureEncoder:
        columns = [ColumnSpec(c["name"], c["kind"], tuple(c.get("categories", ())))
                   for c in doc["columns"]]
        stats = {k: (float.fromhex(m), float.fromhex(s)) for k, (m, s) in doc["stats"].items()}
        return cls(columns, stats)


def one_hot_encode(t: RawTable) -> FeatureMatrix:
    """Fit an encoder on ``t`` and transform ``t`` with it."""
    return FeatureEncoder.fit(t).transform(t)


# -- CSV ----------------------------------------------------------------------

def schema_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".schema.json")


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(t: RawTable, path, schema_extra: dict | None = None) -> None:
    """Write ``t`` and its schema sidecar.  Floats use ``repr`` so they read back exactly."""
    path = Path(path)
    header = t.column_names
    if t.scores is not None:
        header = header + [t.score_column]
    if t.labels is not None:
        header = header + [t.label_column]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(t.rows):
            cells = [_format_cell(v) for v in row]
            if t.scores is not None:
                cells.append(_format_cell(t.scores[i]))
            if t.labels is not None:
                lab = t.labels[i]
                cells.append("" if lab is None else FHLabel(lab).display)
            w.writerow(cells)
    schema = t.schema_dict()
    if schema_extra:
        schema.update(schema_extra)
    with open(schema_path(path), "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_schema(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"schema sidecar not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema sidecar {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "columns" not in doc:
        raise SchemaError(f"schema sidecar {path} has no 'columns' list")
    return doc


def _parse_float(text, row, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"{text!r} is not a number", row, column) from None
    if not math.isfinite(v):
        raise ParseError(f"{text!r} is not finite", row, column)
    return v


def load_csv(path, schema: dict | None = None) -> RawTable:
    """Read a CSV written by :func:`write_csv` (or any file matching a schema).

    Row numbers in errors count data rows from 0 (the header is not a row).
    """
    path = Path(path)
    if schema is None:
        schema = read_schema(schema_path(path))
    specs = [ColumnSpec(c["name"], c["kind"], tuple(c.get("categories", ())))
             for c in schema["columns"]]
    score_col = schema.get("score_column")
    label_col = schema.get("label_column")
    known = {s.name: s for s in specs}
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty; a header row is required") from None
        extra = [h for h in header if h not in known and h not in (score_col, label_col)]
        if extra:
            raise ParseError(f"columns not declared in the schema: {extra}")
        absent = [s.name for s in specs if s.name not in header]
        if absent:
            raise ParseError(f"schema columns missing from the header: {absent}")
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names in header")
        pos = {h: j for j, h in enumerate(header)}
        rows, scores, labels = [], [], []
        for i, cells in enumerate(reader):
            if len(cells) != len(header):
                raise ParseError(f"has {len(cells)} cells, header has {len(header)}", i)
            row = []
            for spec in specs:
                text = cells[pos[spec.name]]
                if text == "":
                    row.append(None)
                elif spec.kind == "continuous":
                    row.append(_parse_float(text, i, spec.name))
                else:
                    if text not in spec.categories:
                        raise ParseError(f"{text!r} is not a declared level", i, spec.name)
                    row.append(text)
            rows.append(row)
            if score_col in pos:
                text = cells[pos[score_col]]
                s = None if text == "" else _parse_float(text, i, score_col)
                if s is not None and s < 0:
                    raise ParseError(f"score {s} is negative", i, score_col)
                scores.append(s)
            if label_col in pos:
                text = cells[pos[label_col]]
                try:
                    labels.append(None if text == "" else FHLabel.parse(text))
                except ValueError as exc:
                    raise ParseError(str(exc), i, label_col) from None
    return RawTable(
        columns=specs,
        rows=rows,
        scores=scores if score_col in pos else None,
        labels=labels if label_col in pos else None,
        score_column=score_col or "dutch_score",
        label_column=label_col if label_col in pos else None,
    )
