"""Synthetic clinical-style cohorts with a controllable latent risk.

Each row draws a mix of binary flags, a few multi-level categoricals and
continuous markers.  The first ``n_informative`` columns feed a latent risk

    risk = sum_j w_j * e_j / ||w|| + noise * N(0, 1)

where ``e_j`` is the standardised value of column j (binary and categorical
columns use fixed level effects).  Rows are ranked by risk and assigned to
classes by exact quota (largest-remainder rounding of ``priors * n``), most
severe class first, so the class counts are hit exactly.  Each row then gets
a score inside its class band via a logistic map of its within-class
standardised risk, which keeps the score monotone in risk overall.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cascade import FHLabel
from .data import ColumnSpec, RawTable
from .errors import SpecError

# Severity order used by SyntheticSpec.priors: Definite, Probable, Possible, Unlikely.
PRIOR_ORDER = (FHLabel.DEFINITE, FHLabel.PROBABLE, FHLabel.POSSIBLE, FHLabel.UNLIKELY)
DEFAULT_PRIORS = (0.029, 0.064, 0.402, 0.505)

# Score bands per class: (low, high), filled with a margin so rounding to two
# decimals never crosses a threshold.
SCORE_BANDS = {
    FHLabel.UNLIKELY: (0.0, 3.0),
    FHLabel.POSSIBLE: (3.0, 5.0),
    FHLabel.PROBABLE: (5.0, 8.0),
    FHLabel.DEFINITE: (8.0, 16.0),
}

# Named columns first, in the order they become informative.
# (name, kind, parameters): continuous -> (mean, sd); binary -> P(yes);
# categorical -> (levels, probabilities, effects).
_NAMED_COLUMNS = [
    ("ldl_c", "continuous", (4.1, 1.3)),
    ("corneal_arcus", "binary", 0.18),
    ("family_history_premature_cvd", "binary", 0.30),
    ("total_cholesterol", "continuous", (6.0, 1.4)),
    ("tendon_xanthoma", "binary", 0.08),
    ("xanthelasma", "binary", 0.12),
    ("cvd_history", "binary", 0.15),
    ("family_history_hyperlipidaemia", "binary", 0.35),
    ("ldl_code", "categorical", (("normal", "borderline", "high", "very_high"),
                                 (0.35, 0.30, 0.25, 0.10), (-1.2, -0.3, 0.6, 1.8))),
    ("mi_history", "binary", 0.10),
    ("hdl_c", "continuous", (1.3, 0.35)),
    ("triglycerides", "continuous", (1.8, 0.9)),
    ("fbg", "continuous", (5.4, 1.1)),
    ("age", "continuous", (47.0, 14.0)),
    ("gender", "categorical", (("female", "male"), (0.52, 0.48), (-0.5, 0.5))),
    ("weight", "continuous", (78.0, 15.0)),
    ("smoking", "categorical", (("never", "former", "current"), (0.55, 0.25, 0.20),
                                (-0.6, 0.1, 0.9))),
    ("family_history_cancer", "binary", 0.22),
    ("stroke_history", "binary", 0.05),
    ("hypertension", "binary", 0.28),
]


@dataclass
class SyntheticSpec:
    n_samples: int = 1591
    n_features: int = 50
    priors: tuple[float, ...] = DEFAULT_PRIORS
    n_informative: int = 3
    noise: float = 0.05
    missing_rates: dict[str, float] = field(default_factory=dict)
    default_missing_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.priors) != 4:
            raise SpecError(f"priors: need 4 values (Definite, Probable, Possible, Unlikely), "
                            f"got {len(self.priors)}")
        if any(p < 0 for p in self.priors) or abs(sum(self.priors) - 1.0) > 1e-6:
            raise SpecError(f"priors: must be non-negative and sum to 1, got {list(self.priors)}")
        if self.n_samples < 4:
            raise SpecError(f"n_samples: need at least 4 rows, got {self.n_samples}")
        if self.n_features < 1:
            raise SpecError(f"n_features: must be positive, got {self.n_features}")
        if not 1 <= self.n_informative <= self.n_features:
            raise SpecError(f"n_informative: must lie in [1, n_features], got {self.n_informative}")
        if self.noise < 0:
            raise SpecError(f"noise: must be non-negative, got {self.noise}")
        rates = [self.default_missing_rate, *self.missing_rates.values()]
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise SpecError("missing_rates: every rate must lie in [0, 1)")
        names = {c[0] for c in schema_columns(self.n_features)}
        unknown = sorted(set(self.missing_rates) - names)
        if unknown:
            raise SpecError(f"missing_rates: unknown columns {unknown}")


def schema_columns(n_features: int) -> list[tuple]:
    """Column definitions: named clinical-style columns, then generic markers and flags."""
    cols = list(_NAMED_COLUMNS[:n_features])
    k = 0
    while len(cols) < n_features:
        if k % 2 == 0:
            cols.append((f"marker_{k // 2 + 1:02d}", "continuous", (0.0, 1.0)))
        else:
            cols.append((f"flag_{k // 2 + 1:02d}", "binary", 0.25))
        k += 1
    return cols


def quota_counts(n: int, priors) -> list[int]:
    """Largest-remainder rounding of ``priors * n``; ties go to the earlier class."""
    raw = [p * n for p in priors]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _to_spec(col) -> ColumnSpec:
    name, kind, params = col
    if kind == "continuous":
        return ColumnSpec(name, "continuous")
    if kind == "binary":
        return ColumnSpec(name, "categorical", ("no", "yes"))
    return ColumnSpec(name, "categorical", tuple(params[0]))


def generate_synthetic_cohort(spec: SyntheticSpec = SyntheticSpec()) -> RawTable:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    cols = schema_columns(spec.n_features)
    cells: list[list] = []
    effects = np.zeros((n, len(cols)))
    for j, (name, kind, params) in enumerate(cols):
        if kind == "continuous":
            mean, sd = params
            v = np.round(mean + sd * rng.standard_normal(n), 3)
            effects[:, j] = (v - mean) / sd
            cells.append([float(x) for x in v])
        elif kind == "binary":
            p = params
            yes = rng.random(n) < p
            effects[:, j] = (yes - p) / math.sqrt(p * (1 - p))
            cells.append(["yes" if f else "no" for f in yes])
        else:
            levels, probs, eff = params
            k = rng.choice(len(levels), size=n, p=probs)
            effects[:, j] = np.asarray(eff)[k]
            cells.append([levels[i] for i in k])

    m = spec.n_informative
    weights = rng.uniform(0.5, 1.5, size=m) * rng.choice([-1.0, 1.0], size=m)
    weights[0] = abs(weights[0])
    risk = effects[:, :m] @ weights / np.linalg.norm(weights)
    risk = risk + spec.noise * rng.standard_normal(n)

    counts = quota_counts(n, spec.priors)
    order = np.argsort(-risk, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    start = 0
    for label, c in zip(PRIOR_ORDER, counts):
        labels[order[start:start + c]] = int(label)
        start += c

    scores = np.empty(n)
    for label, (lo, hi) in SCORE_BANDS.items():
        members = labels == int(label)
        if not members.any():
            continue
        r = risk[members]
        z = (r - r.mean()) / (r.std() if r.std() > 0 else 1.0)
        pos = 0.02 + 0.96 / (1.0 + np.exp(-z))
        scores[members] = np.round(lo + (hi - lo) * pos, 2)

    rows = [[cells[j][i] for j in range(len(cols))] for i in range(n)]
    for j, (name, _, _) in enumerate(cols):
        rate = spec.missing_rates.get(name, spec.default_missing_rate)
        k = int(round(rate * n))
        if k:
            for i in rng.choice(n, size=k, replace=False):
                rows[i][j] = None
    return RawTable([_to_spec(c) for c in cols], rows, scores=[float(s) for s in scores])


def informative_columns(spec: SyntheticSpec) -> list[str]:
    return [c[0] for c in schema_columns(spec.n_features)[: spec.n_informative]]


def separable_fixture(n_rows: int = 64, n_features: int = 10, seed: int = 0,
                      spread: float = 0.3) -> RawTable:
    """Balanced four-class table with well separated class clusters.

    Class ``c`` has mean 3 on features ``j`` with ``j % 4 == c`` and mean 0
    elsewhere, plus Gaussian noise of scale ``spread``.  Scores sit at the
    middle of each class band.
    """
    if n_rows % 4:
        raise SpecError(f"n_rows: must be a multiple of 4, got {n_rows}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), n_rows // 4)
    rng.shuffle(labels)
    centers = np.array([[3.0 if j % 4 == c else 0.0 for j in range(n_features)] for c in range(4)])
    x = np.round(centers[labels] + spread * rng.standard_normal((n_rows, n_features)), 4)
    mid = {FHLabel(c): (lo + min(hi, 12.0)) / 2 for c, (lo, hi) in SCORE_BANDS.items()}
    columns = [ColumnSpec(f"f{j:02d}", "continuous") for j in range(n_features)]
    rows = [[float(v) for v in r] for r in x]
    return RawTable(columns, rows, scores=[mid[FHLabel(int(c))] for c in labels])

