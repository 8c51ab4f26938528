"""Two-stage cascade of encoder paths.

Stage 1 separates Patient (Definite, Probable) from Healthy (Possible,
Unlikely).  Each superclass then has its own binary Stage-2 encoder that
picks the final label.  Class index conventions used throughout:

* four-way labels: Unlikely=0, Possible=1, Probable=2, Definite=3
* Stage 1: Healthy=0, Patient=1
* Stage 2(P): Probable=0, Definite=1;  Stage 2(H): Unlikely=0, Possible=1

so the superclass of a label is ``label // 2`` and its within-superclass
index is ``label % 2``.  Argmax ties go to the lower index.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encoder import (
    EncoderConfig,
    EncoderOutput,
    EncoderState,
    aggregate_feature_importance,
    encoder_forward,
    encoder_from_dict,
    encoder_loss,
    encoder_to_dict,
    init_encoder,
)
from .errors import ConfigError, InputError, SchemaError, TrainingDataError


class FHLabel(enum.IntEnum):
    UNLIKELY = 0
    POSSIBLE = 1
    PROBABLE = 2
    DEFINITE = 3

    @property
    def display(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> FHLabel:
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None


class Superclass(enum.IntEnum):
    HEALTHY = 0
    PATIENT = 1

    @property
    def display(self) -> str:
        return self.name.capitalize()


def derive_stage_labels(y: FHLabel) -> tuple[Superclass, FHLabel]:
    y = FHLabel(y)
    return Superclass(y // 2), y


def superclass_of(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.int64) // 2


def compose_label(route: int, stage2_index: int) -> FHLabel:
    return FHLabel(2 * int(route) + int(stage2_index))


STAGE1_DEFAULT = EncoderConfig(n_classes=2, n_steps=5, n_a=40, n_d=40)
STAGE2_DEFAULT = EncoderConfig(n_classes=2, n_steps=2, n_a=50, n_d=50)


@dataclass(frozen=True)
class StagePlan:
    """Everything needed to train a cascade.  Defaults follow the published setup."""

    stage1: EncoderConfig = STAGE1_DEFAULT
    stage2p: EncoderConfig = STAGE2_DEFAULT
    stage2h: EncoderConfig = STAGE2_DEFAULT
    epochs: int = 250
    base_lr: float = 0.09
    lr_step: int = 50
    lr_factor: float = 0.9
    batch_size: int = 256
    seed: int = 0
    class_weights: bool = False
    patience: int | None = None
    stage2_routing: str = "ground_truth"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.lr_step < 1:
            raise ConfigError("epochs >= 1, batch_size >= 2 and lr_step >= 1 are required")
        if self.base_lr <= 0 or not 0 < self.lr_factor <= 1:
            raise ConfigError("base_lr must be positive and lr_factor in (0, 1]")
        if self.stage2_routing not in ("ground_truth", "predicted"):
            raise ConfigError(f"stage2_routing must be 'ground_truth' or 'predicted', "
                              f"got {self.stage2_routing!r}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be a positive epoch count")
        widths = {c.n_features for c in (self.stage1, self.stage2p, self.stage2h)} - {0}
        if len(widths) > 1:
            raise ConfigError(f"stage configs disagree on n_features: {sorted(widths)}")

    def single_stage_config(self) -> EncoderConfig:
        """Flat four-way encoder used as a baseline: Stage-1 geometry, four classes."""
        return replace(self.stage1, n_classes=4)

    def bind(self, n_features: int) -> StagePlan:
        def fix(cfg):
            if cfg.n_features not in (0, n_features):
                raise SchemaError(f"config expects {cfg.n_features} features, data has {n_features}")
            return replace(cfg, n_features=n_features)

        return replace(self, stage1=fix(self.stage1), stage2p=fix(self.stage2p),
                       stage2h=fix(self.stage2h))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> StagePlan:
        doc = dict(doc)
        for key in ("stage1", "stage2p", "stage2h"):
            if key in doc and isinstance(doc[key], dict):
                doc[key] = EncoderConfig(**doc[key])
        return cls(**doc)


@dataclass(eq=False)
class StageModel:
    """A trained encoder path plus its per-epoch training losses."""

    config: EncoderConfig
    state: EncoderState
    loss_log: list[float] = field(default_factory=list)

    def forward(self, x) -> EncoderOutput:
        return encoder_forward(np.asarray(x, dtype=np.float64), self.config, self.state,
                               training=False)

    def predict_proba(self, x) -> np.ndarray:
        return self.forward(x).probabilities

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def to_dict(self) -> dict:
        return {"encoder": encoder_to_dict(self.config, self.state), "loss_log": list(self.loss_log)}

    @classmethod
    def from_dict(cls, doc: dict) -> StageModel:
        cfg, state = encoder_from_dict(doc["encoder"])
        return cls(cfg, state, list(doc.get("loss_log", [])))


def _inverse_frequency(y, n_classes):
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = counts[present].sum() / (present.sum() * counts[present])
    return w


def _batches(n, batch_size):
    n_batches = -(-n // batch_size)
    sizes = [n // n_batches + (1 if i < n % n_batches else 0) for i in range(n_batches)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(n_batches)]


def fit_encoder(x, y, cfg: EncoderConfig, plan: StagePlan, rng: np.random.Generator,
                log=None) -> StageModel:
    """Train one encoder path with Adam and the stepped learning-rate schedule.

    Batches are a fresh permutation every epoch, split into near-equal chunks
    of at most ``plan.batch_size`` rows so no batch drops below two rows.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InputError(f"features {x.shape} and labels {y.shape} do not line up")
    if x.shape[0] < 2:
        raise TrainingDataError("need at least two training rows")
    if cfg.n_features == 0:
        cfg = replace(cfg, n_features=x.shape[1])
    state = init_encoder(cfg, rng)
    params = state.parameters()
    opt = ad.OptimizerState()
    weights = _inverse_frequency(y, cfg.n_classes) if plan.class_weights else None
    model = StageModel(cfg, state)
    best, stale = np.inf, 0
    for epoch in range(plan.epochs):
        lr = ad.lr_at_epoch(epoch, plan.base_lr, plan.lr_step, plan.lr_factor)
        order = rng.permutation(x.shape[0])
        running = 0.0
        for sl in _batches(x.shape[0], plan.batch_size):
            idx = order[sl]
            tape = ad.Tape()
            out = encoder_forward(x[idx], cfg, state, training=True, tape=tape)
            loss = encoder_loss(out, y[idx], cfg, weights, tape=tape)
            tape.backward(loss)
            ad.adam_step(params, opt, lr)
            state.zero_grad()
            running += loss.item() * (sl.stop - sl.start)
        epoch_loss = running / x.shape[0]
        model.loss_log.append(epoch_loss)
        if log is not None:
            log(epoch, lr, epoch_loss)
        if plan.patience is not None:
            if epoch_loss < best - 1e-12:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= plan.patience:
                    break
    return model


def _stage_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("stage1", "stage2p", "stage2h", "single")
    return {name: np.random.default_rng(c) for name, c in zip(names, children)}


def _check_labels(y, need_all_four=True):
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1:
        raise InputError("labels must be a 1-D sequence")
    if y.size and (y.min() < 0 or y.max() > 3):
        raise TrainingDataError("labels must be FHLabel values 0..3")
    counts = np.bincount(y, minlength=4)
    short = [FHLabel(c).display for c in range(4) if counts[c] < 2]
    if need_all_four and short:
        raise TrainingDataError(f"need at least 2 training rows of every class; short: {short}")
    return y


@dataclass(eq=False)
class CascadeModel:
    plan: StagePlan
    stage1: StageModel
    stage2p: StageModel
    stage2h: StageModel
    columns: list[str]
    preprocessor: object | None = None

    @property
    def stages(self) -> dict[str, StageModel]:
        return {"stage1": self.stage1, "stage2p": self.stage2p, "stage2h": self.stage2h}

    @property
    def training_log(self) -> dict[str, list[float]]:
        return {name: list(m.loss_log) for name, m in self.stages.items()}


def train_cascade(x, y, plan: StagePlan = StagePlan(), columns=None, jobs: int = 1,
                  log=None) -> CascadeModel:
    """Stage 1 on every row; each Stage-2 encoder on its superclass only.

    With ``plan.stage2_routing == "ground_truth"`` the Stage-2 subsets come from
    the true superclass; with ``"predicted"`` they come from Stage 1's own
    predictions on the training rows (which forces Stage 1 to finish first).
    ``jobs > 1`` trains independent stages on threads; every stage owns its
    random stream so the result matches a sequential run exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y)
    plan = plan.bind(x.shape[1])
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(x.shape[1])]
    if len(columns) != x.shape[1]:
        raise SchemaError(f"{len(columns)} column names for {x.shape[1]} feature columns")
    rngs = _stage_rngs(plan.seed)
    sup = superclass_of(y)

    def stage_log(name):
        return None if log is None else (lambda e, lr, loss: log(name, e, lr, loss))

    def fit(name, rows, targets, cfg):
        return fit_encoder(x[rows], targets, cfg, plan, rngs[name], stage_log(name))

    def stage2_jobs(route):
        p_rows, h_rows = np.flatnonzero(route == 1), np.flatnonzero(route == 0)
        for name, rows in (("stage2p", p_rows), ("stage2h", h_rows)):
            t = y[rows] % 2
            if rows.size < 2 or np.unique(t).size < 2:
                raise TrainingDataError(f"{name}: routed training subset lacks one of its classes")
        return [("stage2p", p_rows, y[p_rows] % 2, plan.stage2p),
                ("stage2h", h_rows, y[h_rows] % 2, plan.stage2h)]

    all_rows = np.arange(x.shape[0])
    if plan.stage2_routing == "predicted":
        s1 = fit("stage1", all_rows, sup, plan.stage1)
        specs = stage2_jobs(s1.predict(x))
        fitted = {"stage1": s1}
        fitted.update(_run_jobs(fit, specs, jobs))
    else:
        specs = [("stage1", all_rows, sup, plan.stage1)] + stage2_jobs(sup)
        fitted = _run_jobs(fit, specs, jobs)
    return CascadeModel(plan, fitted["stage1"], fitted["stage2p"], fitted["stage2h"], columns)


def _run_jobs(fit, specs, jobs):
    if jobs <= 1:
        return {name: fit(name, rows, t, cfg) for name, rows, t, cfg in specs}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {name: pool.submit(fit, name, rows, t, cfg) for name, rows, t, cfg in specs}
        return {name: f.result() for name, f in futures.items()}


def train_single_stage(x, y, plan: StagePlan = StagePlan(), cfg: EncoderConfig | None = None,
                       log=None) -> StageModel:
    """One four-way encoder trained on every row with the cascade's regimen."""
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y)
    cfg = cfg or plan.single_stage_config()
    if cfg.n_classes != 4:
        raise ConfigError(f"single-stage model needs n_classes=4, got {cfg.n_classes}")
    if cfg.n_features not in (0, x.shape[1]):
        raise SchemaError(f"config expects {cfg.n_features} features, data has {x.shape[1]}")
    cfg = replace(cfg, n_features=x.shape[1])
    stage_log = None if log is None else (lambda e, lr, loss: log("single", e, lr, loss))
    return fit_encoder(x, y, cfg, plan, _stage_rngs(plan.seed)["single"], stage_log)


# -- inference ----------------------------------------------------------------

@dataclass
class CascadePrediction:
    label: FHLabel
    route: Superclass
    stage1_proba: np.ndarray
    stage2_proba: np.ndarray
    traces: dict[str, list]

    @property
    def final_proba(self) -> float:
        return float(self.stage2_proba[self.label % 2])


@dataclass
class CascadeBatch:
    """Vectorised cascade outputs for many rows.

    ``stage2p_proba`` and ``stage2h_proba`` are evaluated on every row so
    ground-truth-routed Stage-2 metrics can be read off directly; ``labels``
    uses the Stage-1 route.
    """

    stage1_proba: np.ndarray
    stage2p_proba: np.ndarray
    stage2h_proba: np.ndarray

    @property
    def route(self) -> np.ndarray:
        return np.argmax(self.stage1_proba, axis=1)

    @property
    def stage2_proba(self) -> np.ndarray:
        return np.where(self.route[:, None] == 1, self.stage2p_proba, self.stage2h_proba)

    @property
    def labels(self) -> np.ndarray:
        return 2 * self.route + np.argmax(self.stage2_proba, axis=1)

    @property
    def final_proba(self) -> np.ndarray:
        s2 = self.stage2_proba
        return s2[np.arange(s2.shape[0]), np.argmax(s2, axis=1)]


def _check_width(model: CascadeModel, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != len(model.columns):
        raise SchemaError(f"rows have {x.shape[1]} columns, model expects {len(model.columns)}")
    return x


def cascade_predict(model: CascadeModel, x) -> CascadeBatch:
    x = _check_width(model, x)
    return CascadeBatch(model.stage1.predict_proba(x), model.stage2p.predict_proba(x),
                        model.stage2h.predict_proba(x))


def predict(model: CascadeModel, x) -> CascadePrediction:
    """Route one row through Stage 1 and the matching Stage-2 encoder."""
    x = _check_width(model, x)
    if x.shape[0] != 1:
        raise InputError("predict takes a single row; use cascade_predict for batches")
    out1 = model.stage1.forward(x)
    route = Superclass(int(np.argmax(out1.probabilities[0])))
    stage2 = model.stage2p if route == Superclass.PATIENT else model.stage2h
    out2 = stage2.forward(x)
    p2 = out2.probabilities[0]
    label = compose_label(route, int(np.argmax(p2)))
    name2 = "stage2p" if route == Superclass.PATIENT else "stage2h"
    return CascadePrediction(label, route, out1.probabilities[0], p2,
                             {"stage1": out1.traces, name2: out2.traces})


# -- explanation --------------------------------------------------------------

def parent_feature(column: str) -> str:
    """One-hot columns are named ``source=level``; continuous ones by source."""
    return column.split("=", 1)[0]


def group_importance(weights, columns) -> list[tuple[str, float]]:
    """Sum column weights per parent feature, sorted descending (ties keep column order)."""
    totals: dict[str, float] = {}
    for w, col in zip(weights, columns):
        key = parent_feature(col)
        totals[key] = totals.get(key, 0.0) + float(w)
    return sorted(totals.items(), key=lambda kv: -kv[1])


def explain(model: CascadeModel, x) -> dict[str, list[tuple[str, float]]]:
    """Per-stage ranked importance of the original (pre one-hot) features."""
    x = _check_width(model, x)
    if x.shape[0] == 0:
        raise InputError("explain needs at least one row")
    out = {}
    for name, stage in model.stages.items():
        weights, _ = aggregate_feature_importance(stage.forward(x).traces)
        out[name] = group_importance(weights, model.columns)
    return out


# -- persistence --------------------------------------------------------------

def cascade_to_dict(model: CascadeModel) -> dict:
    doc = {
        "format_version": 1,
        "kind": "cascade",
        "plan": model.plan.to_dict(),
        "columns": list(model.columns),
        "stages": {name: m.to_dict() for name, m in model.stages.items()},
        "training_log": model.training_log,
    }
    if model.preprocessor is not None:
        doc["preprocessor"] = model.preprocessor.to_dict()
    return doc


def cascade_from_dict(doc: dict) -> CascadeModel:
    if doc.get("kind") != "cascade" or doc.get("format_version") != 1:
        raise SchemaError("not a version-1 cascade checkpoint")
    stages = {name: StageModel.from_dict(doc["stages"][name])
              for name in ("stage1", "stage2p", "stage2h")}
    pre = None
    if "preprocessor" in doc:
        from .data import FeatureEncoder

        pre = FeatureEncoder.from_dict(doc["preprocessor"])
    return CascadeModel(StagePlan.from_dict(doc["plan"]), stages["stage1"], stages["stage2p"],
                        stages["stage2h"], list(doc["columns"]), pre)
