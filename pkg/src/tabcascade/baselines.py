"""Classical comparison models on encoded feature matrices.

Every model maps an ``N x D`` float matrix and integer labels to a fitted
object; :func:`predict_baseline` returns ``(labels, scores)`` where scores
is an ``N x C`` matrix (probabilities, decision values or vote shares).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .autodiff import softmax
from .cascade import StagePlan, train_single_stage
from .errors import ConfigError, InputError, NumericError, TrainingDataError


class BaselineKind(str, enum.Enum):
    LOGISTIC = "LogisticRegression"
    RIDGE = "Ridge"
    LDA = "LDA"
    KNN = "KNN"
    SINGLE_STAGE = "SingleStageTabNet"

    @classmethod
    def parse(cls, text) -> BaselineKind:
        if isinstance(text, cls):
            return text
        for kind in cls:
            if text.lower() in (kind.value.lower(), kind.name.lower()):
                return kind
        raise ConfigError(f"unknown baseline {text!r}; choose from {[k.value for k in cls]}")


DEFAULT_HYPERPARAMS = {
    BaselineKind.LOGISTIC: {"l2": 1e-3, "steps": 2000, "lr": 0.1},
    BaselineKind.RIDGE: {"alpha": 1.0, "fit_intercept": True},
    BaselineKind.LDA: {"shrinkage": 1e-4},
    BaselineKind.KNN: {"k": 5},
    BaselineKind.SINGLE_STAGE: {},
}


def resolve_hyperparams(kind: BaselineKind, overrides: dict | None = None) -> dict:
    hp = dict(DEFAULT_HYPERPARAMS[kind])
    for key, value in (overrides or {}).items():
        if key not in hp and kind != BaselineKind.SINGLE_STAGE:
            raise ConfigError(f"{kind.value}: unknown hyperparameter {key!r}")
        hp[key] = value
    return hp


@dataclass
class SoftmaxRegression:
    weight: np.ndarray
    bias: np.ndarray

    def decision(self, x):
        return x @ self.weight + self.bias


def fit_softmax_regression(x, y, n_classes, l2=1e-3, steps=2000, lr=0.1) -> SoftmaxRegression:
    """Full-batch gradient descent on mean cross-entropy + (l2/2)||W||^2."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        p = softmax(x @ w + b)
        g = (p - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return SoftmaxRegression(w, b)


@dataclass
class RidgeOVR:
    weight: np.ndarray
    bias: np.ndarray

    def decision(self, x):
        return x @ self.weight + self.bias


def fit_ridge(x, y, n_classes, alpha=1.0, fit_intercept=True) -> RidgeOVR:
    """One-vs-rest least squares on +-1 targets via the normal equations.

    The intercept, when fitted, is left unpenalised by centring first.
    """
    targets = np.where(np.eye(n_classes)[y] > 0, 1.0, -1.0)
    if fit_intercept:
        xm, tm = x.mean(axis=0), targets.mean(axis=0)
        xc, tc = x - xm, targets - tm
    else:
        xc, tc = x, targets
    gram = xc.T @ xc + alpha * np.eye(x.shape[1])
    try:
        w = linalg.solve(gram, xc.T @ tc, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"ridge normal equations are singular (alpha={alpha})") from exc
    b = tm - xm @ w if fit_intercept else np.zeros(n_classes)
    return RidgeOVR(w, b)


@dataclass
class LDAModel:
    means: np.ndarray
    precision: np.ndarray
    log_priors: np.ndarray

    def decision(self, x):
        # linear discriminant: x' S^-1 mu_c - mu_c' S^-1 mu_c / 2 + log pi_c
        a = self.means @ self.precision
        return x @ a.T - 0.5 * np.einsum("cd,cd->c", a, self.means) + self.log_priors


def fit_lda(x, y, n_classes, shrinkage=1e-4) -> LDAModel:
    counts = np.bincount(y, minlength=n_classes)
    if (counts == 0).any():
        raise TrainingDataError("LDA needs every class present in the training rows")
    means = np.stack([x[y == c].mean(axis=0) for c in range(n_classes)])
    resid = x - means[y]
    cov = resid.T @ resid / x.shape[0] + shrinkage * np.eye(x.shape[1])
    if np.linalg.matrix_rank(cov) < x.shape[1]:
        raise NumericError("LDA covariance is singular; use a positive shrinkage")
    return LDAModel(means, np.linalg.inv(cov), np.log(counts / counts.sum()))


@dataclass
class KNNModel:
    x: np.ndarray
    y: np.ndarray
    k: int
    n_classes: int

    def votes(self, q):
        d2 = (q * q).sum(axis=1)[:, None] - 2 * q @ self.x.T + (self.x * self.x).sum(axis=1)[None, :]
        d2 = np.maximum(d2, 0.0)
        k = min(self.k, self.x.shape[0])
        # lexsort: last key is primary, so sort by distance then by training index
        idx = np.arange(self.x.shape[0])
        nearest = np.stack([np.lexsort((idx, row))[:k] for row in d2])
        counts = np.zeros((q.shape[0], self.n_classes))
        for j in range(k):
            counts[np.arange(q.shape[0]), self.y[nearest[:, j]]] += 1
        return counts, nearest


@dataclass
class Baseline:
    kind: BaselineKind
    n_classes: int
    model: object
    hyperparams: dict = field(default_factory=dict)


def train_baseline(kind, x, y, hyperparams: dict | None = None, n_classes: int = 4,
                   plan: StagePlan | None = None, log=None) -> Baseline:
    kind = BaselineKind.parse(kind)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InputError(f"features {x.shape} and labels {y.shape} do not line up")
    if x.shape[0] == 0:
        raise TrainingDataError("no training rows")
    hp = resolve_hyperparams(kind, hyperparams)
    if kind == BaselineKind.LOGISTIC:
        model = fit_softmax_regression(x, y, n_classes, hp["l2"], int(hp["steps"]), hp["lr"])
    elif kind == BaselineKind.RIDGE:
        model = fit_ridge(x, y, n_classes, hp["alpha"], bool(hp["fit_intercept"]))
    elif kind == BaselineKind.LDA:
        model = fit_lda(x, y, n_classes, hp["shrinkage"])
    elif kind == BaselineKind.KNN:
        if int(hp["k"]) < 1:
            raise ConfigError("KNN k must be at least 1")
        model = KNNModel(x.copy(), y.copy(), int(hp["k"]), n_classes)
    else:
        model = train_single_stage(x, y, plan or StagePlan(), log=log)
        hp = {"plan": (plan or StagePlan()).to_dict()}
    return Baseline(kind, n_classes, model, hp)


def predict_baseline(b: Baseline, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if b.kind == BaselineKind.KNN:
        counts, nearest = b.model.votes(x)
        # majority vote; ties go to the class of the nearest tied neighbour
        labels = np.empty(x.shape[0], dtype=np.int64)
        for i in range(x.shape[0]):
            best = np.flatnonzero(counts[i] == counts[i].max())
            for j in nearest[i]:
                if b.model.y[j] in best:
                    labels[i] = b.model.y[j]
                    break
        return labels, counts / counts.sum(axis=1, keepdims=True)
    if b.kind == BaselineKind.SINGLE_STAGE:
        scores = b.model.predict_proba(x)
    elif b.kind == BaselineKind.LOGISTIC:
        scores = softmax(b.model.decision(x))
    else:
        scores = b.model.decision(x)
    return np.argmax(scores, axis=1), scores
