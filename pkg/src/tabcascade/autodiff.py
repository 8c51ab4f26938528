"""Reverse-mode differentiation over dense float64 matrices.

Every value flowing through a model is a :class:`Node` wrapping a 2-D numpy
array.  Operations on nodes that belong to a :class:`Tape` append a
vector-Jacobian closure to it; :meth:`Tape.backward` replays those closures in
reverse order and accumulates the result into :class:`Parameter` gradients.
Nodes without a tape are plain constants, which is how inference runs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BatchSizeError, ConfigError, DimensionError, LabelError, TapeError

_uids = itertools.count()


class Parameter:
    """A learnable matrix and its gradient buffer."""

    __slots__ = ("name", "value", "grad", "uid")

    def __init__(self, value, name: str = ""):
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name
        self.uid = next(_uids)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: Tape | None = None):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Node(shape={self.value.shape}, taped={self.tape is not None})"


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self._ops: list[tuple[Node, tuple[Node, ...], Callable]] = []
        self._leaves: dict[int, tuple[Parameter, Node]] = {}
        self._replayed = False

    def __len__(self):
        return len(self._ops)

    def watch(self, p: Parameter) -> Node:
        """Leaf node for ``p``; gradients reaching it are added to ``p.grad``."""
        if self._replayed:
            raise TapeError("tape already replayed; record a new forward pass")
        hit = self._leaves.get(p.uid)
        if hit is None:
            hit = (p, Node(p.value, self))
            self._leaves[p.uid] = hit
        return hit[1]

    def record(self, value: np.ndarray, parents: tuple[Node, ...], vjp: Callable) -> Node:
        if self._replayed:
            raise TapeError("tape already replayed; record a new forward pass")
        out = Node(value, self)
        self._ops.append((out, parents, vjp))
        return out

    def backward(self, loss: Node) -> None:
        if self._replayed:
            raise TapeError("backward already ran on this tape")
        if not self._ops or loss.tape is not self:
            raise TapeError("backward called without a recorded forward pass")
        if loss.value.size != 1:
            raise DimensionError(f"loss must be a scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, parents, vjp in reversed(self._ops):
            if out.grad is None:
                continue
            grads = vjp(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or parent.tape is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for p, node in self._leaves.values():
            if node.grad is not None:
                p.grad += node.grad
        self._replayed = True


def const(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def _node(x, tape: Tape | None) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Parameter):
        return tape.watch(x) if tape is not None else Node(x.value)
    return const(x)


def _tape_of(nodes, tape: Tape | None = None) -> Tape | None:
    if tape is not None:
        return tape
    for n in nodes:
        if isinstance(n, Node) and n.tape is not None:
            return n.tape
    return None


def _emit(value, parents, vjp, tape):
    if tape is None:
        return Node(value)
    return tape.record(value, parents, vjp)


# -- elementwise and structural ops -----------------------------------------

def add(a, b, tape=None) -> Node:
    tape = _tape_of((a, b), tape)
    a, b = _node(a, tape), _node(b, tape)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g), tape)


def mul(a, b, tape=None) -> Node:
    tape = _tape_of((a, b), tape)
    a, b = _node(a, tape), _node(b, tape)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av), tape)


def scale(a, c: float, tape=None) -> Node:
    tape = _tape_of((a,), tape)
    a = _node(a, tape)
    return _emit(a.value * c, (a,), lambda g: (g * c,), tape)


def relu(x, tape=None) -> Node:
    tape = _tape_of((x,), tape)
    x = _node(x, tape)
    on = x.value > 0
    return _emit(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,), tape)


def total(x, tape=None) -> Node:
    """Sum of every entry, as a 1x1 node."""
    tape = _tape_of((x,), tape)
    x = _node(x, tape)
    shape = x.shape
    return _emit(np.array([[x.value.sum()]]), (x,),
                 lambda g: (np.full(shape, g[0, 0]),), tape)


def split_cols(x, n_left: int, tape=None) -> tuple[Node, Node]:
    """First ``n_left`` columns and the remaining columns."""
    tape = _tape_of((x,), tape)
    x = _node(x, tape)
    rows, cols = x.shape
    if not 0 < n_left < cols:
        raise DimensionError(f"cannot split {cols} columns at {n_left}")

    def left_vjp(g):
        out = np.zeros((rows, cols))
        out[:, :n_left] = g
        return (out,)

    def right_vjp(g):
        out = np.zeros((rows, cols))
        out[:, n_left:] = g
        return (out,)

    return (_emit(x.value[:, :n_left], (x,), left_vjp, tape),
            _emit(x.value[:, n_left:], (x,), right_vjp, tape))


def affine(x, w, b=None, tape=None) -> Node:
    """``x @ w + b`` with ``b`` broadcast over rows; ``b=None`` skips the bias."""
    tape = _tape_of((x, w, b), tape)
    x, w = _node(x, tape), _node(w, tape)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise DimensionError(f"affine: cannot multiply {xv.shape} by {wv.shape}")
    if b is None:
        return _emit(xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g), tape)
    b = _node(b, tape)
    if b.shape != (1, wv.shape[1]):
        raise DimensionError(f"affine: bias shape {b.shape}, expected {(1, wv.shape[1])}")

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

    return _emit(xv @ wv + b.value, (x, w, b), vjp, tape)


def glu(x, tape=None) -> Node:
    """Gated linear unit: first half of the columns times sigmoid of the second half."""
    tape = _tape_of((x,), tape)
    x = _node(x, tape)
    cols = x.shape[1]
    if cols % 2:
        raise DimensionError(f"glu needs an even column count, got {cols}")
    h = cols // 2
    a, gate = x.value[:, :h], x.value[:, h:]
    # sigmoid(t) = (1 + tanh(t / 2)) / 2; cheaper than exp-based forms here
    s = np.tanh(gate * 0.5)
    s *= 0.5
    s += 0.5

    def vjp(g):
        out = np.empty((g.shape[0], cols))
        np.multiply(g, s, out=out[:, :h])
        ds = out[:, h:]
        np.multiply(out[:, :h], a, out=ds)
        ds *= 1.0 - s
        return (out,)

    return _emit(a * s, (x,), vjp, tape)


def sparsemax_rows(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``z`` onto the probability simplex."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[1]
    zs = -np.sort(-z, axis=1)
    cs = np.cumsum(zs, axis=1)
    k = np.arange(1, d + 1)
    support = (1.0 + k * zs > cs).sum(axis=1)
    tau = (cs[np.arange(z.shape[0]), support - 1] - 1.0) / support
    return np.maximum(z - tau[:, None], 0.0)


def sparsemax(z, tape=None) -> Node:
    tape = _tape_of((z,), tape)
    z = _node(z, tape)
    p = sparsemax_rows(z.value)
    on = p > 0

    def vjp(g):
        mean_on = (g * on).sum(axis=1, keepdims=True) / on.sum(axis=1, keepdims=True)
        return (on * (g - mean_on),)

    return _emit(p, (z,), vjp, tape)


def prior_update(prior, mask, gamma: float, tape=None) -> Node:
    """``prior * (gamma - mask)``, elementwise."""
    tape = _tape_of((prior, mask), tape)
    prior, mask = _node(prior, tape), _node(mask, tape)
    if prior.shape != mask.shape:
        raise DimensionError(f"prior {prior.shape} and mask {mask.shape} differ")
    pv, mv = prior.value, mask.value
    return _emit(pv * (gamma - mv), (prior, mask),
                 lambda g: (g * (gamma - mv), -g * pv), tape)


def mask_entropy(m, eps: float = 1e-15, tape=None) -> Node:
    """Mean over rows of ``-sum_j m_ij * log(m_ij + eps)``, as a 1x1 node."""
    tape = _tape_of((m,), tape)
    m = _node(m, tape)
    mv = m.value
    rows = mv.shape[0]
    logs = np.log(mv + eps)
    value = -(mv * logs).sum() / rows

    def vjp(g):
        return (-g[0, 0] * (logs + mv / (mv + eps)) / rows,)

    return _emit(np.array([[value]]), (m,), vjp, tape)


# -- batch normalisation ----------------------------------------------------

@dataclass(eq=False)
class BatchNormState:
    """Per-feature scale/shift plus running statistics.

    Batch variance uses the population denominator (divide by the batch or
    virtual-batch size); the running variance tracks the same quantity.
    ``virtual_batch_size=None`` gives plain batch norm, otherwise the batch is
    cut into ``max(1, B // virtual_batch_size)`` contiguous chunks of nearly
    equal size, each normalised on its own.
    """

    scale: Parameter
    shift: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    virtual_batch_size: int | None = None

    @classmethod
    def create(cls, n_features: int, name: str = "bn", momentum: float = 0.1,
               virtual_batch_size: int | None = None, eps: float = 1e-5) -> BatchNormState:
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {momentum}")
        return cls(
            scale=Parameter(np.ones((1, n_features)), f"{name}.scale"),
            shift=Parameter(np.zeros((1, n_features)), f"{name}.shift"),
            running_mean=np.zeros(n_features),
            running_var=np.ones(n_features),
            momentum=momentum,
            eps=eps,
            virtual_batch_size=virtual_batch_size,
        )

    def chunks(self, batch: int) -> list[slice]:
        if self.virtual_batch_size is None:
            return [slice(0, batch)]
        n = max(1, batch // self.virtual_batch_size)
        # same split as np.array_split
        sizes = [batch // n + (1 if i < batch % n else 0) for i in range(n)]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(n)]


def batch_norm(x, state: BatchNormState, training: bool = True, tape=None) -> Node:
    tape = _tape_of((x,), tape)
    x = _node(x, tape)
    xv = x.value
    batch, width = xv.shape
    if width != state.scale.shape[1]:
        raise DimensionError(f"batch_norm: {width} columns, state has {state.scale.shape[1]}")
    gamma, beta = _node(state.scale, tape), _node(state.shift, tape)

    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean) * inv

        def vjp(g):
            return (g * gamma.value * inv, (g * xhat).sum(0, keepdims=True),
                    g.sum(0, keepdims=True))

        return _emit(xhat * gamma.value + beta.value, (x, gamma, beta), vjp, tape)

    if batch < 2:
        raise BatchSizeError(f"training-mode batch norm needs at least 2 rows, got {batch}")
    parts = state.chunks(batch)
    xhat = np.empty_like(xv)
    invs = []
    m = state.momentum
    for sl in parts:
        chunk = xv[sl]
        n = chunk.shape[0]
        mu = chunk.sum(axis=0) / n
        xc = chunk - mu
        var = np.einsum("ij,ij->j", xc, xc) / n
        inv = 1.0 / np.sqrt(var + state.eps)
        np.multiply(xc, inv, out=xhat[sl])
        invs.append(inv)
        state.running_mean *= 1.0 - m
        state.running_mean += m * mu
        state.running_var *= 1.0 - m
        state.running_var += m * var

    out = xhat * gamma.value
    out += beta.value

    def vjp(g):
        g_sum = np.empty((len(parts), width))
        gx_sum = np.empty((len(parts), width))
        for i, sl in enumerate(parts):
            g_sum[i] = g[sl].sum(axis=0)
            gx_sum[i] = np.einsum("ij,ij->j", g[sl], xhat[sl])
        dx = np.empty_like(g)
        for i, (sl, inv) in enumerate(zip(parts, invs)):
            n = sl.stop - sl.start
            # d/dx of (x - mu) * inv for each chunk, population variance
            t = xhat[sl] * (gx_sum[i] / n)
            t += g_sum[i] / n
            np.subtract(g[sl], t, out=t)
            np.multiply(t, gamma.value[0] * inv, out=dx[sl])
        return (dx, gx_sum.sum(axis=0, keepdims=True), g_sum.sum(axis=0, keepdims=True))

    return _emit(out, (x, gamma, beta), vjp, tape)


# -- loss -------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels, class_weights=None, tape=None) -> Node:
    """Mean softmax cross-entropy; optional per-class weights give a weighted mean."""
    tape = _tape_of((logits,), tape)
    logits = _node(logits, tape)
    lv = logits.value
    batch, n_classes = lv.shape
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise DimensionError(f"{batch} logit rows but labels have shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    y = y.astype(np.int64)
    z = lv - lv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(batch), y]
    if class_weights is None:
        w = np.full(batch, 1.0 / batch)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[y]
        w = w / w.sum()
    value = float((w * nll).sum())

    def vjp(g):
        p = np.exp(z - log_norm[:, None])
        p[np.arange(batch), y] -= 1.0
        return (g[0, 0] * w[:, None] * p,)

    return _emit(np.array([[value]]), (logits,), vjp, tape)


# -- optimisation -------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], opt: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update.  Gradients are left for the caller to reset."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for p in params:
        m, v = opt.moments.get(p.uid) or (np.zeros_like(p.value), np.zeros_like(p.value))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * p.grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * p.grad * p.grad
        opt.moments[p.uid] = (m, v)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def lr_at_epoch(epoch: int, base: float, step_size: int, factor: float) -> float:
    if step_size < 1:
        raise ConfigError(f"step_size must be >= 1, got {step_size}")
    return base * factor ** (epoch // step_size)


# -- verification -------------------------------------------------------------

def grad_check(loss_fn: Callable[[Tape], Node], params: Sequence[Parameter],
               h: float = 1e-5) -> float:
    """Largest relative gap between taped gradients and central differences.

    ``loss_fn`` receives a fresh tape (or ``None`` for the numeric probes) and
    must return the scalar loss node.  The relative gap of each entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(None).item()
            flat[i] = orig - h
            down = loss_fn(None).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


SQRT_HALF = math.sqrt(0.5)
