"""A single multi-step attentive encoder path.

Each decision step picks a per-sample feature mask with an attentive
transformer (affine -> ghost batch norm -> prior scaling -> sparsemax),
transforms the masked input with a stack of gated linear blocks (the first
few share their affine weights across steps, while every step keeps its own
batch norms), and splits the result into a decision
part (``n_d`` columns, passed through ReLU and summed over steps) and an
attention part (``n_a`` columns, driving the next step's mask).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node, Parameter, Tape
from .errors import ConfigError, DimensionError, SchemaError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Hyperparameters of one encoder path.

    ``n_features=0`` means "bind to the data at training time".
    """

    n_features: int = 0
    n_classes: int = 2
    n_steps: int = 3
    n_a: int = 8
    n_d: int = 8
    gamma: float = 1.3
    lambda_sparse: float = 1e-3
    n_shared_glu: int = 2
    n_step_glu: int = 2
    virtual_batch_size: int = 128
    bn_momentum: float = 0.1
    entropy_eps: float = 1e-15

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.n_a < 1 or self.n_d < 1:
            raise ConfigError(f"n_a and n_d must be >= 1, got {self.n_a}, {self.n_d}")
        if self.gamma < 1.0:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.lambda_sparse < 0.0:
            raise ConfigError(f"lambda_sparse must be >= 0, got {self.lambda_sparse}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_shared_glu < 0 or self.n_step_glu < 0 or self.n_shared_glu + self.n_step_glu < 1:
            raise ConfigError("need at least one gated block per feature transformer")
        if self.virtual_batch_size < 2:
            raise ConfigError(f"virtual_batch_size must be >= 2, got {self.virtual_batch_size}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        if self.n_features < 0:
            raise ConfigError(f"n_features must be >= 0, got {self.n_features}")

    @property
    def hidden(self) -> int:
        return self.n_d + self.n_a


# Affine maps that feed a batch norm carry no bias: the normalisation would
# cancel it and its gradient is identically zero.

@dataclass(eq=False)
class GLUBlock:
    weight: Parameter
    bn: BatchNormState


@dataclass(eq=False)
class AttentiveParams:
    weight: Parameter
    bn: BatchNormState


@dataclass(eq=False)
class EncoderState:
    """All encoder tensors.

    ``shared`` holds the affine weights reused by every feature transformer;
    each stack in ``initial`` / ``steps`` starts with blocks that point at
    those same Parameter objects but carry their own batch-norm state, since
    the inputs they normalise differ from step to step.
    """

    input_bn: BatchNormState
    shared: list[Parameter]
    initial: list[GLUBlock]
    steps: list[list[GLUBlock]]
    attention: list[AttentiveParams]
    head_weight: Parameter
    head_bias: Parameter

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every parameter value and running statistic, in a fixed order."""

        def bn(prefix, s):
            yield f"{prefix}.scale", s.scale.value
            yield f"{prefix}.shift", s.shift.value
            yield f"{prefix}.running_mean", s.running_mean
            yield f"{prefix}.running_var", s.running_var

        n_shared = len(self.shared)

        def blocks(prefix, stack):
            for i, blk in enumerate(stack):
                if i >= n_shared:
                    yield f"{prefix}.{i}.weight", blk.weight.value
                yield from bn(f"{prefix}.{i}.bn", blk.bn)

        yield from bn("input_bn", self.input_bn)
        for i, w in enumerate(self.shared):
            yield f"shared.{i}.weight", w.value
        yield from blocks("initial", self.initial)
        for k, stack in enumerate(self.steps):
            yield from blocks(f"step{k}.glu", stack)
        for k, att in enumerate(self.attention):
            yield f"step{k}.att.weight", att.weight.value
            yield from bn(f"step{k}.att.bn", att.bn)
        yield "head.weight", self.head_weight.value
        yield "head.bias", self.head_bias.value

    def parameters(self) -> list[Parameter]:
        out = [self.input_bn.scale, self.input_bn.shift, *self.shared]
        n_shared = len(self.shared)
        for stack in [self.initial, *self.steps]:
            for i, blk in enumerate(stack):
                if i >= n_shared:
                    out.append(blk.weight)
                out += [blk.bn.scale, blk.bn.shift]
        for att in self.attention:
            out += [att.weight, att.bn.scale, att.bn.shift]
        out += [self.head_weight, self.head_bias]
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _glorot(rng, fan_in, fan_out, name):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderState:
    if cfg.n_features < 1:
        raise ConfigError("bind n_features before initialising an encoder")
    d, h = cfg.n_features, cfg.hidden

    def norm(name):
        return BatchNormState.create(2 * h, f"{name}.bn", cfg.bn_momentum, cfg.virtual_batch_size)

    shared = [_glorot(rng, d if i == 0 else h, 2 * h, f"shared.{i}.weight")
              for i in range(cfg.n_shared_glu)]

    def step_stack(name):
        stack = [GLUBlock(w, norm(f"{name}.{i}")) for i, w in enumerate(shared)]
        for i in range(cfg.n_shared_glu, cfg.n_shared_glu + cfg.n_step_glu):
            width_in = d if i == 0 else h
            stack.append(GLUBlock(_glorot(rng, width_in, 2 * h, f"{name}.{i}.weight"),
                                  norm(f"{name}.{i}")))
        return stack

    initial = step_stack("initial")
    steps = []
    attention = []
    for k in range(cfg.n_steps):
        steps.append(step_stack(f"step{k}.glu"))
        attention.append(AttentiveParams(
            weight=_glorot(rng, cfg.n_a, d, f"step{k}.att.weight"),
            bn=BatchNormState.create(d, f"step{k}.att.bn", cfg.bn_momentum, cfg.virtual_batch_size),
        ))
    return EncoderState(
        input_bn=BatchNormState.create(d, "input_bn", cfg.bn_momentum),
        shared=shared,
        initial=initial,
        steps=steps,
        attention=attention,
        head_weight=_glorot(rng, cfg.n_d, cfg.n_classes, "head.weight"),
        head_bias=Parameter(np.zeros((1, cfg.n_classes)), "head.bias"),
    )


@dataclass
class StepTrace:
    step: int
    mask: np.ndarray
    prior: np.ndarray
    contribution: np.ndarray

    @property
    def eta(self) -> np.ndarray:
        """Per-sample weight of this step: row sums of the ReLU'd decision output."""
        return self.contribution.sum(axis=1)


@dataclass
class EncoderOutput:
    logits: Node
    traces: list[StepTrace]
    penalty: Node

    @property
    def probabilities(self) -> np.ndarray:
        return ad.softmax(self.logits.value)


def attentive_transformer(a, prior, params: AttentiveParams, training: bool = False,
                          tape: Tape | None = None) -> Node:
    """mask = sparsemax(prior * BN(a @ W))."""
    z = ad.affine(a, params.weight, tape=tape)
    z = ad.batch_norm(z, params.bn, training, tape=tape)
    if isinstance(prior, np.ndarray) and prior.shape != z.shape:
        raise DimensionError(f"prior shape {prior.shape} does not match logits {z.shape}")
    return ad.sparsemax(ad.mul(prior, z, tape=tape), tape=tape)


def update_prior(prior, mask, gamma: float, tape: Tape | None = None) -> Node:
    return ad.prior_update(prior, mask, gamma, tape=tape)


def apply_mask(features, mask, tape: Tape | None = None) -> Node:
    return ad.mul(features, mask, tape=tape)


def feature_transformer(masked, stack: list[GLUBlock], n_d: int, training: bool = False,
                        tape: Tape | None = None) -> tuple[Node, Node]:
    """Gated block stack; returns the decision part ``d`` and attention part ``a``.

    Every block after the first is added to its input and rescaled by 1/sqrt(2).
    """
    h = None
    for blk in stack:
        z = ad.affine(masked if h is None else h, blk.weight, tape=tape)
        z = ad.glu(ad.batch_norm(z, blk.bn, training, tape=tape), tape=tape)
        h = z if h is None else ad.scale(ad.add(h, z, tape=tape), ad.SQRT_HALF, tape=tape)
    if h.shape[1] <= n_d:
        raise DimensionError(f"feature transformer width {h.shape[1]} leaves no attention part")
    return ad.split_cols(h, n_d, tape=tape)


def encoder_forward(x, cfg: EncoderConfig, state: EncoderState, training: bool = False,
                    tape: Tape | None = None) -> EncoderOutput:
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, Node) else x
    if x.shape[1] != cfg.n_features:
        raise DimensionError(f"expected {cfg.n_features} feature columns, got {x.shape[1]}")
    xb = ad.batch_norm(x, state.input_bn, training, tape=tape)
    _, a = feature_transformer(xb, state.initial, cfg.n_d, training, tape)
    prior = ad.const(np.ones(xb.shape))
    decision = None
    entropy = None
    traces = []
    for k in range(cfg.n_steps):
        mask = attentive_transformer(a, prior, state.attention[k], training, tape)
        masked = apply_mask(xb, mask, tape)
        d, a = feature_transformer(masked, state.steps[k], cfg.n_d, training, tape)
        contrib = ad.relu(d, tape=tape)
        traces.append(StepTrace(k, mask.value, prior.value, contrib.value))
        decision = contrib if decision is None else ad.add(decision, contrib, tape=tape)
        ent = ad.mask_entropy(mask, cfg.entropy_eps, tape=tape)
        entropy = ent if entropy is None else ad.add(entropy, ent, tape=tape)
        prior = update_prior(prior, mask, cfg.gamma, tape)
    logits = ad.affine(decision, state.head_weight, state.head_bias, tape=tape)
    penalty = ad.scale(entropy, 1.0 / cfg.n_steps, tape=tape)
    return EncoderOutput(logits, traces, penalty)


def encoder_loss(out: EncoderOutput, labels, cfg: EncoderConfig, class_weights=None,
                 tape: Tape | None = None) -> Node:
    ce = ad.cross_entropy(out.logits, labels, class_weights, tape=tape)
    if cfg.lambda_sparse == 0.0:
        return ce
    return ad.add(ce, ad.scale(out.penalty, cfg.lambda_sparse, tape=tape), tape=tape)


def aggregate_feature_importance(traces: list[StepTrace]) -> tuple[np.ndarray, bool]:
    """Mask weights summed over steps and samples, each weighted by the step's eta.

    Returns the normalised importance vector and a flag that is ``True`` when
    every eta was zero, in which case the vector is uniform.
    """
    if not traces:
        raise ValueError("need at least one step trace")
    total = np.zeros(traces[0].mask.shape[1])
    for tr in traces:
        total += tr.eta @ tr.mask
    s = total.sum()
    if s <= 0.0:
        return np.full(total.size, 1.0 / total.size), True
    return total / s, False


# -- checkpoints --------------------------------------------------------------

def encoder_to_dict(cfg: EncoderConfig, state: EncoderState) -> dict:
    tensors = {}
    for name, arr in state.named_tensors():
        tensors[name] = {"shape": list(arr.shape),
                         "data": [float(v).hex() for v in arr.reshape(-1)]}
    return {"format_version": FORMAT_VERSION, "config": asdict(cfg), "tensors": tensors}


def encoder_from_dict(doc: dict) -> tuple[EncoderConfig, EncoderState]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported encoder checkpoint version {doc.get('format_version')!r}")
    cfg = EncoderConfig(**doc["config"])
    state = init_encoder(cfg, np.random.default_rng(0))
    tensors = doc["tensors"]
    expected = dict(state.named_tensors())
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise SchemaError(f"checkpoint tensors do not match config: missing {missing}, unexpected {extra}")
    for name, arr in expected.items():
        entry = tensors[name]
        if tuple(entry["shape"]) != arr.shape:
            raise SchemaError(f"tensor {name}: shape {entry['shape']} != {list(arr.shape)}")
        arr[...] = np.array([float.fromhex(v) for v in entry["data"]]).reshape(arr.shape)
    return cfg, state


def save_encoder(path, cfg: EncoderConfig, state: EncoderState) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(encoder_to_dict(cfg, state), fh)


def load_encoder(path) -> tuple[EncoderConfig, EncoderState]:
    with open(path, encoding="utf-8") as fh:
        return encoder_from_dict(json.load(fh))
