"""Finite-difference audit of the taped gradients.

Prints the worst relative gap per block and for the whole encoder loss at a
few sparsity weights.  Usage::

    python3 scripts/gradcheck.py [--seed 0] [--h 1e-5]
"""
import argparse

import numpy as np

from tabcascade import autodiff as ad
from tabcascade.autodiff import BatchNormState, Parameter
from tabcascade.encoder import EncoderConfig, encoder_forward, encoder_loss, init_encoder


def blocks(rng):
    x = Parameter(rng.normal(size=(6, 5)))
    w, b = Parameter(rng.normal(size=(5, 4))), Parameter(rng.normal(size=(1, 4)))
    bn = BatchNormState.create(5, virtual_batch_size=3)
    z = Parameter(rng.normal(size=(6, 5)))
    prior = Parameter(rng.uniform(0.5, 1.5, size=(6, 5)))
    mask = Parameter(ad.sparsemax_rows(rng.normal(size=(6, 5))) * 0.8 + 0.04)
    logits, labels = Parameter(rng.normal(size=(6, 3))), rng.integers(0, 3, 6)
    probe = {k: rng.normal(size=s) for k, s in (("4", (6, 4)), ("2", (6, 2)), ("5", (6, 5)))}

    def dot(node, key, tape):
        return ad.total(ad.mul(node, probe[key], tape=tape), tape=tape)

    yield "affine", lambda t: dot(ad.affine(x, w, b, tape=t), "4", t), [x, w, b]
    yield "glu", lambda t: dot(ad.glu(ad.affine(x, w, tape=t), tape=t), "2", t), [x, w]
    yield "ghost batch norm", lambda t: dot(ad.batch_norm(x, bn, True, tape=t), "5", t), \
        [x, bn.scale, bn.shift]
    yield "sparsemax", lambda t: dot(ad.sparsemax(z, tape=t), "5", t), [z]
    yield "prior update", lambda t: dot(ad.prior_update(prior, mask, 1.3, tape=t), "5", t), \
        [prior, mask]
    yield "mask entropy", lambda t: ad.mask_entropy(mask, tape=t), [mask]
    yield "cross entropy", lambda t: ad.cross_entropy(logits, labels, tape=t), [logits]


def encoder_case(seed, lambda_sparse):
    cfg = EncoderConfig(n_features=10, n_classes=3, n_steps=3, n_a=4, n_d=3,
                        virtual_batch_size=8, lambda_sparse=lambda_sparse)
    state = init_encoder(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    x, y = rng.normal(size=(8, 10)), rng.integers(0, 3, 8)

    def loss(tape):
        out = encoder_forward(x, cfg, state, training=True, tape=tape)
        return encoder_loss(out, y, cfg, tape=tape)

    return loss, state.parameters()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--h", type=float, default=1e-5)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    for name, loss, params in blocks(rng):
        print(f"{name:<22} {ad.grad_check(loss, params, h=args.h):.2e}")
    for lam in (0.0, 1e-3, 0.1):
        loss, params = encoder_case(args.seed, lam)
        print(f"encoder loss lam={lam:<6} {ad.grad_check(loss, params, h=args.h):.2e}")


if __name__ == "__main__":
    main()
