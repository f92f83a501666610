"""Weighted cross-entropy, SGD with momentum/weight decay, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Model, backward, forward

log = logging.getLogger(__name__)


def class_weights(num_classes: int, dtype=np.float64) -> np.ndarray:
    """Unit weight for every real class and zero for the UNLABELED class."""
    w = np.ones(num_classes + 1, dtype=dtype)
    w[num_classes] = 0.0
    return w


def weighted_cross_entropy(P: np.ndarray, target: np.ndarray, weights: np.ndarray,
                           normalizer: float | None = None):
    """Loss ``-(1/Nw) sum_v w[t_v] ln P[t_v, v]`` and its gradient w.r.t. the logits.

    ``P`` is the softmax output shaped ``(C + 1, D, H, W)``; the gradient is
    returned w.r.t. the pre-softmax logits ``Zr``. ``Nw`` is the total weight
    of the target voxels unless ``normalizer`` is given (used to normalize a
    batch jointly). A zero normalizer yields zero loss and gradient.
    """
    target = np.asarray(target)
    k = P.shape[0]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ValueError(f"need {k} class weights, got {weights.shape}")
    if target.shape != P.shape[1:]:
        raise ValueError(f"target shape {target.shape} does not match {P.shape[1:]}")
    if target.size and int(target.max()) >= k:
        raise ValueError(f"target id {int(target.max())} out of range for {k} channels")
    t = target.astype(np.intp)
    wt = weights[t]
    nw = wt.sum() if normalizer is None else normalizer
    if nw == 0:
        return 0.0, np.zeros_like(P)
    pt = np.take_along_axis(P, t[None], axis=0)[0]
    tiny = np.finfo(P.dtype).tiny
    loss = -(wt * np.log(np.maximum(pt, tiny))).sum() / nw
    grad = P.copy()
    np.put_along_axis(grad, t[None], pt[None] - 1.0, axis=0)
    grad *= (wt / nw).astype(P.dtype)[None]
    return float(loss), grad


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 2
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState) -> None:
    """In-place update: ``v = m*v + (g + wd*p)``, ``p -= lr*v``; biases skip decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and not name.endswith(".bias"):
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v + g
        state.velocity[name] = v
        p -= state.lr * v


def loss_and_grads(model: Model, volumes: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                   weights: np.ndarray):
    """Jointly normalized loss and gradients for a batch of volumes."""
    nw = sum(float(weights[np.asarray(t, dtype=np.intp)].sum()) for t in targets)
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    if nw == 0:
        return 0.0, grads
    for x, t in zip(volumes, targets):
        out, tape = forward(model, x, keep_cache=True)
        loss, dzr = weighted_cross_entropy(out.P, t, weights, normalizer=nw)
        total += loss
        for k, g in backward(model, tape, dzr).items():
            grads[k] += g
    return total, grads


def train_round(model: Model, volumes: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                iters: int, state: OptimizerState, seed: int,
                weights: np.ndarray | None = None) -> list[float]:
    """Run ``iters`` SGD steps on round-robin batches; returns the loss trace.

    Volumes are visited in a seeded random order and batches of
    ``state.batch_size`` are taken round-robin from that order.
    """
    if not volumes:
        raise ValueError("empty training set")
    if len(volumes) != len(targets):
        raise ValueError("volumes and targets differ in length")
    if state.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if weights is None:
        weights = class_weights(model.config.num_classes)
    order = np.random.default_rng(seed).permutation(len(volumes))
    trace = []
    pos = 0
    for it in range(iters):
        idx = [order[(pos + j) % len(order)] for j in range(state.batch_size)]
        pos = (pos + state.batch_size) % len(order)
        loss, grads = loss_and_grads(model, [volumes[i] for i in idx],
                                     [targets[i] for i in idx], weights)
        sgd_step(model.params, grads, state)
        trace.append(loss)
        if it % 50 == 0:
            log.debug("iter %d loss %.5f", it, loss)
    return trace
