"""Central finite-difference check of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ArchConfig, Model, forward, init_params
from .training import class_weights, loss_and_grads, weighted_cross_entropy


@dataclass
class CheckRow:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class CheckReport:
    max_rel_error: float
    rows: list[CheckRow]
    kinks: int  # coordinates skipped because an activation switched inside +-eps

    def arrays_covered(self) -> set[str]:
        return {r.name for r in self.rows}


def _pattern(tape) -> list[np.ndarray]:
    """Discrete state of every non-smooth op: ReLU masks and pooling argmaxes."""
    sig = []
    for kind, _, c in tape:
        if kind == "conv_relu":
            sig.append(c[1])
        elif kind == "pool":
            sig.append(c[0])
        elif kind == "att" and c[4] is not None:
            sig.append(c[4][2])
    return sig


def _eval(model: Model, x, target, weights):
    out, tape = forward(model, x, keep_cache=True)
    return weighted_cross_entropy(out.P, target, weights)[0], _pattern(tape)


def _candidates(model: Model, seed: int, per_array: int):
    """Yield (name, flat index): ``per_array`` from each array first, then size-weighted."""
    rng = np.random.default_rng(seed)
    names = list(model.params)
    seen = set()
    for name in names:
        p = model.params[name]
        for i in rng.choice(p.size, size=min(per_array, p.size), replace=False):
            seen.add((name, int(i)))
            yield name, int(i)
    sizes = np.array([model.params[k].size for k in names], dtype=float)
    total = int(sizes.sum())
    while len(seen) < total:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        coord = (name, int(rng.integers(model.params[name].size)))
        if coord not in seen:
            seen.add(coord)
            yield coord


def gradient_check(model: Model, x, target, epsilon: float = 1e-4, n: int = 200,
                   seed: int = 0, weights=None, per_array: int = 2) -> CheckReport:
    """Compare backprop gradients with ``(f(p+eps) - f(p-eps)) / 2eps``.

    Relative error is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``. Coordinates whose
    perturbation flips a ReLU or a pooling argmax are not differentiable
    across the interval; they are counted in ``kinks`` and replaced by fresh
    samples. Use a float64 model.
    """
    if weights is None:
        weights = class_weights(model.config.num_classes)
    _, grads = loss_and_grads(model, [x], [target], weights)
    rows: list[CheckRow] = []
    kinks = 0
    for name, i in _candidates(model, seed, per_array):
        if len(rows) >= n:
            break
        flat = model.params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        fp, sp = _eval(model, x, target, weights)
        flat[i] = orig - epsilon
        fm, sm = _eval(model, x, target, weights)
        flat[i] = orig
        if any(not np.array_equal(a, b) for a, b in zip(sp, sm)):
            kinks += 1
            continue
        gn = (fp - fm) / (2 * epsilon)
        ga = float(grads[name].reshape(-1)[i])
        rel = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
        rows.append(CheckRow(name, i, ga, gn, rel))
    return CheckReport(max(r.rel_error for r in rows), rows, kinks)


def gradcheck_model(num_classes: int = 2, features: int = 2, depth: int = 1,
                    attention: bool = True, seed: int = 0, size: int = 4):
    """A small float64 model with random biases and a matching random sample.

    Nonzero biases keep every path active so that gradients stay well above
    the round-off floor of the difference quotient.
    """
    cfg = ArchConfig(num_classes=num_classes, features=features, depth=depth,
                     attention=attention)
    model = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(100 + seed)
    for k, v in model.params.items():
        if k.endswith(".bias"):
            v[:] = rng.normal(0.0, 1.0, v.shape)
    x = rng.normal(size=(size,) * 3)
    target = rng.integers(0, num_classes + 1, size=(size,) * 3)
    return model, x, target
