"""Gradient-check cases for every primitive and every training loss.

Each case builds fresh random inputs from a seed and reduces the op output
to a scalar through a fixed random projection, so every output coordinate
contributes to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mapre import tensor as T
from mapre.gradcheck import GradCheckReport, finite_difference_check
from mapre.objectives import ccr_loss, crr_loss, mlm_loss
from mapre.tensor import Tensor

GRAD_TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    seed: int
    report: GradCheckReport

    def as_dict(self) -> dict:
        return {"case": self.name, "seed": self.seed, "max_rel_error": self.report.max_rel_error,
                "checked": self.report.checked, "passed": self.report.passed}


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _unary(op, shape):
    def build(rng):
        x = _param(rng, *shape)
        proj = rng.normal(size=op(x).shape)
        return (lambda a: T.sum_(T.mul(op(a), Tensor(proj)))), [x]
    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = _param(rng, *sa), _param(rng, *sb)
        proj = rng.normal(size=op(a, b).shape)
        return (lambda x, y: T.sum_(T.mul(op(x, y), Tensor(proj)))), [a, b]
    return build


def _layer_norm(rng):
    x, g, b = _param(rng, 3, 2, 5), _param(rng, 5), _param(rng, 5)
    proj = Tensor(rng.normal(size=(3, 2, 5)))
    return (lambda x_, g_, b_: T.sum_(T.mul(T.layer_norm(x_, g_, b_), proj))), [x, g, b]


def _cross_entropy(rng):
    x = _param(rng, 6, 4)
    t = rng.integers(0, 4, size=6)
    return (lambda a: T.cross_entropy(a, t)), [x]


def _take_rows(rng):
    x = _param(rng, 5, 3)
    idx = np.array([4, 0, 4, 2])
    proj = Tensor(rng.normal(size=(4, 3)))
    return (lambda a: T.sum_(T.mul(T.take_rows(a, idx), proj))), [x]


def _embedding(rng):
    table = _param(rng, 7, 4)
    ids = np.array([1, 3, 3, 6, 1])
    proj = Tensor(rng.normal(size=(5, 4)))
    return (lambda a: T.sum_(T.mul(T.embedding(a, ids), proj))), [table]


def _concat(axis):
    def build(rng):
        a, b, c = _param(rng, 2, 3), _param(rng, 2, 3), _param(rng, 2, 3)
        out_shape = np.concatenate([a.data, b.data, c.data], axis=axis).shape
        proj = Tensor(rng.normal(size=out_shape))
        return (lambda x, y, z: T.sum_(T.mul(T.concat([x, y, z], axis=axis), proj))), [a, b, c]
    return build


def _scale(rng):
    x = _param(rng, 3, 4)
    c = float(rng.normal())
    proj = Tensor(rng.normal(size=(3, 4)))
    return (lambda a: T.sum_(T.mul(T.scale(a, c), proj))), [x]


PRIMITIVE_CASES: dict[str, Callable] = {
    "matmul": _binary(T.matmul, (3, 4), (4, 2)),
    "matmul_batched": _binary(T.matmul, (2, 3, 4), (4, 5)),
    "add": _binary(T.add, (3, 4), (4,)),
    "sub": _binary(T.sub, (3, 1), (3, 4)),
    "mul": _binary(T.mul, (2, 3, 4), (3, 1)),
    "scale": _scale,
    "concat_last": _concat(-1),
    "concat_rows": _concat(0),
    "take_rows": _take_rows,
    "embedding": _embedding,
    "mean_all": _unary(T.mean, (3, 4)),
    "mean_axis": _unary(lambda a: T.mean(a, axis=0), (3, 4)),
    "layer_norm": _layer_norm,
    "gelu": _unary(T.gelu, (4, 5)),
    "softmax": _unary(T.softmax, (3, 5)),
    "log_softmax": _unary(T.log_softmax, (3, 5)),
    "cross_entropy": _cross_entropy,
    "dot": _binary(T.dot, (6,), (6,)),
    "transpose": _unary(T.transpose, (2, 3, 4)),
}


def _ccr(rng):
    n = int(rng.integers(2, 6))
    a, b = _param(rng, n, 4), _param(rng, n, 4)
    tau = float(rng.uniform(0.5, 2.0))
    return (lambda x, y: ccr_loss(x, y, tau)), [a, b]


def _crr(rng):
    n = int(rng.integers(2, 5))
    w, v = _param(rng, 2 * n, 4), _param(rng, n, 4)
    idx = np.concatenate([np.arange(n), np.arange(n)])
    tau = float(rng.uniform(0.5, 2.0))
    return (lambda x, y: crr_loss(x, y, idx, tau)), [w, v]


def _mlm(rng):
    h, table = _param(rng, 7, 4), _param(rng, 9, 4)
    pos = np.array([1, 4, 6])
    orig = rng.integers(0, 9, size=3)
    return (lambda a, b: mlm_loss(a, pos, orig, b)), [h, table]


def _episode(rng):
    from mapre.training.fewshot import episode_scores

    n, k, q, d = 3, 2, 4, 4
    us, uq, wq, v = _param(rng, n * k, 2 * d), _param(rng, q, 2 * d), _param(rng, q, d), _param(rng, n, d)
    alpha = Tensor(np.array([0.95]), requires_grad=True)
    beta = Tensor(np.array([1.05]), requires_grad=True)
    targets = rng.integers(0, n, size=q)

    def f(us_, uq_, wq_, v_, a_, b_):
        return T.cross_entropy(episode_scores(us_, uq_, wq_, v_, a_, b_, n, k), targets)

    return f, [us, uq, wq, v, alpha, beta]


OBJECTIVE_CASES: dict[str, Callable] = {
    "ccr_loss": _ccr,
    "crr_loss": _crr,
    "mlm_loss": _mlm,
    "episode_loss": _episode,
}

ALL_CASES = {**PRIMITIVE_CASES, **OBJECTIVE_CASES}


def run_case(name: str, seed: int, tolerance: float = GRAD_TOLERANCE) -> CaseResult:
    rng = np.random.default_rng(seed)
    f, params = ALL_CASES[name](rng)
    return CaseResult(name, seed, finite_difference_check(f, params, tolerance=tolerance))


def run_suite(seeds=range(10), names=None, tolerance: float = GRAD_TOLERANCE) -> list[CaseResult]:
    names = list(ALL_CASES) if names is None else list(names)
    unknown = set(names) - set(ALL_CASES)
    if unknown:
        raise KeyError(f"unknown gradient cases: {sorted(unknown)}")
    return [run_case(n, s, tolerance) for n in names for s in seeds]
