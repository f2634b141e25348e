"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mapre.tensor import Tensor

DEFAULT_WEIGHT_DECAY = 1e-5
DEFAULT_MAX_GRAD_NORM = 1.0


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    no_decay: frozenset = frozenset()
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def is_no_decay(name: str) -> bool:
    """Layer-norm gains/biases, bias vectors and scalar mixing coefficients."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gain", "bias", "alpha", "beta") or leaf.startswith("b_")


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float | None = None) -> None:
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    Only parameters present in ``grads`` are touched.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: param {params[name].shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay and name not in state.no_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads) -> float:
    arrays = grads.values() if isinstance(grads, dict) else grads
    return math.sqrt(sum(float(np.vdot(g, g)) for g in arrays))


def clip_global_norm(grads, max_norm: float = DEFAULT_MAX_GRAD_NORM):
    """Scale all gradients jointly so their L2 norm is at most ``max_norm``.

    Returns ``(grads, norm)`` where ``norm`` is the pre-clip global norm.
    Accepts a dict or a list of arrays and returns the same container type.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return grads, norm
    f = max_norm / norm
    if isinstance(grads, dict):
        return {k: g * f for k, g in grads.items()}, norm
    return [g * f for g in grads], norm


class AdamW:
    """Stateful wrapper binding named parameter tensors to an :class:`AdamWState`."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=DEFAULT_WEIGHT_DECAY, max_grad_norm=DEFAULT_MAX_GRAD_NORM):
        self.params = params
        self.max_grad_norm = max_grad_norm
        self.state = AdamWState(
            lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay,
            no_decay=frozenset(n for n in params if is_no_decay(n)),
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        """Clip, update, clear gradients; returns the pre-clip norm."""
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        for n, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {n!r}")
        if self.max_grad_norm:
            grads, norm = clip_global_norm(grads, self.max_grad_norm)
        else:
            norm = global_norm(grads)
        adamw_step(self.params, grads, self.state, lr=lr)
        self.zero_grad()
        return norm
