"""Pretraining losses: contrastive context (CCR), contrastive relation (CRR), MLM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mapre.tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    cross_entropy,
    matmul,
    scale,
    take_rows,
    transpose,
)


@dataclass
class LossBreakdown:
    l_ccr: float
    l_crr: float
    l_mlm: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"l_ccr": self.l_ccr, "l_crr": self.l_crr, "l_mlm": self.l_mlm, "total": self.total}


def _matrix(x, name: str) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a [rows, width] matrix, got shape {x.shape}")
    return x


def ccr_loss(u_a, u_b, temperature: float = 1.0) -> Tensor:
    """NT-Xent over the 2N context vectors of N sentence pairs.

    Anchor ``u_a[i]`` scores every ``u_b[j]`` and every ``u_a[j]`` with
    ``j != i``; its positive is ``u_b[i]``.  Anchors from side B are
    symmetric.  The mean over all 2N anchors is returned.
    """
    u_a, u_b = _matrix(u_a, "u_a"), _matrix(u_b, "u_b")
    n = u_a.shape[0]
    if n < 2:
        raise ValueError("ccr_loss needs N >= 2 pairs so that negatives exist")
    if u_b.shape != u_a.shape:
        raise ValueError(f"u_a {u_a.shape} and u_b {u_b.shape} differ in shape")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = concat([u_a, u_b], axis=0)
    sim = scale(matmul(z, transpose(z)), 1.0 / temperature)
    self_mask = np.zeros((2 * n, 2 * n))
    np.fill_diagonal(self_mask, -np.inf)
    targets = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return cross_entropy(add(sim, self_mask), targets)


def crr_loss(w, v, pair_index, temperature: float = 1.0) -> Tensor:
    """Cross-entropy of each sentence's w against the N in-batch relation vectors."""
    w, v = _matrix(w, "w"), _matrix(v, "v")
    idx = np.asarray(pair_index, dtype=np.intp)
    if idx.shape != (w.shape[0],):
        raise ValueError(f"pair_index needs one entry per sentence ({w.shape[0]}), got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise IndexError(f"pair_index out of range for {v.shape[0]} relations")
    if w.shape[1] != v.shape[1]:
        raise ValueError(f"w width {w.shape[1]} != v width {v.shape[1]}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return cross_entropy(scale(matmul(w, transpose(v)), 1.0 / temperature), idx)


def mlm_loss(hidden, positions, original_ids, embedding_table) -> Tensor:
    """Mean cross-entropy of the original ids at masked positions.

    Output logits use the (tied) token embedding table; no targets gives 0.
    """
    hidden = _matrix(hidden, "hidden")
    pos = np.asarray(positions, dtype=np.intp).reshape(-1)
    ids = np.asarray(original_ids, dtype=np.intp).reshape(-1)
    if pos.size == 0:
        return Tensor(0.0)
    if pos.shape != ids.shape:
        raise ValueError("positions and original_ids differ in length")
    if pos.min() < 0 or pos.max() >= hidden.shape[0]:
        raise IndexError(f"target position out of range for {hidden.shape[0]} tokens")
    logits = matmul(take_rows(hidden, pos), transpose(embedding_table))
    return cross_entropy(logits, ids)


def total_loss(l_ccr, l_crr, l_mlm) -> LossBreakdown:
    """Unweighted sum ``ccr + crr + mlm`` (always in that order)."""
    parts = {"l_ccr": l_ccr, "l_crr": l_crr, "l_mlm": l_mlm}
    vals = {}
    for k, p in parts.items():
        val = float(p.data) if isinstance(p, Tensor) else float(p)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss component {k} = {val}")
        vals[k] = val
    graph = None
    if any(isinstance(p, Tensor) for p in parts.values()):
        graph = add(add(as_tensor(l_ccr), as_tensor(l_crr)), as_tensor(l_mlm))
    total = (vals["l_ccr"] + vals["l_crr"]) + vals["l_mlm"]
    return LossBreakdown(vals["l_ccr"], vals["l_crr"], vals["l_mlm"], total, graph)
