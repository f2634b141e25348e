"""Pre-layer-norm transformer encoder and the u / w / v pooling functions."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from mapre.tensor import (
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    scale,
    softmax,
    sum_,
    take_rows,
    transpose,
)
from mapre.tokens import CLS_ID, HEAD_ID, SEP_ID, TAIL_ID, TokenSequence


@dataclass
class EncoderConfig:
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    feedforward_dim: int = 64
    vocab_size: int = 128
    max_sequence_length: int = 40
    dropout_rate: float = 0.0
    init_std: float = 1.0
    position_init_std: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.max_sequence_length < 8:
            raise ValueError("max_sequence_length must be at least 8")
        if self.num_layers < 1 or self.vocab_size < 9:
            raise ValueError("need at least one layer and a non-trivial vocabulary")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


class TransformerEncoder:
    """Token + learned position embeddings, pre-LN blocks, final layer norm.

    Per-head projections are stored as ``[heads, d, head_dim]`` stacks so that
    all heads run through one batched matmul; the output projection is
    ``[heads, head_dim, d]`` and heads are merged by summation, which equals
    concatenation followed by a single ``d x d`` projection.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | int = 0):
        self.config = config
        rng = np.random.default_rng(rng)
        c = config
        d, h, dh, ff = c.model_dim, c.num_heads, c.head_dim, c.feedforward_dim
        s = c.init_std
        p: dict[str, Tensor] = {}

        def mk(name, arr):
            p[name] = Tensor(arr, requires_grad=True, name=name)

        mk("tok_emb", rng.normal(0.0, s, (c.vocab_size, d)))
        mk("pos_emb", rng.normal(0.0, c.position_init_std, (c.max_sequence_length, d)))
        for i in range(c.num_layers):
            pre = f"layers.{i}."
            mk(pre + "ln1.gain", np.ones(d))
            mk(pre + "ln1.bias", np.zeros(d))
            for nm in ("q", "k", "v"):
                mk(pre + f"attn.w_{nm}", rng.normal(0.0, 1.0 / math.sqrt(d), (h, d, dh)))
                mk(pre + f"attn.b_{nm}", np.zeros((h, 1, dh)))
            mk(pre + "attn.w_o", rng.normal(0.0, 1.0 / math.sqrt(d), (h, dh, d)))
            mk(pre + "attn.b_o", np.zeros(d))
            mk(pre + "ln2.gain", np.ones(d))
            mk(pre + "ln2.bias", np.zeros(d))
            mk(pre + "ffn.w_1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, ff)))
            mk(pre + "ffn.b_1", np.zeros(ff))
            mk(pre + "ffn.w_2", rng.normal(0.0, 1.0 / math.sqrt(ff), (ff, d)))
            mk(pre + "ffn.b_2", np.zeros(d))
        mk("ln_f.gain", np.ones(d))
        mk("ln_f.bias", np.zeros(d))
        self.params = p

    def clone(self) -> "TransformerEncoder":
        twin = copy.copy(self)
        twin.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return twin

    def _dropout(self, x: Tensor, rng) -> Tensor:
        rate = self.config.dropout_rate
        if rng is None or rate == 0.0:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return mul(x, keep)

    def forward(self, ids, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states ``[len(ids), d]``.  Dropout is active only when ``rng`` is given."""
        ids = np.asarray(ids, dtype=np.intp)
        T = ids.shape[0]
        if T > self.config.max_sequence_length:
            raise ValueError(f"sequence of length {T} exceeds max {self.config.max_sequence_length}")
        p = self.params
        c = self.config
        x = add(embedding(p["tok_emb"], ids), take_rows(p["pos_emb"], slice(0, T)))
        inv = 1.0 / math.sqrt(c.head_dim)
        for i in range(c.num_layers):
            pre = f"layers.{i}."
            hdn = layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            q = add(matmul(hdn, p[pre + "attn.w_q"]), p[pre + "attn.b_q"])
            k = add(matmul(hdn, p[pre + "attn.w_k"]), p[pre + "attn.b_k"])
            v = add(matmul(hdn, p[pre + "attn.w_v"]), p[pre + "attn.b_v"])
            att = softmax(scale(matmul(q, transpose(k)), inv))
            heads = matmul(matmul(att, v), p[pre + "attn.w_o"])
            o = add(sum_(heads, axis=0), p[pre + "attn.b_o"])
            x = add(x, self._dropout(o, rng))
            hdn = layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            f = gelu(add(matmul(hdn, p[pre + "ffn.w_1"]), p[pre + "ffn.b_1"]))
            f = add(matmul(f, p[pre + "ffn.w_2"]), p[pre + "ffn.b_2"])
            x = add(x, self._dropout(f, rng))
        return layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])


def _check_markers(seq: TokenSequence) -> None:
    ids = seq.ids
    if not (0 <= seq.head_marker < len(ids) and ids[seq.head_marker] == HEAD_ID):
        raise ValueError("missing [head] marker position")
    if not (0 <= seq.tail_marker < len(ids) and ids[seq.tail_marker] == TAIL_ID):
        raise ValueError("missing [tail] marker position")


def _stack_hidden(hiddens: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    offsets = np.cumsum([0] + [h.shape[0] for h in hiddens[:-1]])
    H = hiddens[0] if len(hiddens) == 1 else concat(hiddens, axis=0)
    return H, offsets


def context_batch(enc: TransformerEncoder, seqs, rng=None):
    """Encode sentences one at a time and pool them.

    Returns ``(U [n, 2d], W [n, d], H [sum T, d], offsets)`` where ``H``
    stacks every sentence's hidden states and ``offsets[i]`` is the row of
    sentence ``i``'s ``[CLS]`` in ``H``.
    """
    if not seqs:
        raise ValueError("no sentences to encode")
    for s in seqs:
        _check_markers(s)
    H, offsets = _stack_hidden([enc.forward(s.ids, rng) for s in seqs])
    heads = offsets + np.array([s.head_marker for s in seqs])
    tails = offsets + np.array([s.tail_marker for s in seqs])
    U = concat([take_rows(H, heads), take_rows(H, tails)], axis=-1)
    W = take_rows(H, offsets)
    return U, W, H, offsets


def forward_context(enc: TransformerEncoder, seq: TokenSequence, rng=None):
    """``(u, w, hidden)``: u = [h_[head]; h_[tail]] (2d), w = h_[CLS] (d)."""
    _check_markers(seq)
    hidden = enc.forward(seq.ids, rng)
    u = concat([take_rows(hidden, seq.head_marker), take_rows(hidden, seq.tail_marker)])
    w = take_rows(hidden, 0)
    return u, w, hidden


def _relation_ids(label) -> list[int]:
    ids = list(label)
    if not ids:
        raise ValueError("empty relation label")
    if ids[0] != CLS_ID:
        ids = [CLS_ID] + ids + [SEP_ID]
    if len(ids) <= 2:
        raise ValueError("empty relation label")
    return ids


def forward_relation(enc: TransformerEncoder, label_tokens, rng=None) -> Tensor:
    """Relation vector v = h_[CLS] over ``[CLS] label [SEP]``.

    ``label_tokens`` are token ids, with or without the wrapping specials.
    """
    return take_rows(enc.forward(_relation_ids(label_tokens), rng), 0)


def relation_batch(enc: TransformerEncoder, labels, rng=None) -> Tensor:
    """``V [n, d]`` for a list of label id lists."""
    if not labels:
        raise ValueError("no relation labels to encode")
    H, offsets = _stack_hidden([enc.forward(_relation_ids(lab), rng) for lab in labels])
    return take_rows(H, offsets)
