"""Vocabulary and marked token sequences for relation instances."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

CLS, SEP, HEAD, TAIL, BLANK, MASK, PAD, UNK = (
    "[CLS]", "[SEP]", "[head]", "[tail]", "[BLANK]", "[MASK]", "[PAD]", "[UNK]",
)
RESERVED = (CLS, SEP, HEAD, TAIL, BLANK, MASK, PAD, UNK)
CLS_ID, SEP_ID, HEAD_ID, TAIL_ID, BLANK_ID, MASK_ID, PAD_ID, UNK_ID = range(8)

DEFAULT_BLANK_PROB = 0.7


class Vocabulary:
    """Dense token <-> id map with the reserved tokens at ids 0-7."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self._stoi.get(token)
        if idx is None:
            idx = self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return idx

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:8]) != RESERVED:
            raise ValueError(f"{path}: first 8 lines must be the reserved tokens {RESERVED}")
        if len(set(lines)) != len(lines):
            raise ValueError(f"{path}: duplicate tokens")
        return cls(lines[8:])


@dataclass(frozen=True)
class TokenSequence:
    """``[CLS] ... [SEP]`` ids with entity markers.

    Spans are inclusive and index into ``ids``; a blanked entity has a
    one-token span covering its ``[BLANK]``.
    """

    ids: tuple[int, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    head_marker: int
    tail_marker: int

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        last = len(self.ids) - 1
        if self.ids[0] != CLS_ID or self.ids[last] != SEP_ID:
            raise ValueError("sequence must start with [CLS] and end with [SEP]")
        (hs, he), (ts, te) = self.head_span, self.tail_span
        if not (0 < hs <= he < last and 0 < ts <= te < last):
            raise ValueError("entity span out of range")
        if not (he < ts or te < hs):
            raise ValueError("head and tail spans overlap")
        if self.ids[self.head_marker] != HEAD_ID or self.ids[self.tail_marker] != TAIL_ID:
            raise ValueError("marker positions do not point at [head]/[tail]")

    def with_ids(self, ids) -> "TokenSequence":
        return TokenSequence(tuple(int(i) for i in ids), self.head_span, self.tail_span,
                             self.head_marker, self.tail_marker)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.intp)


def build_token_sequence(instance, vocab: Vocabulary, blank_head: bool = False,
                         blank_tail: bool = False, max_length: int | None = None) -> TokenSequence:
    """Insert ``[head]``/``[tail]`` before each entity, optionally blank, wrap.

    If the result is longer than ``max_length``, non-entity tokens are
    dropped starting from the end of the sentence.
    """
    toks = instance.tokens
    (hs, he), (ts, te) = instance.head, instance.tail
    n = len(toks)
    if not (0 <= hs <= he < n and 0 <= ts <= te < n) or not (he < ts or te < hs):
        raise ValueError(f"invalid entity spans {instance.head}, {instance.tail} for {n} tokens")

    # kinds: 'f' filler, 'h'/'t' entity token, 'H'/'T' marker
    pieces: list[tuple[str, int]] = []
    i = 0
    while i < n:
        if i == hs:
            pieces.append(("H", HEAD_ID))
            if blank_head:
                pieces.append(("h", BLANK_ID))
            else:
                pieces.extend(("h", vocab.id(t)) for t in toks[hs:he + 1])
            i = he + 1
        elif i == ts:
            pieces.append(("T", TAIL_ID))
            if blank_tail:
                pieces.append(("t", BLANK_ID))
            else:
                pieces.extend(("t", vocab.id(t)) for t in toks[ts:te + 1])
            i = te + 1
        else:
            pieces.append(("f", vocab.id(toks[i])))
            i += 1

    if max_length is not None:
        excess = len(pieces) + 2 - max_length
        k = len(pieces) - 1
        while excess > 0 and k >= 0:
            if pieces[k][0] == "f":
                del pieces[k]
                excess -= 1
            k -= 1
        if excess > 0:
            raise ValueError(f"entities do not fit in max_length={max_length}")

    ids = [CLS_ID] + [p[1] for p in pieces] + [SEP_ID]
    kinds = [""] + [p[0] for p in pieces] + [""]
    head_pos = [j for j, k in enumerate(kinds) if k == "h"]
    tail_pos = [j for j, k in enumerate(kinds) if k == "t"]
    seq = TokenSequence(
        ids=tuple(ids),
        head_span=(head_pos[0], head_pos[-1]),
        tail_span=(tail_pos[0], tail_pos[-1]),
        head_marker=kinds.index("H"),
        tail_marker=kinds.index("T"),
    )
    return seq


def label_ids(label_tokens, vocab: Vocabulary) -> list[int]:
    """``[CLS] label [SEP]`` ids for the relation encoder."""
    if not label_tokens:
        raise ValueError("empty relation label")
    return [CLS_ID] + vocab.encode(label_tokens) + [SEP_ID]
