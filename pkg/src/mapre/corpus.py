"""Synthetic knowledge-graph corpus, JSONL ingestion, relation splits, MLM masking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mapre.tokens import (
    BLANK_ID,
    CLS_ID,
    HEAD_ID,
    MASK_ID,
    RESERVED,
    SEP_ID,
    TAIL_ID,
    TokenSequence,
    Vocabulary,
)

DEFAULT_MLM_RATE = 0.15
SIGNATURES_PER_RELATION = 3


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    tokens: tuple[str, ...]
    head: tuple[int, int]
    tail: tuple[int, int]
    relation: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "head", tuple(int(i) for i in self.head))
        object.__setattr__(self, "tail", tuple(int(i) for i in self.tail))

    def validate(self, catalog: "RelationCatalog | None" = None) -> None:
        n = len(self.tokens)
        (hs, he), (ts, te) = self.head, self.tail
        if not (0 <= hs <= he < n):
            raise CorpusError(f"head span {list(self.head)} invalid for {n} tokens")
        if not (0 <= ts <= te < n):
            raise CorpusError(f"tail span {list(self.tail)} invalid for {n} tokens")
        if not (he < ts or te < hs):
            raise CorpusError("head and tail spans overlap")
        if catalog is not None and self.relation not in catalog:
            raise CorpusError(f"relation {self.relation!r} not in catalog")

    @property
    def head_text(self) -> tuple[str, ...]:
        return self.tokens[self.head[0]:self.head[1] + 1]

    @property
    def tail_text(self) -> tuple[str, ...]:
        return self.tokens[self.tail[0]:self.tail[1] + 1]

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "h": list(self.head), "t": list(self.tail),
                "relation": self.relation}


class RelationCatalog:
    """Ordered relation id -> label tokens (and optional signature tokens)."""

    def __init__(self, labels: dict[str, list[str]], signatures: dict[str, list[str]] | None = None):
        for rid, lab in labels.items():
            if not lab:
                raise CorpusError(f"relation {rid!r} has an empty label")
        self.labels = {k: list(v) for k, v in labels.items()}
        self.signatures = {k: list(v) for k, v in (signatures or {}).items()}

    @property
    def ids(self) -> list[str]:
        return list(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, rid) -> bool:
        return rid in self.labels

    def __eq__(self, other) -> bool:
        return (isinstance(other, RelationCatalog) and self.labels == other.labels
                and self.signatures == other.signatures)

    def index(self, rid: str) -> int:
        return self.ids.index(rid)

    def subset(self, rids) -> "RelationCatalog":
        return RelationCatalog({r: self.labels[r] for r in rids},
                               {r: self.signatures[r] for r in rids if r in self.signatures})

    def to_json(self) -> dict:
        return {r: {"label": self.labels[r], "signature": self.signatures.get(r, [])} for r in self.labels}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RelationCatalog":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}: malformed catalog JSON: {e}") from None
        labels, sigs = {}, {}
        for rid, entry in raw.items():
            if not isinstance(entry, dict) or "label" not in entry:
                raise CorpusError(f"{path}: relation {rid!r} needs a 'label' list")
            labels[rid] = list(entry["label"])
            sigs[rid] = list(entry.get("signature", []))
        return cls(labels, sigs)


@dataclass
class SyntheticKG:
    entities: list[tuple[str, ...]]
    catalog: RelationCatalog
    triples: list[tuple[int, str, int]]  # (head entity index, relation id, tail entity index)


@dataclass
class DatasetSplit:
    train: list[Instance]
    val: list[Instance]
    test: list[Instance]
    train_relations: list[str]
    val_relations: list[str]
    test_relations: list[str]
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def generate_corpus(num_relations: int = 12, entities_per_relation: int = 10,
                    sentences_per_triple: int = 4, vocab_size: int = 256, seed: int = 0,
                    signatures_per_sentence: int = 2, max_filler: int = 3):
    """Templated sentences over a random KG.

    Each relation owns three signature tokens, which are also its label.
    A sentence reads ``filler* E1 sig sig filler* E2 filler*`` where E1/E2
    are the head and tail in random order; entities are drawn from a pool
    shared by all relations, so only the signature tokens identify the
    relation.  ``entities_per_relation`` is the number of distinct triples
    per relation.

    Returns ``(kg, instances, vocab)``.
    """
    if num_relations < 4:
        raise CorpusError("num_relations must be at least 4")
    if entities_per_relation < 2 or sentences_per_triple < 2:
        raise CorpusError("need at least 2 triples per relation and 2 sentences per triple")
    if not 1 <= signatures_per_sentence <= SIGNATURES_PER_RELATION:
        raise CorpusError("signatures_per_sentence must be 1..3")
    if max_filler < 0:
        raise CorpusError("max_filler must be non-negative")
    rng = np.random.default_rng(seed)
    free = vocab_size - len(RESERVED) - SIGNATURES_PER_RELATION * num_relations
    n_ent_tokens = free // 2
    n_fill = free - n_ent_tokens
    if n_ent_tokens < 4 or n_fill < 4:
        raise CorpusError(
            f"vocab_size {vocab_size} too small for {num_relations} relations "
            f"(need at least {len(RESERVED) + SIGNATURES_PER_RELATION * num_relations + 8})"
        )

    width = len(str(num_relations - 1))
    rel_ids = [f"R{r:0{width}d}" for r in range(num_relations)]
    sig_tokens = {rid: [f"s{r}_{k}" for k in range(SIGNATURES_PER_RELATION)] for r, rid in enumerate(rel_ids)}
    ent_tokens = [f"e{k}" for k in range(n_ent_tokens)]
    fillers = [f"f{k}" for k in range(n_fill)]
    vocab = Vocabulary([t for rid in rel_ids for t in sig_tokens[rid]] + ent_tokens + fillers)

    # entity names are one or two entity tokens
    n_entities = max(n_ent_tokens, 2 * entities_per_relation)
    entities: list[tuple[str, ...]] = []
    seen = set()
    while len(entities) < n_entities:
        k = 1 if rng.random() < 0.6 else 2
        name = tuple(ent_tokens[j] for j in rng.choice(n_ent_tokens, size=k, replace=False))
        if name not in seen:
            seen.add(name)
            entities.append(name)

    catalog = RelationCatalog({rid: sig_tokens[rid] for rid in rel_ids}, sig_tokens)
    triples: list[tuple[int, str, int]] = []
    instances: list[Instance] = []
    for rid in rel_ids:
        pairs = set()
        while len(pairs) < entities_per_relation:
            h, t = rng.choice(n_entities, size=2, replace=False)
            if set(entities[h]) & set(entities[t]):
                continue
            pairs.add((int(h), int(t)))
        for h, t in sorted(pairs):
            triples.append((h, rid, t))
            for _ in range(sentences_per_triple):
                instances.append(_sentence(rng, entities[h], entities[t], sig_tokens[rid], fillers,
                                           signatures_per_sentence, rid, max_filler))
    return SyntheticKG(entities, catalog, triples), instances, vocab


def _sentence(rng, head, tail, sigs, fillers, n_sig, rid, max_filler=3) -> Instance:
    def fill(lo, hi):
        return [fillers[j] for j in rng.integers(0, len(fillers), size=int(rng.integers(lo, hi + 1)))]

    sig = [sigs[j] for j in rng.choice(len(sigs), size=n_sig, replace=False)]
    head_first = rng.random() < 0.5
    first, second = (head, tail) if head_first else (tail, head)
    toks = fill(0, max_filler)
    a = (len(toks), len(toks) + len(first) - 1)
    toks += list(first) + sig + fill(0, max_filler)
    b = (len(toks), len(toks) + len(second) - 1)
    toks += list(second) + fill(0, max(max_filler - 1, 0))
    h_span, t_span = (a, b) if head_first else (b, a)
    return Instance(tuple(toks), h_span, t_span, rid)


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------


def write_jsonl(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")


def load_jsonl(path, catalog: RelationCatalog | None = None) -> list[Instance]:
    """Parse ``{"tokens", "h", "t", "relation"}`` objects, one per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                inst = Instance(
                    tokens=tuple(str(t) for t in obj["tokens"]),
                    head=_span(obj["h"]),
                    tail=_span(obj["t"]),
                    relation=str(obj["relation"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed instance: {e}") from None
            try:
                inst.validate(catalog)
            except CorpusError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
            out.append(inst)
    return out


def _span(x) -> tuple[int, int]:
    if not isinstance(x, (list, tuple)) or len(x) != 2 or not all(isinstance(i, int) for i in x):
        raise ValueError(f"span must be [start, end] integers, got {x!r}")
    return int(x[0]), int(x[1])


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


def split_relations_disjoint(instances, catalog: RelationCatalog, fractions=(0.7, 0.1, 0.2),
                             seed: int = 0) -> DatasetSplit:
    """Partition relation ids into train/val/test and route instances accordingly."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise CorpusError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rids = list(catalog.ids)
    n = len(rids)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise CorpusError(f"{n} relations cannot fill splits {tuple(fractions)} with at least one each")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [rids[i] for i in order]
    tr, va, te = shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]
    where = {r: 0 for r in tr} | {r: 1 for r in va} | {r: 2 for r in te}
    buckets: list[list[Instance]] = [[], [], []]
    for inst in instances:
        if inst.relation in where:
            buckets[where[inst.relation]].append(inst)
    return DatasetSplit(buckets[0], buckets[1], buckets[2], tr, va, te,
                        meta={"seed": seed, "fractions": list(map(float, fractions))})


# --------------------------------------------------------------------------
# MLM
# --------------------------------------------------------------------------

_SPECIAL = (CLS_ID, SEP_ID, HEAD_ID, TAIL_ID, BLANK_ID)


def apply_mlm_mask(seq: TokenSequence, mask_rate: float = DEFAULT_MLM_RATE, seed=0,
                   vocab_size: int | None = None):
    """BERT-style corruption of non-special tokens.

    Each eligible position is selected with probability ``mask_rate``; a
    selected token becomes ``[MASK]`` 80% of the time, a random ordinary
    token 10%, and stays unchanged 10%.  Returns ``(masked, positions,
    original_ids)``.
    """
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError("mask_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    ids = np.asarray(seq.ids, dtype=np.intp)
    eligible = np.flatnonzero(ids >= len(RESERVED))
    chosen = eligible[rng.random(eligible.size) < mask_rate]
    if chosen.size == 0:
        return seq, np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    originals = ids[chosen].copy()
    masked = ids.copy()
    roll = rng.random(chosen.size)
    hi = vocab_size if vocab_size is not None else int(ids.max()) + 1
    for pos, r in zip(chosen, roll):
        if r < 0.8:
            masked[pos] = MASK_ID
        elif r < 0.9:
            masked[pos] = rng.integers(len(RESERVED), max(hi, len(RESERVED) + 1))
    return seq.with_ids(masked), chosen, originals
