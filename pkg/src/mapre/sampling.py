"""Pretraining matching batches and N-way K-shot episodes."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from mapre.corpus import Instance


class SamplingError(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class MatchingBatch:
    relations: list[str]
    pairs: list[tuple[Instance, Instance]]
    blank: np.ndarray  # bool [N, 2 sentences, 2 mentions (head, tail)]

    def __len__(self) -> int:
        return len(self.pairs)

    def sentences(self) -> list[tuple[Instance, bool, bool]]:
        """All ``x_A`` sentences, then all ``x_B``, with their blanking flags."""
        out = []
        for side in (0, 1):
            for i, pair in enumerate(self.pairs):
                out.append((pair[side], bool(self.blank[i, side, 0]), bool(self.blank[i, side, 1])))
        return out


class TripleIndex:
    """Sentences grouped by (relation, head text, tail text)."""

    def __init__(self, instances):
        groups: dict[tuple, list[Instance]] = defaultdict(list)
        for inst in instances:
            groups[(inst.relation, inst.head_text, inst.tail_text)].append(inst)
        by_rel: dict[str, list[list[Instance]]] = defaultdict(list)
        for key in sorted(groups, key=repr):
            if len(groups[key]) >= 2:
                by_rel[key[0]].append(groups[key])
        self.by_relation = dict(sorted(by_rel.items()))

    @property
    def relations(self) -> list[str]:
        return list(self.by_relation)


def sample_matching_batch(instances, n: int, blank_prob: float = 0.7, seed=0,
                          index: TripleIndex | None = None) -> MatchingBatch:
    """N triples with N distinct relations, two distinct sentences per triple.

    Blanking is decided independently for every entity mention.
    """
    index = index or TripleIndex(instances)
    rels = index.relations
    if n < 1 or len(rels) < n:
        raise SamplingError(f"need {n} relations with a multi-sentence triple, have {len(rels)}")
    rng = _rng(seed)
    chosen = [rels[i] for i in rng.choice(len(rels), size=n, replace=False)]
    pairs = []
    for rid in chosen:
        triples = index.by_relation[rid]
        group = triples[rng.integers(len(triples))]
        a, b = rng.choice(len(group), size=2, replace=False)
        pairs.append((group[a], group[b]))
    blank = rng.random((n, 2, 2)) < blank_prob
    return MatchingBatch(chosen, pairs, blank)


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 1

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 0 or self.n_query < 1:
            raise ValueError(f"invalid episode spec {self}")


@dataclass
class Episode:
    relations: list[str]
    support: list[list[Instance]]  # [N][K]
    queries: list[tuple[Instance, int]]

    @property
    def spec(self) -> EpisodeSpec:
        return EpisodeSpec(len(self.relations), len(self.support[0]) if self.support else 0,
                           len(self.queries))

    def to_json(self) -> dict:
        return {
            "relations": list(self.relations),
            "support": [[s.to_json() for s in row] for row in self.support],
            "queries": [dict(q.to_json(), label=int(i)) for q, i in self.queries],
        }

    @classmethod
    def from_json(cls, obj) -> "Episode":
        def inst(o):
            return Instance(o["tokens"], tuple(o["h"]), tuple(o["t"]), o["relation"])

        return cls(list(obj["relations"]), [[inst(s) for s in row] for row in obj["support"]],
                   [(inst(q), int(q["label"])) for q in obj["queries"]])


def group_by_relation(instances) -> dict[str, list[Instance]]:
    out: dict[str, list[Instance]] = defaultdict(list)
    for inst in instances:
        out[inst.relation].append(inst)
    return dict(sorted(out.items()))


def sample_episode(instances, spec: EpisodeSpec, seed=0, relations=None,
                   grouped: dict | None = None) -> Episode:
    """Sample an N-way K-shot episode with Q queries.

    Query labels are drawn uniformly over the N ways; supports and queries
    never share an instance.  ``relations`` restricts the candidate pool.
    """
    grouped = grouped if grouped is not None else group_by_relation(instances)
    pool = list(relations) if relations is not None else list(grouped)
    if len(pool) < spec.n_way:
        raise SamplingError(f"{spec.n_way}-way episode needs {spec.n_way} relations, split has {len(pool)}")
    rng = _rng(seed)
    ways = [pool[i] for i in rng.choice(len(pool), size=spec.n_way, replace=False)]
    labels = rng.integers(0, spec.n_way, size=spec.n_query)
    per_way = np.bincount(labels, minlength=spec.n_way)
    support, picked_queries = [], []
    for w, rid in enumerate(ways):
        items = grouped.get(rid, [])
        need = spec.k_shot + int(per_way[w])
        if len(items) < max(need, spec.k_shot + 1):
            raise SamplingError(f"relation {rid!r} has {len(items)} instances, episode needs {max(need, spec.k_shot + 1)}")
        idx = rng.choice(len(items), size=need, replace=False)
        support.append([items[i] for i in idx[:spec.k_shot]])
        picked_queries.append([items[i] for i in idx[spec.k_shot:]])
    cursor = [0] * spec.n_way
    queries = []
    for lab in labels:
        queries.append((picked_queries[lab][cursor[lab]], int(lab)))
        cursor[lab] += 1
    return Episode(ways, support, queries)


def write_episodes(episodes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json()) + "\n")


def read_episodes(path) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return [Episode.from_json(json.loads(line)) for line in fh if line.strip()]
