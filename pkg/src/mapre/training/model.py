"""Context encoder + relation encoder + task heads, and batched encoding helpers."""

from __future__ import annotations

import math

import numpy as np

from mapre.corpus import Instance, RelationCatalog
from mapre.encoder import EncoderConfig, TransformerEncoder, context_batch, relation_batch
from mapre.tensor import Tensor, no_grad
from mapre.tokens import Vocabulary, build_token_sequence, label_ids

ALPHA_INIT = 0.95
BETA_INIT = 1.05

# (alpha learnable, beta learnable, alpha init, beta init)
ABLATIONS = {
    "both": (True, True, ALPHA_INIT, BETA_INIT),
    "label-agnostic": (True, False, ALPHA_INIT, 0.0),
    "label-aware": (False, True, 0.0, BETA_INIT),
    "zeroshot": (False, False, 0.0, 1.0),
}


class FewShotHead:
    """Mixing coefficients for the label-agnostic and label-aware scores.

    A coefficient that is not learnable is held as a constant tensor.
    """

    def __init__(self, alpha=ALPHA_INIT, beta=BETA_INIT, learn_alpha=True, learn_beta=True):
        self.alpha = Tensor(np.array([alpha], dtype=float), requires_grad=learn_alpha, name="alpha")
        self.beta = Tensor(np.array([beta], dtype=float), requires_grad=learn_beta, name="beta")

    @classmethod
    def for_mode(cls, mode: str) -> "FewShotHead":
        if mode not in ABLATIONS:
            raise ValueError(f"unknown few-shot mode {mode!r}; expected one of {sorted(ABLATIONS)}")
        la, lb, a, b = ABLATIONS[mode]
        return cls(a, b, la, lb)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.alpha.requires_grad:
            out["head.alpha"] = self.alpha
        if self.beta.requires_grad:
            out["head.beta"] = self.beta
        return out

    @property
    def values(self) -> tuple[float, float]:
        return float(self.alpha.data[0]), float(self.beta.data[0])

    @property
    def uses_agnostic(self) -> bool:
        return self.alpha.requires_grad or self.alpha.data[0] != 0.0

    @property
    def uses_aware(self) -> bool:
        return self.beta.requires_grad or self.beta.data[0] != 0.0


class MapREModel:
    """``f_CON`` and ``f_REL`` plus optional supervised head parameters.

    The relation encoder starts as an exact copy of the context encoder (both
    encoders share one initialization but train separately) unless
    ``tied_init`` is off.  ``share_encoders`` makes them one object.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, seed: int = 0,
                 share_encoders: bool = False, tied_init: bool = True):
        if len(vocab) > config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} tokens but config.vocab_size is {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.share_encoders = share_encoders
        self.tied_init = tied_init
        rng = np.random.default_rng(seed)
        self.con = TransformerEncoder(config, rng)
        if share_encoders:
            self.rel = self.con
        elif tied_init:
            self.rel = self.con.clone()
        else:
            self.rel = TransformerEncoder(config, rng)
        self.heads: dict[str, Tensor] = {}
        self.fewshot: FewShotHead | None = None
        self._seq_cache: dict = {}

    def parameters(self) -> dict[str, Tensor]:
        p = {f"con.{k}": v for k, v in self.con.params.items()}
        if not self.share_encoders:
            p.update({f"rel.{k}": v for k, v in self.rel.params.items()})
        p.update({f"head.{k}": v for k, v in self.heads.items()})
        if self.fewshot is not None:
            p.update(self.fewshot.parameters())
        return p

    def meta(self) -> dict:
        out = {
            "encoder": self.config.to_dict(),
            "share_encoders": self.share_encoders,
            "tied_init": self.tied_init,
            "heads": sorted(self.heads),
        }
        if self.fewshot is not None:
            out["fewshot"] = {"learn_alpha": self.fewshot.alpha.requires_grad,
                              "learn_beta": self.fewshot.beta.requires_grad}
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.parameters().items()}
        if self.fewshot is not None:
            arrays["head.alpha"] = self.fewshot.alpha.data
            arrays["head.beta"] = self.fewshot.beta.data
        return dict(sorted(arrays.items()))

    @classmethod
    def from_state(cls, meta: dict, arrays: dict, vocab: Vocabulary) -> "MapREModel":
        model = cls(EncoderConfig(**meta["encoder"]), vocab, seed=0,
                    share_encoders=meta.get("share_encoders", False), tied_init=meta.get("tied_init", True))
        for name in meta.get("heads", []):
            model.heads[name] = Tensor(arrays[f"head.{name}"].copy(), True, name)
        fs = meta.get("fewshot")
        if fs is not None:
            model.fewshot = FewShotHead(float(arrays["head.alpha"][0]), float(arrays["head.beta"][0]),
                                        fs["learn_alpha"], fs["learn_beta"])
        for name, t in model.parameters().items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"parameter {name!r} has shape {arrays[name].shape}, model expects {t.shape}")
            t.data = arrays[name].copy()
        return model

    def encoder_parameters(self, which=("con", "rel")) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k.split(".", 1)[0] in which}

    # ------------------------------------------------------------------

    def sequence(self, inst: Instance, blank_head=False, blank_tail=False):
        key = (inst, blank_head, blank_tail)
        seq = self._seq_cache.get(key)
        if seq is None:
            seq = build_token_sequence(inst, self.vocab, blank_head, blank_tail,
                                       max_length=self.config.max_sequence_length)
            if len(self._seq_cache) < 200_000:
                self._seq_cache[key] = seq
        return seq

    def encode_context(self, instances, blanks=None, rng=None):
        """``(U, W, H, offsets)`` for a list of instances."""
        if blanks is None:
            seqs = [self.sequence(x) for x in instances]
        else:
            seqs = [self.sequence(x, bh, bt) for x, (bh, bt) in zip(instances, blanks)]
        return context_batch(self.con, seqs, rng)

    def encode_labels(self, catalog: RelationCatalog, relations, rng=None) -> Tensor:
        return relation_batch(self.rel, [label_ids(catalog.labels[r], self.vocab) for r in relations], rng)

    def embed_instances(self, instances, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation-mode ``(u, w)`` arrays for every instance."""
        us, ws = [], []
        with no_grad():
            for i in range(0, len(instances), batch):
                U, W, _, _ = self.encode_context(instances[i:i + batch])
                us.append(U.data)
                ws.append(W.data)
        return np.concatenate(us), np.concatenate(ws)

    def embed_labels(self, catalog: RelationCatalog, relations) -> np.ndarray:
        with no_grad():
            return self.encode_labels(catalog, relations).data.copy()

    def init_supervised_head(self, variant: str, num_relations: int, seed: int = 0) -> None:
        d = self.config.model_dim
        rng = np.random.default_rng(seed)
        if variant == "L":
            self.heads["l.w"] = Tensor(rng.normal(0, 1 / math.sqrt(2 * d), (2 * d, num_relations)), True, "l.w")
            self.heads["l.b_out"] = Tensor(np.zeros(num_relations), True, "l.b_out")
        elif variant == "R":
            self.heads["sigma.w"] = Tensor(rng.normal(0, 1 / math.sqrt(2 * d), (2 * d, d)), True, "sigma.w")
            self.heads["sigma.b_out"] = Tensor(np.zeros(d), True, "sigma.b_out")
        else:
            raise ValueError(f"unknown supervised variant {variant!r}; expected 'L' or 'R'")
