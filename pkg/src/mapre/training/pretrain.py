"""Contrastive + MLM pretraining of the two encoders."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from mapre.corpus import DEFAULT_MLM_RATE, RelationCatalog, apply_mlm_mask
from mapre.encoder import context_batch
from mapre.objectives import LossBreakdown, ccr_loss, crr_loss, mlm_loss, total_loss
from mapre.optim import AdamW
from mapre.sampling import TripleIndex, sample_matching_batch
from mapre.tensor import Tape, backward, take_rows
from mapre.training.metrics import MetricsLogger
from mapre.training.schedule import lr_schedule

log = logging.getLogger(__name__)

# full-scale reference regime, recorded for documentation
FULL_SCALE_PRETRAIN = {"steps": 11_000, "warmup_steps": 500, "batch_size": 2040, "max_length": 60,
                       "lr": 3e-5, "weight_decay": 1e-5, "max_grad_norm": 1.0}


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class PretrainConfig:
    steps: int = 500
    warmup_steps: int = 50
    batch_relations: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-5
    max_grad_norm: float = 1.0
    blank_prob: float = 0.7
    mlm_rate: float = DEFAULT_MLM_RATE
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.steps > self.warmup_steps >= 0:
            raise ValueError("need steps > warmup_steps >= 0")


def pretrain_step_loss(model, batch, catalog: RelationCatalog, config: PretrainConfig, rng) -> LossBreakdown:
    """Build the graph for one matching batch; call inside a ``Tape``."""
    n = len(batch)
    sents = batch.sentences()
    U, W, _, _ = model.encode_context([s[0] for s in sents], [(s[1], s[2]) for s in sents], rng)
    l_ccr = ccr_loss(take_rows(U, slice(0, n)), take_rows(U, slice(n, 2 * n)), config.temperature)
    V = model.encode_labels(catalog, batch.relations, rng)
    pair_index = np.concatenate([np.arange(n), np.arange(n)])
    l_crr = crr_loss(W, V, pair_index, config.temperature)

    # MLM on separately masked, unblanked copies of the same sentences
    masked, positions, originals = [], [], []
    for inst, _, _ in sents:
        seq, pos, orig = apply_mlm_mask(model.sequence(inst), config.mlm_rate, rng, vocab_size=len(model.vocab))
        masked.append(seq)
        positions.append(pos)
        originals.append(orig)
    _, _, H, offsets = context_batch(model.con, masked, rng)
    pos = np.concatenate([p + o for p, o in zip(positions, offsets)])
    l_mlm = mlm_loss(H, pos, np.concatenate(originals), model.con.params["tok_emb"])
    return total_loss(l_ccr, l_crr, l_mlm)


def pretrain(model, instances, catalog: RelationCatalog, config: PretrainConfig,
             logger: MetricsLogger | None = None) -> list[LossBreakdown]:
    """Run ``config.steps`` optimizer updates in place; returns the per-step losses."""
    rng = np.random.default_rng(config.seed)
    index = TripleIndex(instances)
    params = model.encoder_parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay, max_grad_norm=config.max_grad_norm)
    history = []
    for step in range(config.steps):
        batch = sample_matching_batch(instances, config.batch_relations, config.blank_prob, rng, index=index)
        with Tape() as tape:
            try:
                parts = pretrain_step_loss(model, batch, catalog, config, rng)
            except FloatingPointError as e:
                raise TrainingAborted(step, str(e)) from None
        if not math.isfinite(parts.total):
            raise TrainingAborted(step, f"non-finite loss {parts.total}")
        backward(tape, parts.graph)
        lr = lr_schedule(step, config.warmup_steps, config.lr)
        try:
            gnorm = opt.step(lr=lr)
        except FloatingPointError as e:
            raise TrainingAborted(step, str(e)) from None
        history.append(parts)
        if logger is not None:
            logger.log({"phase": "pretrain", "step": step, **parts.as_dict(), "lr": lr,
                        "grad_norm": gnorm, "seed": config.seed})
        if step % 50 == 0:
            log.info("pretrain step %d total %.4f (ccr %.4f crr %.4f mlm %.4f)", step, parts.total,
                     parts.l_ccr, parts.l_crr, parts.l_mlm)
    return history
