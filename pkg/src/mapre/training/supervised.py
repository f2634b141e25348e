"""Supervised fine-tuning: classifier head (variant L) or relation-encoder matching (variant R)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from mapre.corpus import RelationCatalog
from mapre.optim import AdamW
from mapre.tensor import Tape, Tensor, add, backward, cross_entropy, matmul, no_grad, transpose
from mapre.training.metrics import MetricsLogger
from mapre.training.model import MapREModel
from mapre.training.pretrain import TrainingAborted
from mapre.training.schedule import lr_schedule

log = logging.getLogger(__name__)


@dataclass
class SupervisedConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 30
    weight_decay: float = 1e-5
    max_grad_norm: float = 1.0
    seed: int = 0


def supervised_logits(model: MapREModel, variant: str, instances, catalog: RelationCatalog, rng=None) -> Tensor:
    """``[n, |catalog|]`` logits.

    L: affine map of u.  R: ``sigma(u) . v_r`` for every catalog relation.
    """
    U, _, _, _ = model.encode_context(instances, rng=rng)
    if variant == "L":
        return add(matmul(U, model.heads["l.w"]), model.heads["l.b_out"])
    if variant == "R":
        if len(catalog) == 0:
            raise ValueError("variant R needs a non-empty relation catalog")
        proj = add(matmul(U, model.heads["sigma.w"]), model.heads["sigma.b_out"])
        V = model.encode_labels(catalog, catalog.ids, rng)
        return matmul(proj, transpose(V))
    raise ValueError(f"unknown supervised variant {variant!r}")


def predict_supervised(model: MapREModel, variant: str, instances, catalog: RelationCatalog,
                       batch: int = 64) -> np.ndarray:
    """Arg-max relation index per instance."""
    preds = []
    with no_grad():
        for i in range(0, len(instances), batch):
            preds.append(supervised_logits(model, variant, instances[i:i + batch], catalog).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(model, variant, instances, catalog) -> float:
    if not instances:
        return float("nan")
    gold = np.array([catalog.index(x.relation) for x in instances])
    return float((predict_supervised(model, variant, instances, catalog) == gold).mean())


def finetune_supervised(model: MapREModel, train, test, catalog: RelationCatalog, variant: str,
                        config: SupervisedConfig, logger: MetricsLogger | None = None) -> float:
    """Train on ``train`` with cross-entropy over the full catalog; return accuracy on ``test``.

    Variant L leaves the relation encoder untouched.
    """
    if variant not in ("L", "R"):
        raise ValueError(f"unknown supervised variant {variant!r}; expected 'L' or 'R'")
    if variant == "R" and len(catalog) == 0:
        raise ValueError("variant R needs a non-empty relation catalog")
    missing = set(catalog.ids) - {x.relation for x in train}
    if missing:
        raise ValueError(f"relations absent from the training split: {sorted(missing)}")
    model.init_supervised_head(variant, len(catalog), seed=config.seed)
    which = ("con", "head") if variant == "L" else ("con", "rel", "head")
    params = {k: v for k, v in model.parameters().items() if k.split(".", 1)[0] in which}
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay, max_grad_norm=config.max_grad_norm)
    rng = np.random.default_rng(config.seed)
    gold_all = np.array([catalog.index(x.relation) for x in train])
    bs = min(config.batch_size, len(train))
    for step in range(config.steps):
        idx = rng.choice(len(train), size=bs, replace=False)
        with Tape() as tape:
            loss = cross_entropy(supervised_logits(model, variant, [train[i] for i in idx], catalog, rng),
                                 gold_all[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingAborted(step, f"non-finite loss {value}")
        backward(tape, loss)
        lr = lr_schedule(step, config.warmup_steps, config.lr)
        opt.step(lr=lr)
        if logger is not None:
            logger.log({"phase": f"supervised-{variant}", "step": step, "loss": value, "seed": config.seed})
    acc = accuracy(model, variant, test, catalog)
    if logger is not None:
        logger.log({"phase": f"supervised-{variant}", "step": config.steps, "accuracy": acc, "seed": config.seed})
    return acc


def subsample_per_relation(instances, fraction: float, seed: int = 0, minimum: int = 1):
    """Keep ``fraction`` of the instances, stratified so every relation keeps ``minimum``."""
    rng = np.random.default_rng(seed)
    by_rel: dict[str, list] = {}
    for x in instances:
        by_rel.setdefault(x.relation, []).append(x)
    target = max(int(round(fraction * len(instances))), minimum * len(by_rel))
    out = []
    for rid in sorted(by_rel):
        items = by_rel[rid]
        take = rng.choice(len(items), size=minimum, replace=False)
        out.extend(items[i] for i in take)
    kept = {id(x) for x in out}
    rest = [x for x in instances if id(x) not in kept]
    extra = target - len(out)
    if extra > 0:
        out.extend(rest[i] for i in rng.choice(len(rest), size=extra, replace=False))
    return out


def split_instances(instances, test_fraction: float = 0.2, seed: int = 0):
    """Per-relation random ``(train, test)`` split of instances over a shared relation set."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_rel: dict[str, list] = {}
    for x in instances:
        by_rel.setdefault(x.relation, []).append(x)
    train, test = [], []
    for rid in sorted(by_rel):
        items = by_rel[rid]
        if len(items) < 2:
            raise ValueError(f"relation {rid} has fewer than 2 instances")
        order = rng.permutation(len(items))
        n_test = min(max(1, int(round(test_fraction * len(items)))), len(items) - 1)
        test.extend(items[i] for i in order[:n_test])
        train.extend(items[i] for i in order[n_test:])
    return train, test
