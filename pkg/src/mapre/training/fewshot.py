"""Prototype + label-aware episode scoring, episodic fine-tuning, zero-shot prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mapre.corpus import RelationCatalog
from mapre.optim import AdamW
from mapre.sampling import Episode, EpisodeSpec, group_by_relation, sample_episode
from mapre.tensor import Tape, Tensor, add, backward, cross_entropy, matmul, mul, no_grad, scale, take_rows, transpose
from mapre.training.metrics import MetricsLogger
from mapre.training.model import FewShotHead, MapREModel
from mapre.training.pretrain import TrainingAborted
from mapre.training.schedule import lr_schedule

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    iterations: int = 300
    batch_episodes: int = 4
    spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(5, 1, 1))
    lr: float = 1e-3
    warmup_steps: int = 30
    weight_decay: float = 1e-5
    max_grad_norm: float = 1.0
    mode: str = "both"
    seed: int = 0


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def episode_scores(u_support, u_query, w_query, v, alpha, beta, n: int, k: int) -> Tensor:
    """``alpha * u_q . proto_r + beta * w_q . v_r`` from encoded tensors.

    ``u_support`` holds the N*K support rows grouped by way; either term is
    skipped when its input is ``None``.
    """
    scores = None
    if u_support is not None:
        avg = np.kron(np.eye(n), np.full((1, k), 1.0 / k))  # [N, N*K] prototype averaging
        proto = matmul(Tensor(avg), u_support)
        scores = mul(alpha, matmul(u_query, transpose(proto)))
    if v is not None:
        aware = mul(beta, matmul(w_query, transpose(v)))
        scores = aware if scores is None else add(scores, aware)
    if scores is None:
        raise ValueError("both coefficients are fixed at zero")
    return scores


def episode_logits(model: MapREModel, head: FewShotHead, episode: Episode, catalog: RelationCatalog,
                   rng=None) -> Tensor:
    """Episode scores as a ``[Q, N]`` tensor.

    The prototype of each way is the mean of its K support context vectors.
    A term whose coefficient is fixed at zero is not computed.
    """
    n = len(episode.relations)
    k = len(episode.support[0]) if episode.support else 0
    queries = [q for q, _ in episode.queries]
    need_agn = head.uses_agnostic
    if need_agn and k == 0:
        raise ValueError("label-agnostic scoring needs K >= 1 supports; use predict_zeroshot")
    support = [s for row in episode.support for s in row] if need_agn else []
    U, W, _, _ = model.encode_context(support + queries, rng=rng)
    q_rows = slice(len(support), len(support) + len(queries))
    u_sup = take_rows(U, slice(0, len(support))) if need_agn else None
    V = model.encode_labels(catalog, episode.relations, rng) if head.uses_aware else None
    return episode_scores(u_sup, take_rows(U, q_rows), take_rows(W, q_rows), V, head.alpha, head.beta, n, k)


def score_episode(model: MapREModel, head: FewShotHead, episode: Episode, catalog: RelationCatalog) -> np.ndarray:
    """Per-query probability rows over the N ways (evaluation mode)."""
    if not episode.support or len(episode.support[0]) == 0:
        raise ValueError("score_episode needs K >= 1; use predict_zeroshot for K = 0")
    with no_grad():
        logits = episode_logits(model, head, episode, catalog)
    return _softmax_rows(logits.data)


def predict_zeroshot(model: MapREModel, labels, queries) -> np.ndarray:
    """Probability rows over candidate labels from ``w_q . v_r`` alone.

    ``labels`` are label token lists; ``queries`` one or more instances.
    """
    if not labels:
        raise ValueError("no candidate relation labels")
    single = not isinstance(queries, (list, tuple))
    qs = [queries] if single else list(queries)
    cat = RelationCatalog({str(i): list(lab) for i, lab in enumerate(labels)})
    with no_grad():
        _, W, _, _ = model.encode_context(qs)
        V = model.encode_labels(cat, cat.ids)
        probs = _softmax_rows(matmul(W, transpose(V)).data)
    return probs[0] if single else probs


def scores_from_embeddings(u_support, u_query, w_query, v, alpha: float, beta: float) -> np.ndarray:
    """Same score as :func:`episode_logits`, from cached numpy embeddings.

    ``u_support`` is ``[N, K, 2d]`` (may have K = 0 when ``alpha == 0``).
    """
    s = np.zeros((u_query.shape[0], v.shape[0]))
    if alpha != 0.0:
        s = s + alpha * (u_query @ u_support.mean(axis=1).T)
    if beta != 0.0:
        s = s + beta * (w_query @ v.T)
    return s


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def finetune_fewshot(model: MapREModel, instances, catalog: RelationCatalog, config: FinetuneConfig,
                     logger: MetricsLogger | None = None, head: FewShotHead | None = None) -> FewShotHead:
    """Episodic cross-entropy fine-tuning of both encoders and the head.

    ``config.mode`` selects which coefficients exist and learn
    (``both``, ``label-agnostic``, ``label-aware``, ``zeroshot``).
    """
    head = head or FewShotHead.for_mode(config.mode)
    model.fewshot = head
    rng = np.random.default_rng(config.seed)
    grouped = group_by_relation(instances)
    params = model.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay, max_grad_norm=config.max_grad_norm)
    spec = config.spec
    if config.mode == "zeroshot":
        spec = EpisodeSpec(spec.n_way, 0, spec.n_query)
    for it in range(config.iterations):
        episodes = [sample_episode(None, spec, rng, grouped=grouped) for _ in range(config.batch_episodes)]
        with Tape() as tape:
            losses = []
            correct = 0
            total = 0
            for ep in episodes:
                logits = episode_logits(model, head, ep, catalog, rng)
                targets = [lab for _, lab in ep.queries]
                losses.append(cross_entropy(logits, targets))
                correct += int((logits.data.argmax(axis=1) == targets).sum())
                total += len(targets)
            loss = losses[0]
            for extra in losses[1:]:
                loss = add(loss, extra)
            loss = scale(loss, 1.0 / len(losses))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingAborted(it, f"non-finite loss {value}")
        backward(tape, loss)
        lr = lr_schedule(it, config.warmup_steps, config.lr)
        try:
            opt.step(lr=lr)
        except FloatingPointError as e:
            raise TrainingAborted(it, str(e)) from None
        if logger is not None:
            a, b = head.values
            logger.log({"phase": f"finetune-{config.mode}", "step": it, "loss": value,
                        "accuracy": correct / total, "alpha": a, "beta": b, "seed": config.seed})
        if it % 50 == 0:
            log.info("finetune %s it %d loss %.4f alpha %.3f beta %.3f", config.mode, it, value, *head.values)
    return head


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def sample_eval_episodes(instances, spec: EpisodeSpec, episodes: int, seed: int) -> list[Episode]:
    grouped = group_by_relation(instances)
    rng = np.random.default_rng(seed)
    return [sample_episode(None, spec, rng, grouped=grouped) for _ in range(episodes)]


class EmbeddingCache:
    """Evaluation-mode u / w / v for a fixed model, computed once per item."""

    def __init__(self, model: MapREModel, catalog: RelationCatalog):
        self.model = model
        self.catalog = catalog
        self._uw: dict = {}
        self._v: dict = {}

    def fill(self, instances) -> None:
        todo = list(dict.fromkeys(x for x in instances if x not in self._uw))
        if todo:
            U, W = self.model.embed_instances(todo)
            for x, u, w in zip(todo, U, W):
                self._uw[x] = (u, w)

    def uw(self, instances) -> tuple[np.ndarray, np.ndarray]:
        self.fill(instances)
        pairs = [self._uw[x] for x in instances]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def v(self, relations) -> np.ndarray:
        todo = [r for r in relations if r not in self._v]
        if todo:
            for r, row in zip(todo, self.model.embed_labels(self.catalog, todo)):
                self._v[r] = row
        return np.array([self._v[r] for r in relations])


def evaluate_episodes(model: MapREModel, episodes, catalog: RelationCatalog, alpha: float, beta: float,
                      cache: EmbeddingCache | None = None) -> float:
    """Mean query accuracy; each item is embedded once and reused across episodes."""
    cache = cache or EmbeddingCache(model, catalog)
    cache.fill([x for ep in episodes for row in ep.support for x in row] + [q for ep in episodes for q, _ in ep.queries])
    correct = total = 0
    for ep in episodes:
        n = len(ep.relations)
        k = len(ep.support[0]) if ep.support else 0
        flat = [x for row in ep.support for x in row]
        d2 = 2 * model.config.model_dim
        us = cache.uw(flat)[0].reshape(n, k, d2) if k else np.zeros((n, 0, d2))
        uq, wq = cache.uw([q for q, _ in ep.queries])
        v = cache.v(ep.relations) if beta != 0.0 else np.zeros((n, model.config.model_dim))
        s = scores_from_embeddings(us, uq, wq, v, alpha if k else 0.0, beta)
        pred = s.argmax(axis=1)
        labels = np.array([lab for _, lab in ep.queries])
        correct += int((pred == labels).sum())
        total += labels.size
    return correct / total


def evaluate_fewshot(model: MapREModel, head: FewShotHead, instances, catalog: RelationCatalog,
                     spec: EpisodeSpec, episodes: int = 500, seed: int = 0) -> float:
    eps = sample_eval_episodes(instances, spec, episodes, seed)
    a, b = head.values
    return evaluate_episodes(model, eps, catalog, a, b)


def evaluate_zeroshot(model: MapREModel, instances, catalog: RelationCatalog, n_way: int = 5,
                      n_query: int = 5, episodes: int = 500, seed: int = 0) -> float:
    eps = sample_eval_episodes(instances, EpisodeSpec(n_way, 0, n_query), episodes, seed)
    return evaluate_episodes(model, eps, catalog, 0.0, 1.0)
