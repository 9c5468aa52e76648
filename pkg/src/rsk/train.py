"""Multistage back-propagation and the training loop.

Stage 1 embeds the batch chunk by chunk keeping only the embeddings.
Stage 2 forms similarities, optionally expands them with virtual examples,
evaluates the loss and pulls its gradient back to the embeddings.
Stage 3 re-embeds each chunk with its activations kept and injects that
chunk's slice of the embedding gradient. Live activations never exceed one
chunk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .loss import LossConfig, LossGradients, rs_at_k_batch, similarity_backward
from .model import Adam, Embedder
from .sampler import DatasetIndex, SamplerConfig, epoch_iterator
from .simix import VirtualExample, backprop_through_expansion, enumerate_virtuals, expand_batch

logger = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray, np.ndarray], LossGradients]


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    sampler: SamplerConfig
    loss: LossConfig = field(default_factory=LossConfig)
    simix: bool = False
    chunk_size: int = 64
    iterations: int = 300
    seed: int = 0
    forward_dtype: str = "float64"
    lr: float = 1e-2
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    threads: int = 1
    objective: str = "rsk"
    margin: float = 0.5

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.forward_dtype not in ("float32", "float64"):
            raise ValueError(f"forward_dtype must be float32 or float64, got {self.forward_dtype}")
        if self.objective not in ("rsk", "contrastive"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    batch_size: int
    expanded_size: int


def contrastive_loss(similarities: np.ndarray, labels, margin: float = 0.5) -> LossGradients:
    """Pairwise contrastive baseline on similarities.

    Positive pairs pay ``1 - s``, negative pairs pay ``max(0, s - margin)``;
    the mean is over unordered pairs. Gradients sit in the upper triangle.
    """
    s = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels)
    n = s.shape[0]
    iu = np.triu_indices(n, k=1)
    same = labels[iu[0]] == labels[iu[1]]
    sv = s[iu]
    hinge = sv - margin
    terms = np.where(same, 1.0 - sv, np.maximum(hinge, 0.0))
    dterms = np.where(same, -1.0, (hinge > 0).astype(np.float64))
    npairs = max(sv.size, 1)
    grad = np.zeros_like(s)
    grad[iu] = dterms / npairs
    return LossGradients(value=float(terms.sum()) / npairs, d_similarity=grad)


def make_loss_fn(cfg: TrainConfig) -> LossFn:
    if cfg.objective == "contrastive":
        return partial(contrastive_loss, margin=cfg.margin)
    return partial(rs_at_k_batch, cfg=cfg.loss, threads=cfg.threads)


def embedding_gradient(
    embeddings: np.ndarray,
    labels: np.ndarray,
    loss_fn: LossFn,
    virtuals: list[VirtualExample] | None = None,
) -> tuple[float, np.ndarray, int]:
    """Stage 2: loss value, dL/d(embeddings) and the (possibly expanded) batch size."""
    s = embeddings @ embeddings.T
    virtuals = virtuals or []
    expanded = expand_batch(s, labels, virtuals)
    lg = loss_fn(expanded.similarities, expanded.labels)
    d_s = backprop_through_expansion(lg.d_similarity, virtuals, len(labels))
    return lg.value, similarity_backward(d_s, embeddings), expanded.size


def _chunks(n: int, size: int):
    return [slice(a, min(a + size, n)) for a in range(0, n, size)]


def multistage_gradients(
    model: Embedder,
    features: np.ndarray,
    labels,
    loss_fn: LossFn,
    chunk_size: int,
    virtuals: list[VirtualExample] | None = None,
    dtype=np.float64,
) -> StepResult:
    labels = np.asarray(labels)
    n = features.shape[0]
    chunks = _chunks(n, chunk_size)
    emb = np.concatenate([model.forward(features[c], dtype=dtype) for c in chunks])
    value, d_emb, expanded = embedding_gradient(emb, labels, loss_fn, virtuals)
    if not np.isfinite(value) or not np.all(np.isfinite(d_emb)):
        raise NumericalError(f"non-finite loss ({value}) or embedding gradient")
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for c in chunks:
        _, acts = model.forward(features[c], keep_cache=True, dtype=dtype)
        for k, g in model.backward(acts, d_emb[c]).items():
            grads[k] += g
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite parameter gradients in {bad}")
    return StepResult(value, grads, n, expanded)


def naive_gradients(
    model: Embedder, features: np.ndarray, labels, loss_fn: LossFn, virtuals=None, dtype=np.float64
) -> StepResult:
    """Single pass keeping every activation of the batch alive."""
    labels = np.asarray(labels)
    emb, acts = model.forward(features, keep_cache=True, dtype=dtype)
    value, d_emb, expanded = embedding_gradient(emb, labels, loss_fn, virtuals)
    return StepResult(value, model.backward(acts, d_emb), features.shape[0], expanded)


def batch_loss(model: Embedder, features, labels, loss_fn: LossFn, virtuals=None) -> float:
    emb = model.forward(features)
    s = emb @ emb.T
    expanded = expand_batch(s, labels, virtuals or [])
    return loss_fn(expanded.similarities, expanded.labels).value


def train_step_multistage(
    model: Embedder,
    opt: Adam,
    features: np.ndarray,
    labels,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> StepResult:
    """One optimisation step; mutates ``model`` and ``opt``."""
    virtuals = None
    if cfg.simix:
        if rng is None:
            raise ValueError("similarity mixup needs a random stream for the mixing weights")
        virtuals = enumerate_virtuals(labels, rng)
    dtype = np.float32 if cfg.forward_dtype == "float32" else np.float64
    res = multistage_gradients(model, features, labels, make_loss_fn(cfg), cfg.chunk_size, virtuals, dtype)
    opt.step(model.params, res.grads)
    return res


def baseline_contrastive_step(
    model: Embedder, opt: Adam, features: np.ndarray, labels, margin: float = 0.5, chunk_size: int = 64
) -> StepResult:
    loss_fn = partial(contrastive_loss, margin=margin)
    res = multistage_gradients(model, features, labels, loss_fn, chunk_size)
    opt.step(model.params, res.grads)
    return res


def make_optimizer(cfg: TrainConfig) -> Adam:
    return Adam(lr=cfg.lr, milestones=cfg.milestones, decay=cfg.decay)


def train(
    model: Embedder,
    features: np.ndarray,
    labels,
    cfg: TrainConfig,
    opt: Adam | None = None,
    callback: Callable[[int, StepResult], None] | None = None,
) -> tuple[Adam, list[float]]:
    """Run ``cfg.iterations`` class-balanced steps. Returns the optimizer and the loss trajectory."""
    labels = np.asarray(labels)
    opt = opt or make_optimizer(cfg)
    index = DatasetIndex.build(labels, cfg.sampler.per_class)
    if index.excluded:
        logger.info("excluding %d classes with fewer than %d examples", len(index.excluded), cfg.sampler.per_class)
    batch_rng = np.random.default_rng(cfg.seed)
    mix_rng = np.random.default_rng([cfg.seed, 1])
    losses = []
    for it, batch in enumerate(epoch_iterator(index, cfg.sampler, cfg.iterations, batch_rng)):
        res = train_step_multistage(model, opt, features[batch.ids], batch.labels, cfg, mix_rng)
        losses.append(res.loss)
        if callback is not None:
            callback(it, res)
    return opt, losses
