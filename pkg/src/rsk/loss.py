"""Recall@k: exact counting, the sigmoid-relaxed surrogate and its analytic gradient.

All arithmetic here is float64. A query's database is the batch minus the
query itself; self-pairs never enter a rank sum.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Saturated sigmoid derivatives below this are flushed to exact zero.
GRAD_FLUSH = 1e-300


class EmptyPositiveSetError(ValueError):
    """A query without positives; class-balanced batches never produce one."""


@dataclass(frozen=True)
class LossConfig:
    tau1: float = 1.0
    tau2: float = 0.01
    cutoffs: tuple[int, ...] = (1, 2, 4, 8, 16)

    def __post_init__(self) -> None:
        if not (self.tau1 > 0 and math.isfinite(self.tau1)):
            raise ValueError(f"tau1 must be positive, got {self.tau1}")
        if not (self.tau2 > 0 and math.isfinite(self.tau2)):
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        cutoffs = tuple(int(k) for k in self.cutoffs)
        if not cutoffs:
            raise ValueError("cutoffs must be non-empty")
        if cutoffs[0] < 1 or any(b <= a for a, b in zip(cutoffs, cutoffs[1:])):
            raise ValueError(f"cutoffs must be strictly increasing and >= 1, got {cutoffs}")
        object.__setattr__(self, "cutoffs", cutoffs)


@dataclass(frozen=True)
class QueryView:
    """One query against its database (the batch minus the query)."""

    query_index: int
    db_indices: np.ndarray
    positive_mask: np.ndarray
    similarity_row: np.ndarray

    @classmethod
    def from_matrix(cls, similarities: np.ndarray, labels: np.ndarray, query_index: int) -> QueryView:
        labels = np.asarray(labels)
        n = similarities.shape[0]
        db = np.array([i for i in range(n) if i != query_index], dtype=np.int64)
        return cls(
            query_index=int(query_index),
            db_indices=db,
            positive_mask=labels[db] == labels[query_index],
            similarity_row=np.asarray(similarities[query_index, db], dtype=np.float64),
        )

    def position(self, target: int) -> int:
        if target == self.query_index:
            raise ValueError("the query is not part of its own database")
        hits = np.flatnonzero(self.db_indices == target)
        if hits.size == 0:
            raise ValueError(f"index {target} is not in the database")
        return int(hits[0])

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.positive_mask))


@dataclass
class LossGradients:
    value: float
    d_similarity: np.ndarray


def heaviside(u):
    """Step function with H(0) = 1, so a tie counts against the ranked item."""
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("heaviside requires finite input")
    out = (u >= 0).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def _logistic(t: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only: never overflows
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(u, tau: float):
    """Temperature-scaled logistic 1 / (1 + exp(-u / tau))."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    out = _logistic(np.asarray(u, dtype=np.float64) / tau)
    return float(out) if out.ndim == 0 else out


def sigmoid_grad(u, tau: float):
    """d/du of sigmoid(u, tau), with subnormal tails flushed to zero."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = np.asarray(u, dtype=np.float64) / tau
    # sigma(t)(1 - sigma(t)) = e / (1 + e)^2 with e = exp(-|t|)
    e = np.exp(-np.abs(t))
    out = e / ((1.0 + e) ** 2 * tau)
    out = np.where(out < GRAD_FLUSH, 0.0, out)
    return float(out) if out.ndim == 0 else out


def exact_rank(view: QueryView, target: int) -> int:
    """1 + number of other database items scoring at least as high as ``target``."""
    pos = view.position(target)
    row = view.similarity_row
    others = np.delete(row, pos)
    return 1 + int(np.sum(heaviside(others - row[pos])))


def exact_recall_at_k(view: QueryView, k: int) -> float:
    if view.num_positives == 0:
        raise EmptyPositiveSetError(f"query {view.query_index} has no positives")
    hits = sum(
        heaviside(k - exact_rank(view, int(x)))
        for x in view.db_indices[view.positive_mask]
    )
    return hits / view.num_positives


def smooth_rank_sum(view: QueryView, target: int, tau2: float) -> float:
    pos = view.position(target)
    row = view.similarity_row
    others = np.delete(row, pos)
    return float(np.sum(sigmoid(others - row[pos], tau2)))


def smooth_recall_at_k(view: QueryView, k: int, cfg: LossConfig) -> float:
    """Smoothed recall with the training-time normalisation by min(k, |P|)."""
    npos = view.num_positives
    if npos == 0:
        raise EmptyPositiveSetError(f"query {view.query_index} has no positives")
    numerator = sum(
        sigmoid(k - 1 - smooth_rank_sum(view, int(x), cfg.tau2), cfg.tau1)
        for x in view.db_indices[view.positive_mask]
    )
    r = min(numerator, k) / min(k, npos)
    return float(min(max(r, 0.0), 1.0))


def _query_value_and_grad(
    row: np.ndarray, valid: np.ndarray, positives: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Loss and d loss / d row for one query.

    ``row`` holds the query's similarity to every batch item, ``valid`` marks
    its database (everything but the query) and ``positives`` lists the
    positive batch indices.
    """
    npos = positives.size
    sp = row[positives]
    diff = row[None, :] - sp[:, None]
    mask = np.broadcast_to(valid, diff.shape).copy()
    mask[np.arange(npos), positives] = False
    diff = np.where(mask, diff, 0.0)
    rank_sum = np.where(mask, sigmoid(diff, cfg.tau2), 0.0).sum(axis=1)
    d_inner = np.where(mask, sigmoid_grad(diff, cfg.tau2), 0.0)

    value = 0.0
    coeff = np.zeros(npos)
    for k in cfg.cutoffs:
        u = k - 1 - rank_sum
        numerator = float(sigmoid(u, cfg.tau1).sum())
        denom = min(k, npos)
        value += 1.0 - min(numerator, k) / denom
        if numerator < k:
            # d(1 - N/denom)/d rank_sum_x = sigma1'(u_x) / denom
            coeff += sigmoid_grad(u, cfg.tau1) / denom
    nk = len(cfg.cutoffs)
    coeff /= nk

    grad = coeff @ d_inner
    grad[positives] -= coeff * d_inner.sum(axis=1)
    return value / nk, grad


def rs_at_k_single_query(view: QueryView, cfg: LossConfig) -> LossGradients:
    """Multi-cutoff RS@k loss of one query; ``d_similarity`` is indexed like the view's row."""
    if view.num_positives == 0:
        raise EmptyPositiveSetError(f"query {view.query_index} has no positives")
    n = view.similarity_row.size
    value, grad = _query_value_and_grad(
        np.asarray(view.similarity_row, dtype=np.float64),
        np.ones(n, dtype=bool),
        np.flatnonzero(view.positive_mask),
        cfg,
    )
    return LossGradients(value=value, d_similarity=grad)


def rs_at_k_batch(
    similarities: np.ndarray,
    labels: Sequence[int],
    cfg: LossConfig,
    threads: int = 1,
) -> LossGradients:
    """Mean RS@k loss over every batch member used as a query.

    ``d_similarity[q, z]`` is the partial derivative with respect to the matrix
    entry read by query ``q``; the diagonal is always zero. Since ``s_ij`` and
    ``s_ji`` are the same dot product, the embedding adjoint adds the
    transpose (see :func:`similarity_backward`).
    """
    s = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels)
    n = s.shape[0]
    if s.shape != (n, n) or labels.shape != (n,):
        raise ValueError(f"expected square similarities aligned with labels, got {s.shape} and {labels.shape}")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    empty = np.flatnonzero(~same.any(axis=1))
    if empty.size:
        raise EmptyPositiveSetError(
            f"queries {empty.tolist()} have no positives; the batch sampler must give every class >= 2 members"
        )

    grad = np.zeros_like(s)
    values = np.zeros(n)

    def run(queries: range) -> None:
        for q in queries:
            valid = np.ones(n, dtype=bool)
            valid[q] = False
            values[q], grad[q] = _query_value_and_grad(s[q], valid, np.flatnonzero(same[q]), cfg)

    if threads > 1 and n > 1:
        step = -(-n // threads)
        blocks = [range(a, min(a + step, n)) for a in range(0, n, step)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, blocks))
    else:
        run(range(n))

    # rows are written disjointly; the scalar reduction is in query order
    return LossGradients(value=float(values.sum()) / n, d_similarity=grad / n)


def similarity_backward(d_similarity: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Adjoint of S = E E^T: both s_ij and s_ji depend on e_i."""
    return (d_similarity + d_similarity.T) @ embeddings


def outer_sigmoid_grad_profile(ranks, cutoffs: Sequence[int], tau1: float = 1.0) -> np.ndarray:
    """Push on a positive at rank r: sum over k of sigma1'(k - r)."""
    ranks = np.asarray(ranks, dtype=np.float64)
    return sum(sigmoid_grad(k - ranks, tau1) for k in cutoffs)


def rs_at_k_value(similarities: np.ndarray, labels: Sequence[int], cfg: LossConfig) -> float:
    """Batch loss value only, via one dense (query, positive, item) tensor.

    Written independently of the per-query gradient path; memory is O(n^3).
    """
    s = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels)
    n = s.shape[0]
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    npos = same.sum(axis=1)
    if np.any(npos == 0):
        raise EmptyPositiveSetError("every query needs at least one positive")
    # diff[q, x, z] = s_qz - s_qx
    diff = s[:, None, :] - s[:, :, None]
    eye = np.eye(n, dtype=bool)
    valid = ~(eye[:, None, :] | eye[None, :, :])
    rank_sum = np.where(valid, sigmoid(diff, cfg.tau2), 0.0).sum(axis=2)
    total = np.zeros(n)
    for k in cfg.cutoffs:
        numerator = np.where(same, sigmoid(k - 1 - rank_sum, cfg.tau1), 0.0).sum(axis=1)
        total += 1.0 - np.minimum(numerator, k) / np.minimum(k, npos)
    return float(total.mean() / len(cfg.cutoffs))
