"""Exact retrieval metrics over sorted rankings."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


def rank_database(query: np.ndarray, database: np.ndarray) -> np.ndarray:
    """Database indices by descending dot product; equal scores keep ascending index order."""
    database = np.atleast_2d(database)
    if database.shape[0] == 0:
        raise ValueError("cannot rank an empty database")
    scores = database @ np.asarray(query)
    return np.argsort(-scores, kind="stable")


def recall_at_k_metric(ranking, positives, k: int) -> float:
    """Fraction of the query's positives found in the first k ranked items."""
    positives = set(int(p) for p in positives)
    if not positives:
        raise ValueError("recall@k is undefined without positives")
    found = sum(1 for i in np.asarray(ranking)[:k] if int(i) in positives)
    return found / len(positives)


def r_at_k_metric(ranking, positives, k: int) -> int:
    """1 if any positive is among the first k ranked items, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    positives = set(int(p) for p in positives)
    return int(any(int(i) in positives for i in np.asarray(ranking)[:k]))


def mean_r_at_k(rankings, positive_sets, k: int) -> float:
    return float(np.mean([r_at_k_metric(r, p, k) for r, p in zip(rankings, positive_sets)]))


@dataclass
class MetricRow:
    k: int
    r_at_k: float
    recall_at_k: float


@dataclass
class MetricTable:
    rows: list[MetricRow]
    num_queries: int
    num_skipped: int

    def r_at(self, k: int) -> float:
        return next(r.r_at_k for r in self.rows if r.k == k)

    def recall_at(self, k: int) -> float:
        return next(r.recall_at_k for r in self.rows if r.k == k)

    def to_text(self, sep: str = "\t") -> str:
        lines = [sep.join(["k", "r@k", "recall@k"])]
        lines += [sep.join([str(r.k), f"{r.r_at_k:.6f}", f"{r.recall_at_k:.6f}"]) for r in self.rows]
        return "\n".join(lines) + "\n"


def evaluate_embeddings(embeddings: np.ndarray, labels, ks) -> MetricTable:
    """Leave-one-out retrieval: every example queries all the others."""
    labels = np.asarray(labels)
    n = labels.size
    ks = sorted(int(k) for k in ks)
    s = embeddings @ embeddings.T
    np.fill_diagonal(s, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")[:, : n - 1]
    match = labels[order] == labels[:, None]
    npos = match.sum(axis=1)
    keep = npos > 0
    skipped = int(n - keep.sum())
    if skipped:
        logger.warning("skipping %d queries whose class has a single member", skipped)
    if skipped == n:
        raise ValueError("no query has a positive in the database; every class is a singleton")
    match, npos = match[keep], npos[keep]
    hits = np.cumsum(match, axis=1)
    rows = []
    for k in ks:
        found = hits[:, min(k, n - 1) - 1]
        rows.append(MetricRow(k, float(np.mean(found > 0)), float(np.mean(found / npos))))
    return MetricTable(rows, int(keep.sum()), skipped)


def evaluate_split(model, features: np.ndarray, labels, ks=(1, 2, 4, 8)) -> MetricTable:
    return evaluate_embeddings(model.forward(features), labels, ks)
