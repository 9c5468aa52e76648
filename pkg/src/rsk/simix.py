"""Similarity mixup: virtual examples built from same-class pairs.

A virtual example ``a*x + (1-a)*z`` is never materialised. Its similarities
are linear mixes of the original ones, so the expanded matrix is
``C S C^T`` where each row of ``C`` is either a unit vector (original
example) or ``a*e_x + (1-a)*e_z`` (virtual example). Mixed vectors are not
re-normalised, which is what keeps the expansion linear in ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VirtualExample:
    parent_a: int
    parent_b: int
    alpha: float
    label: int


@dataclass
class ExpandedBatch:
    base_size: int
    virtuals: list[VirtualExample]
    similarities: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.similarities.shape[0]


def num_virtuals(class_sizes) -> int:
    return int(sum(m * (m - 1) // 2 for m in class_sizes))


def enumerate_virtuals(labels, rng: np.random.Generator) -> list[VirtualExample]:
    """One virtual per unordered same-class pair, each with a fresh alpha in (0, 1)."""
    labels = np.asarray(labels)
    pairs = []
    for i in range(labels.size):
        for j in np.flatnonzero(labels[i + 1:] == labels[i]) + i + 1:
            pairs.append((i, int(j)))
    alphas = rng.random(len(pairs))
    # Generator.random samples [0, 1); zero is redrawn so the mix is never a parent
    while np.any(alphas == 0.0):
        zero = alphas == 0.0
        alphas[zero] = rng.random(int(zero.sum()))
    return [
        VirtualExample(a, b, float(alpha), int(labels[a]))
        for (a, b), alpha in zip(pairs, alphas)
    ]


def mixed_similarity_ov(s_wx: float, s_wz: float, alpha: float) -> float:
    """Similarity between an original example w and the virtual x z alpha."""
    return alpha * s_wx + (1.0 - alpha) * s_wz


def mixed_similarity_vv(s_xy, s_zw, s_xw, s_zy, alpha1: float, alpha2: float) -> float:
    """Similarity between virtuals x z alpha1 and y w alpha2."""
    return (
        alpha1 * alpha2 * s_xy
        + (1.0 - alpha1) * (1.0 - alpha2) * s_zw
        + alpha1 * (1.0 - alpha2) * s_xw
        + (1.0 - alpha1) * alpha2 * s_zy
    )


def mixing_matrix(virtuals: list[VirtualExample], base_size: int) -> np.ndarray:
    """Rows of C for the virtual examples only, shape (V, M)."""
    a = np.zeros((len(virtuals), base_size))
    for r, v in enumerate(virtuals):
        if not (0 <= v.parent_a < base_size and 0 <= v.parent_b < base_size):
            raise IndexError(f"virtual {r} references a parent outside a batch of {base_size}")
        a[r, v.parent_a] += v.alpha
        a[r, v.parent_b] += 1.0 - v.alpha
    return a


def expand_batch(similarities: np.ndarray, labels, virtuals: list[VirtualExample]) -> ExpandedBatch:
    s = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels)
    m = s.shape[0]
    if not virtuals:
        return ExpandedBatch(m, [], s.copy(), labels.copy())
    a = mixing_matrix(virtuals, m)
    ov = s @ a.T
    vo = a @ s
    vv = vo @ a.T
    full = np.block([[s, ov], [vo, vv]])
    vlabels = np.array([v.label for v in virtuals], dtype=labels.dtype)
    return ExpandedBatch(m, list(virtuals), full, np.concatenate([labels, vlabels]))


def backprop_through_expansion(d_expanded: np.ndarray, virtuals: list[VirtualExample], base_size: int) -> np.ndarray:
    """Adjoint of :func:`expand_batch`: C^T D C restricted to the original block."""
    n = base_size + len(virtuals)
    if d_expanded.shape != (n, n):
        raise ValueError(f"gradient has shape {d_expanded.shape}, expected {(n, n)}")
    m = base_size
    if not virtuals:
        return d_expanded.copy()
    a = mixing_matrix(virtuals, m)
    d_oo = d_expanded[:m, :m]
    d_ov = d_expanded[:m, m:]
    d_vo = d_expanded[m:, :m]
    d_vv = d_expanded[m:, m:]
    return d_oo + d_ov @ a + a.T @ d_vo + a.T @ d_vv @ a
