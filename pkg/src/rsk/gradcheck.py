"""Central finite-difference checks of every analytic gradient in the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from .loss import LossConfig, rs_at_k_batch, rs_at_k_value
from .model import Embedder
from .simix import backprop_through_expansion, enumerate_virtuals, expand_batch
from .train import contrastive_loss, multistage_gradients

FD_STEP = 1e-6
TOLERANCE = 1e-4
# Central differences at FD_STEP carry round-off near eps * |L| / h ~ 1e-10,
# so gradients smaller than this are compared on an absolute scale.
RESOLUTION_FLOOR = 1e-6


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP, entries=None) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RESOLUTION_FLOOR) -> float:
    """Worst entry-wise gap, relative to the largest gradient magnitude (at least ``floor``)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def random_labels(rng: np.random.Generator, max_batch: int = 16) -> np.ndarray:
    """Balanced-ish labels with every class of size >= 2, shuffled."""
    if max_batch < 4:
        raise ValueError("random batches need room for two classes of two")
    m = int(rng.integers(2, min(4, max_batch // 2) + 1))
    c = int(rng.integers(2, max_batch // m + 1))
    labels = np.repeat(np.arange(c), m)
    # occasionally enlarge one class so sizes differ
    if c * m + 1 <= max_batch and rng.random() < 0.5:
        labels = np.append(labels, 0)
    return rng.permutation(labels)


def random_unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_loss_config(rng: np.random.Generator) -> LossConfig:
    pool = (1, 2, 3, 4, 6, 8)
    cutoffs = tuple(sorted(rng.choice(pool, size=int(rng.integers(1, 4)), replace=False).tolist()))
    return LossConfig(tau1=float(rng.choice([0.5, 1.0, 2.0])), tau2=float(rng.choice([0.01, 0.05, 0.1])), cutoffs=cutoffs)


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} cases={self.cases:<4d} max_rel_err={self.max_rel_error:.3e}  tol={self.tolerance:.0e}"


def _flip(g, sign_flip: bool):
    return -g if sign_flip else g


def check_similarity_gradients(cases: int = 100, seed: int = 0, sign_flip: bool = False, max_batch: int = 16) -> SuiteResult:
    """d(batch loss)/d(similarity entries) against finite differences of the value."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        labels = random_labels(rng, max_batch)
        cfg = random_loss_config(rng)
        e = random_unit(rng, labels.size, int(rng.integers(2, 9)))
        s = e @ e.T
        g = _flip(rs_at_k_batch(s, labels, cfg).d_similarity, sign_flip)
        fd = central_difference(lambda x: rs_at_k_value(x, labels, cfg), s)
        worst = max(worst, max_relative_error(g, fd))
    return SuiteResult("loss/similarity", cases, worst)


def check_expansion_gradients(cases: int = 100, seed: int = 1, sign_flip: bool = False, max_batch: int = 10) -> SuiteResult:
    """Loss on the mixup-expanded batch, differentiated w.r.t. the original similarities."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        labels = random_labels(rng, max_batch)
        cfg = random_loss_config(rng)
        virtuals = enumerate_virtuals(labels, rng)
        e = random_unit(rng, labels.size, int(rng.integers(2, 9)))
        s = e @ e.T
        exp = expand_batch(s, labels, virtuals)
        d_exp = rs_at_k_batch(exp.similarities, exp.labels, cfg).d_similarity
        g = _flip(backprop_through_expansion(d_exp, virtuals, labels.size), sign_flip)

        def value(x):
            ex = expand_batch(x, labels, virtuals)
            return rs_at_k_value(ex.similarities, ex.labels, cfg)

        fd = central_difference(value, s)
        worst = max(worst, max_relative_error(g, fd))
    return SuiteResult("simix/expansion", cases, worst)


def _param_check(model: Embedder, features, labels, loss_fn, virtuals, chunk_size, value_fn, sign_flip) -> float:
    res = multistage_gradients(model, features, labels, loss_fn, chunk_size, virtuals)
    worst = 0.0
    for name, p in model.params.items():

        def f(x, name=name):
            probe = model.copy()
            probe.params[name] = x
            emb = probe.forward(features)
            ex = expand_batch(emb @ emb.T, labels, virtuals or [])
            return value_fn(ex.similarities, ex.labels)

        fd = central_difference(f, p)
        worst = max(worst, max_relative_error(_flip(res.grads[name], sign_flip), fd))
    return worst


def check_parameter_gradients(cases: int = 100, seed: int = 2, sign_flip: bool = False, max_batch: int = 16) -> SuiteResult:
    """d(batch loss)/d(theta) through normalisation, similarity, optional mixup, loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        # mixup batches are kept smaller: the expanded size grows quadratically
        labels = random_labels(rng, max_batch if i % 2 == 0 else min(max_batch, 10))
        cfg = random_loss_config(rng)
        d_in = int(rng.integers(3, 7))
        d = int(rng.integers(2, 9))
        hidden = () if i % 3 else (int(rng.integers(3, 7)),)
        model = Embedder.init(d_in, d, hidden=hidden, bias=bool(i % 4), seed=int(rng.integers(1 << 31)))
        features = rng.standard_normal((labels.size, d_in))
        virtuals = enumerate_virtuals(labels, rng) if i % 2 else None
        loss_fn = partial(rs_at_k_batch, cfg=cfg)
        value_fn = partial(rs_at_k_value, cfg=cfg)
        chunk = int(rng.integers(1, labels.size + 1))
        worst = max(worst, _param_check(model, features, labels, loss_fn, virtuals, chunk, value_fn, sign_flip))
    return SuiteResult("embedder/parameters", cases, worst)


def check_contrastive_gradients(cases: int = 30, seed: int = 3, sign_flip: bool = False, max_batch: int = 16) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        labels = random_labels(rng, max_batch)
        d_in = int(rng.integers(3, 7))
        model = Embedder.init(d_in, int(rng.integers(2, 9)), seed=int(rng.integers(1 << 31)))
        features = rng.standard_normal((labels.size, d_in))
        loss_fn = partial(contrastive_loss, margin=0.3)

        def value_fn(s, lab):
            return contrastive_loss(s, lab, margin=0.3).value

        worst = max(worst, _param_check(model, features, labels, loss_fn, None, 4, value_fn, sign_flip))
    return SuiteResult("contrastive/parameters", cases, worst)


def run_all(cases: int = 100, seed: int = 0, sign_flip: bool = False, max_batch: int = 16) -> list[SuiteResult]:
    return [
        check_similarity_gradients(cases, seed, sign_flip, max_batch),
        check_expansion_gradients(cases, seed + 1, sign_flip, min(max_batch, 10)),
        check_parameter_gradients(cases, seed + 2, sign_flip, max_batch),
        check_contrastive_gradients(max(cases // 3, 1), seed + 3, sign_flip, max_batch),
    ]
