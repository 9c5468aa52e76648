"""Class-balanced mini-batches: M/m classes with m examples each."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int
    per_class: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.per_class < 2:
            raise SamplerError(f"per_class must be >= 2 so every query has a positive, got {self.per_class}")
        if self.batch_size < 1 or self.batch_size % self.per_class:
            raise SamplerError(
                f"batch_size {self.batch_size} must be a positive multiple of per_class {self.per_class}"
            )

    @property
    def classes_per_batch(self) -> int:
        return self.batch_size // self.per_class


@dataclass
class DatasetIndex:
    """Example ids grouped by class. Classes smaller than ``min_size`` are excluded."""

    members: dict[int, np.ndarray]
    min_size: int
    excluded: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def build(cls, labels, min_size: int) -> DatasetIndex:
        labels = np.asarray(labels)
        members = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
        excluded = frozenset(c for c, ids in members.items() if ids.size < min_size)
        return cls(members, min_size, excluded)

    @property
    def class_sizes(self) -> dict[int, int]:
        return {c: ids.size for c, ids in self.members.items()}

    @property
    def eligible(self) -> list[int]:
        return sorted(c for c in self.members if c not in self.excluded)


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray
    labels: np.ndarray


def sample_batch(index: DatasetIndex, cfg: SamplerConfig, rng: np.random.Generator) -> Batch:
    if index.min_size < cfg.per_class:
        raise SamplerError(f"index built for classes of >= {index.min_size}, sampler needs {cfg.per_class}")
    eligible = index.eligible
    need = cfg.classes_per_batch
    if len(eligible) < need:
        raise SamplerError(
            f"batch needs {need} classes with >= {cfg.per_class} examples each, "
            f"only {len(eligible)} are eligible (short by {need - len(eligible)})"
        )
    classes = rng.choice(np.asarray(eligible), size=need, replace=False)
    ids = np.concatenate([rng.choice(index.members[int(c)], size=cfg.per_class, replace=False) for c in classes])
    labels = np.repeat(classes, cfg.per_class)
    return Batch(ids=ids, labels=labels)


class EpochIterator:
    """A fixed number of batches drawn from one seeded stream."""

    def __init__(self, index: DatasetIndex, cfg: SamplerConfig, iterations: int, rng: np.random.Generator | None = None):
        self.index = index
        self.cfg = cfg
        self.iterations = iterations
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    def __len__(self) -> int:
        return self.iterations

    def __iter__(self):
        for _ in range(self.iterations):
            yield sample_batch(self.index, self.cfg, self.rng)


def epoch_iterator(index: DatasetIndex, cfg: SamplerConfig, iterations: int, rng=None) -> EpochIterator:
    return EpochIterator(index, cfg, iterations, rng)
