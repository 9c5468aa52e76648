import numpy as np
import pytest

from rsk.sampler import DatasetIndex, SamplerConfig, SamplerError, epoch_iterator, sample_batch


def check_batch(batch, index, cfg):
    """Return a list of violated invariants (empty when the batch is valid)."""
    problems = []
    classes, counts = np.unique(batch.labels, return_counts=True)
    if classes.size != cfg.classes_per_batch:
        problems.append("class count")
    if np.any(counts != cfg.per_class):
        problems.append("per-class count")
    if np.unique(batch.ids).size != batch.ids.size:
        problems.append("duplicate id")
    if any(int(c) in index.excluded for c in classes):
        problems.append("excluded class")
    for i, lab in zip(batch.ids, batch.labels):
        if i not in index.members[int(lab)]:
            problems.append("label mismatch")
            break
    if batch.ids.size != cfg.batch_size:
        problems.append("batch size")
    return problems


def uneven_labels(seed=0):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 12, size=40)
    return rng.permutation(np.repeat(np.arange(40), sizes)), sizes


def test_config_validation():
    with pytest.raises(SamplerError):
        SamplerConfig(batch_size=10, per_class=4)
    with pytest.raises(SamplerError):
        SamplerConfig(batch_size=8, per_class=1)
    assert SamplerConfig(16, 4).classes_per_batch == 4


def test_index_excludes_small_classes():
    labels, sizes = uneven_labels()
    index = DatasetIndex.build(labels, 4)
    assert index.excluded == frozenset(int(c) for c in np.flatnonzero(sizes < 4))
    assert index.class_sizes == {c: int(s) for c, s in enumerate(sizes)}


def test_invariants_over_many_batches():
    labels, _ = uneven_labels(1)
    cfg = SamplerConfig(32, 4)
    index = DatasetIndex.build(labels, 4)
    violations = 0
    for batch in epoch_iterator(index, cfg, 10_000, np.random.default_rng(0)):
        violations += len(check_batch(batch, index, cfg))
    assert violations == 0


def test_class_frequency_is_uniform():
    labels = np.repeat(np.arange(20), 6)
    cfg = SamplerConfig(16, 4)
    index = DatasetIndex.build(labels, 4)
    n = 4000
    hits = np.zeros(20)
    for batch in epoch_iterator(index, cfg, n, np.random.default_rng(1)):
        hits[np.unique(batch.labels)] += 1
    p = cfg.classes_per_batch / 20
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(hits - n * p) <= 4 * sigma)


def test_determinism():
    labels = np.repeat(np.arange(10), 5)
    index = DatasetIndex.build(labels, 4)
    cfg = SamplerConfig(8, 4, seed=3)
    a = [b.ids for b in epoch_iterator(index, cfg, 20)]
    b = [b.ids for b in epoch_iterator(index, cfg, 20)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(epoch_iterator(index, cfg, 20)) == 20


def test_shortfall_names_deficit():
    labels = np.repeat(np.arange(3), 5)
    index = DatasetIndex.build(labels, 4)
    with pytest.raises(SamplerError, match="short by 1"):
        sample_batch(index, SamplerConfig(16, 4), np.random.default_rng(0))


def test_index_built_for_smaller_classes_is_refused():
    labels = np.repeat(np.arange(10), 3)
    index = DatasetIndex.build(labels, 2)
    with pytest.raises(SamplerError):
        sample_batch(index, SamplerConfig(8, 4), np.random.default_rng(0))


def test_large_batch_from_many_classes():
    labels = np.repeat(np.arange(98), 6)
    cfg = SamplerConfig(392, 4)
    index = DatasetIndex.build(labels, 4)
    batch = sample_batch(index, cfg, np.random.default_rng(0))
    assert check_batch(batch, index, cfg) == []
    assert np.unique(batch.labels).size == 98
