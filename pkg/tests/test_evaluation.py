import numpy as np
import pytest

from rsk.evaluation import (
    evaluate_embeddings,
    mean_r_at_k,
    r_at_k_metric,
    rank_database,
    recall_at_k_metric,
)
from rsk.gradcheck import random_unit
from rsk.loss import QueryView, exact_recall_at_k


def brute_ranking(q, db):
    scores = [float(d @ q) for d in db]
    # selection sort: highest score first, earliest index wins ties
    remaining = list(range(len(db)))
    out = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        out.append(best)
        remaining.remove(best)
    return out


def test_ranking_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        # small integers give exact ties
        db = rng.integers(-2, 3, size=(15, 3)).astype(float)
        q = rng.integers(-2, 3, size=3).astype(float)
        assert list(rank_database(q, db)) == brute_ranking(q, db)


def test_ties_keep_index_order():
    db = np.array([[1.0], [2.0], [1.0], [2.0]])
    assert list(rank_database(np.array([1.0]), db)) == [1, 3, 0, 2]


def test_empty_database():
    with pytest.raises(ValueError):
        rank_database(np.ones(2), np.zeros((0, 2)))


def test_metric_examples():
    ranking = [4, 2, 0, 1, 3]
    assert r_at_k_metric(ranking, {0}, 2) == 0
    assert r_at_k_metric(ranking, {0}, 3) == 1
    assert recall_at_k_metric(ranking, {0, 3}, 3) == 0.5
    assert mean_r_at_k([ranking, ranking], [{4}, {3}], 1) == 0.5
    with pytest.raises(ValueError):
        recall_at_k_metric(ranking, set(), 1)
    with pytest.raises(ValueError):
        r_at_k_metric(ranking, {0}, 0)


def test_recall_agrees_with_exact_recall_without_ties():
    rng = np.random.default_rng(1)
    e = random_unit(rng, 30, 4)
    labels = np.repeat(np.arange(6), 5)
    s = e @ e.T
    table = evaluate_embeddings(e, labels, (1, 2, 4, 8))
    for k in (1, 2, 4, 8):
        expected = np.mean([exact_recall_at_k(QueryView.from_matrix(s, labels, q), k) for q in range(30)])
        assert table.recall_at(k) == pytest.approx(expected, abs=1e-12)


def test_r_at_k_is_monotone_and_reaches_one():
    rng = np.random.default_rng(2)
    e = random_unit(rng, 40, 5)
    labels = np.repeat(np.arange(10), 4)
    ks = (1, 2, 4, 8, 16, 39)
    table = evaluate_embeddings(e, labels, ks)
    values = [table.r_at(k) for k in ks]
    assert values == sorted(values)
    assert table.r_at(39) == 1.0
    assert table.recall_at(39) == 1.0


def test_random_embeddings_give_chance_level():
    rng = np.random.default_rng(3)
    hits = []
    for _ in range(40):
        e = random_unit(rng, 100, 16)
        labels = np.repeat(np.arange(10), 10)
        hits.append(evaluate_embeddings(e, labels, (1,)).r_at(1))
    # nine positives among 99 candidates
    assert np.mean(hits) == pytest.approx(9 / 99, abs=0.03)


def test_singletons_are_skipped():
    e = random_unit(np.random.default_rng(4), 5, 3)
    table = evaluate_embeddings(e, [0, 0, 1, 1, 2], (1,))
    assert table.num_queries == 4
    assert table.num_skipped == 1


def test_all_singletons_rejected():
    with pytest.raises(ValueError):
        evaluate_embeddings(np.eye(3), [0, 1, 2], (1,))


def test_table_text():
    table = evaluate_embeddings(np.eye(4)[[0, 0, 1, 1]], [0, 0, 1, 1], (1, 2))
    lines = table.to_text().splitlines()
    assert lines[0].split("\t") == ["k", "r@k", "recall@k"]
    assert lines[1] == "1\t1.000000\t1.000000"
