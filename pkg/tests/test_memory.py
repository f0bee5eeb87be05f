import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtn.errors import ContractError, DimensionError, EmptyMemoryError
from mtn.memory import ExemplarMemory, FeatureRecord, l2_normalize


def records(label, n, dim=3, rng=None, start=0):
    rng = rng or np.random.default_rng(label)
    return [FeatureRecord(rng.normal(size=dim), label, insertion_seq=start + i) for i in range(n)]


def exhaustive_knn(matrix, q, k, skip=None):
    """Plain loop: cosine similarity to every row, stable descending sort, ties to the lower row."""
    qn = math.sqrt(sum(v * v for v in q))
    scored = []
    for i, row in enumerate(matrix):
        if i == skip:
            continue
        rn = math.sqrt(sum(v * v for v in row))
        scored.append((-(sum(a * b for a, b in zip(q, row)) / (max(qn, 1e-12) * max(rn, 1e-12))), i))
    scored.sort()
    return [(i, -s) for s, i in scored[:k]]


def test_quota_exact_division():
    mem = ExemplarMemory(20, 3)
    mem.update_after_task(records(0, 10) + records(1, 10), [0, 1])
    mem.update_after_task(records(2, 10) + records(3, 10), [2, 3])
    assert mem.counts() == {0: 5, 1: 5, 2: 5, 3: 5}
    assert len(mem) == 20


def test_quota_remainder_to_lowest_ids():
    mem = ExemplarMemory(10, 3)
    mem.update_after_task(records(5, 6) + records(7, 6) + records(9, 6), [9, 5, 7])
    assert mem.counts() == {5: 4, 7: 3, 9: 3}


def test_fifo_survivors_s6_to_s8():
    mem = ExemplarMemory(8, 3)
    first = records(0, 8)
    mem.update_after_task(first, [0])
    seqs = [r.insertion_seq for r in mem.per_class[0]]
    mem.update_after_task(records(1, 5), [1])
    mem.update_after_task(records(2, 5), [2])
    # quota for class 0 is now 8 // 3 + 1 = 3; the ring keeps its three newest entries
    survivors = [r.insertion_seq for r in mem.per_class[0]]
    assert survivors == seqs[5:8]
    np.testing.assert_array_equal(np.stack([r.features for r in mem.per_class[0]]),
                                  np.stack([r.features for r in first[5:8]]))


def test_fill_keeps_last_samples_in_dataset_order():
    mem = ExemplarMemory(3, 3)
    data = records(4, 7)
    mem.update_after_task(data, [4])
    kept = [r.features for r in mem.per_class[4]]
    np.testing.assert_array_equal(np.stack(kept), np.stack([r.features for r in data[-3:]]))


def test_update_rejects_old_class_and_foreign_label():
    mem = ExemplarMemory(10, 3)
    mem.update_after_task(records(0, 2), [0])
    with pytest.raises(ContractError):
        mem.update_after_task(records(0, 2), [0])
    with pytest.raises(ContractError):
        mem.update_after_task(records(3, 2), [1])
    with pytest.raises(DimensionError):
        mem.update_after_task(records(2, 2, dim=4), [2])


def test_empty_class_warns_without_failing(caplog):
    mem = ExemplarMemory(10, 3)
    with caplog.at_level(logging.WARNING):
        mem.update_after_task(records(0, 4), [0, 1])
    assert "class 1" in caplog.text
    assert mem.counts() == {0: 4, 1: 0}


def test_self_match_is_rank_one():
    mem = ExemplarMemory(10, 3)
    data = records(0, 5)
    mem.update_after_task(data, [0])
    matrix, _ = mem.as_matrix()
    row, sim = mem.knn_query(matrix[2], 1)[0]
    assert row == 2 and sim == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_similarities():
    mem = ExemplarMemory(3, 3)
    mem.update_after_task([FeatureRecord(e, i) for i, e in enumerate(np.eye(3))], [0, 1, 2])
    hits = mem.knn_query(np.array([1.0, 0, 0]), 3)
    assert [r for r, _ in hits] == [0, 1, 2]
    assert [s for _, s in hits] == [1.0, 0.0, 0.0]


def test_k_larger_than_memory_returns_all():
    mem = ExemplarMemory(10, 3)
    mem.update_after_task(records(0, 4), [0])
    assert len(mem.knn_query(np.ones(3), 50)) == 4


def test_exclusion_skips_exact_record():
    mem = ExemplarMemory(10, 3)
    mem.update_after_task(records(0, 4), [0])
    target = mem.records()[1]
    hits = mem.knn_query(target.features, 4, exclude=target.insertion_seq)
    assert 1 not in [r for r, _ in hits]
    assert len(hits) == 3


def test_knn_errors():
    mem = ExemplarMemory(10, 3)
    with pytest.raises(EmptyMemoryError):
        mem.knn_query(np.ones(3), 1)
    mem.update_after_task(records(0, 2), [0])
    with pytest.raises(ValueError):
        mem.knn_query(np.ones(3), 0)
    with pytest.raises(DimensionError):
        mem.knn_query(np.ones(4), 1)


def test_knn_matches_exhaustive_scan_200_records():
    rng = np.random.default_rng(11)
    mem = ExemplarMemory(200, 8)
    mem.update_after_task([FeatureRecord(rng.normal(size=8), i % 10) for i in range(200)], range(10))
    matrix, _ = mem.as_matrix()
    for q in rng.normal(size=(20, 8)):
        got = mem.knn_query(q, 10)
        want = exhaustive_knn(matrix.tolist(), q.tolist(), 10)
        assert [r for r, _ in got] == [r for r, _ in want]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


def test_ties_go_to_lower_row():
    mem = ExemplarMemory(6, 2)
    v = np.array([1.0, 1.0])
    mem.update_after_task([FeatureRecord(v.copy(), 0) for _ in range(3)], [0])
    assert [r for r, _ in mem.knn_query(v, 3)] == [0, 1, 2]


def test_as_matrix_empty_and_single():
    mem = ExemplarMemory(4, 3)
    assert mem.as_matrix()[0].shape == (0, 3)
    mem.update_after_task([FeatureRecord([1.0, 2.0, 3.0], 0)], [0])
    np.testing.assert_array_equal(mem.as_matrix()[0], [[1.0, 2.0, 3.0]])


def test_as_matrix_row_order_and_self_consistency():
    rng = np.random.default_rng(3)
    mem = ExemplarMemory(12, 4)
    mem.update_after_task(records(3, 4, 4, rng) + records(1, 4, 4, rng), [3, 1])
    mem.update_after_task(records(2, 4, 4, rng), [2])
    keys = [(r.label, r.insertion_seq) for r in mem.records()]
    assert keys == sorted(keys)
    matrix, labels = mem.as_matrix()
    again = ExemplarMemory(12, 4)
    again.update_after_task([FeatureRecord(f, int(y)) for f, y in zip(matrix, labels)], sorted(set(labels)))
    q = rng.normal(size=4)
    assert mem.knn_query(q, 5) == again.knn_query(q, 5)


def test_state_round_trip():
    mem = ExemplarMemory(9, 3, metric="euclidean")
    mem.update_after_task(records(0, 5) + records(1, 5), [0, 1])
    back = ExemplarMemory.from_state(mem.to_state())
    assert back.counts() == mem.counts()
    assert back.next_seq == mem.next_seq and back.metric == "euclidean"
    np.testing.assert_array_equal(back.as_matrix()[0], mem.as_matrix()[0])


def test_euclidean_metric_ranks_by_distance():
    mem = ExemplarMemory(3, 1, metric="euclidean")
    mem.update_after_task([FeatureRecord([x], i) for i, x in enumerate([0.0, 5.0, 2.0])], [0, 1, 2])
    assert [r for r, _ in mem.knn_query(np.array([1.9]), 3)] == [2, 0, 1]


@settings(max_examples=60, deadline=None)
@given(budget=st.integers(1, 40),
       task_sizes=st.lists(st.lists(st.integers(0, 12), min_size=1, max_size=4), min_size=1, max_size=8))
def test_budget_balance_and_fifo_invariants(budget, task_sizes):
    mem = ExemplarMemory(budget, 2)
    history: dict[int, list[int]] = {}
    next_class = 0
    for sizes in task_sizes:
        classes = list(range(next_class, next_class + len(sizes)))
        next_class += len(sizes)
        data = [FeatureRecord(np.ones(2), c) for c, n in zip(classes, sizes) for _ in range(n)]
        before = {c: [r.insertion_seq for r in ring] for c, ring in mem.per_class.items()}
        mem.update_after_task(data, classes)
        assert len(mem) <= budget
        quotas = mem.quotas(mem.classes)
        assert max(quotas.values()) - min(quotas.values()) <= 1
        for c, ring in mem.per_class.items():
            seqs = [r.insertion_seq for r in ring]
            assert seqs == sorted(seqs)
            assert len(seqs) <= quotas[c]
            if c in before:
                # survivors are a suffix of the previous ring
                assert seqs == before[c][len(before[c]) - len(seqs):]
        filled = [len(ring) for c, ring in mem.per_class.items()]
        full = [n for c, n in zip(mem.per_class, filled) if n == quotas[c]]
        if len(full) == len(filled):
            assert max(filled) - min(filled) <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 15), st.integers(0, 2**31 - 1))
def test_similarities_non_increasing(n, k, seed):
    rng = np.random.default_rng(seed)
    mem = ExemplarMemory(n, 5)
    mem.update_after_task([FeatureRecord(rng.normal(size=5), 0) for _ in range(n)], [0])
    sims = [s for _, s in mem.knn_query(rng.normal(size=5), k)]
    assert all(a >= b for a, b in zip(sims, sims[1:]))
    assert len(sims) == min(k, n)
