"""Exemplar memory with class-balanced ring-buffer retention and exact kNN."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptyMemoryError

logger = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")


@dataclass(eq=False)
class FeatureRecord:
    features: np.ndarray
    label: int
    task_id: int = 0
    insertion_seq: int = -1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.label = int(self.label)
        self.task_id = int(self.task_id)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def rowwise_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` where equal rows of ``b`` always give bit-equal columns.

    BLAS kernels may sum different rows in different orders, which turns exact
    ties into 1-ulp differences and breaks the lower-row tie rule.
    """
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, (1 << 22) // max(1, b.size))
    for start in range(0, a.shape[0], step):
        out[start:start + step] = (a[start:start + step, None, :] * b[None, :, :]).sum(axis=-1)
    return out


def similarity_matrix(queries: np.ndarray, keys: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Pairwise similarity, larger is closer.  Euclidean uses negated squared distance."""
    if metric == "cosine":
        return rowwise_dot(l2_normalize(queries), l2_normalize(keys))
    if metric == "euclidean":
        sq = (queries ** 2).sum(1)[:, None] + (keys ** 2).sum(1)[None, :] - 2.0 * rowwise_dot(queries, keys)
        return -np.maximum(sq, 0.0)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def nearest_rows(sims: np.ndarray, k: int, exclude: np.ndarray | None = None):
    """Top-``k`` columns per row of ``sims``, ties going to the lower column.

    ``exclude`` holds one column per row to skip (-1 for none).  Returns
    ``(indices, similarities)`` of shape (B, min(k, n)); slots left empty by an
    exclusion carry index -1 and similarity -inf.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    sims = np.array(sims, dtype=np.float64, copy=True)
    n = sims.shape[1]
    kk = min(k, n)
    if exclude is not None:
        rows = np.nonzero(exclude >= 0)[0]
        sims[rows, exclude[rows]] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
    top = np.take_along_axis(sims, order, axis=1)
    order = np.where(np.isneginf(top), -1, order)
    return order, top


class ExemplarMemory:
    """Memory of at most ``budget`` feature vectors, kept per class in FIFO rings."""

    def __init__(self, budget: int, dim: int, metric: str = "cosine"):
        if budget <= 0:
            raise ValueError("memory budget must be positive")
        if dim <= 0:
            raise ValueError("feature dimension must be positive")
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        self.budget = int(budget)
        self.dim = int(dim)
        self.metric = metric
        self.per_class: dict[int, deque[FeatureRecord]] = {}
        self.next_seq = 0
        self._cache: tuple[np.ndarray, np.ndarray, list[FeatureRecord]] | None = None

    def __len__(self) -> int:
        return sum(len(ring) for ring in self.per_class.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def counts(self) -> dict[int, int]:
        return {c: len(self.per_class[c]) for c in self.classes}

    def quotas(self, classes: Iterable[int]) -> dict[int, int]:
        """floor(M / n) per class; the M mod n spare slots go to the lowest ids."""
        classes = sorted(classes)
        if not classes:
            return {}
        base, spare = divmod(self.budget, len(classes))
        return {c: base + (1 if i < spare else 0) for i, c in enumerate(classes)}

    def update_after_task(self, new_task_data: Sequence[FeatureRecord],
                          new_classes: Iterable[int]) -> ExemplarMemory:
        new_classes = sorted({int(c) for c in new_classes})
        clash = set(new_classes) & set(self.per_class)
        if clash:
            raise ContractError(f"classes already in memory: {sorted(clash)}")
        allowed = set(new_classes)
        by_class: dict[int, list[FeatureRecord]] = {c: [] for c in new_classes}
        for rec in new_task_data:
            if rec.label not in allowed:
                raise ContractError(f"record label {rec.label} is not among the new classes {new_classes}")
            if rec.features.shape != (self.dim,):
                raise DimensionError(f"record has shape {rec.features.shape}, memory dim is {self.dim}")
            by_class[rec.label].append(rec)

        quota = self.quotas(list(self.per_class) + new_classes)
        for c, ring in self.per_class.items():
            while len(ring) > quota[c]:
                ring.popleft()
        for c in new_classes:
            samples = by_class[c]
            if not samples:
                logger.warning("class %d arrived with no samples; its memory ring stays empty", c)
            keep = samples[max(0, len(samples) - quota[c]):] if quota[c] else []
            ring = self.per_class[c] = deque()
            for rec in keep:
                ring.append(FeatureRecord(rec.features.copy(), rec.label, rec.task_id, self.next_seq))
                self.next_seq += 1
        self._cache = None
        return self

    def _materialize(self):
        if self._cache is None:
            records = [rec for c in self.classes for rec in self.per_class[c]]
            if records:
                matrix = np.stack([r.features for r in records])
            else:
                matrix = np.zeros((0, self.dim))
            labels = np.array([r.label for r in records], dtype=np.int64)
            self._cache = (matrix, labels, records)
        return self._cache

    def as_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored features as an (M', d) matrix in (class id, insertion order) row order."""
        matrix, labels, _ = self._materialize()
        return matrix.copy(), labels.copy()

    def records(self) -> list[FeatureRecord]:
        return list(self._materialize()[2])

    def row_of(self, insertion_seq: int) -> int:
        for i, rec in enumerate(self._materialize()[2]):
            if rec.insertion_seq == insertion_seq:
                return i
        raise KeyError(f"no stored record with insertion_seq {insertion_seq}")

    def knn_batch(self, queries: np.ndarray, k: int, exclude_seq=None):
        """Vectorized neighbor search; see :func:`nearest_rows` for the output layout."""
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        matrix, _, records = self._materialize()
        if not records:
            raise EmptyMemoryError("exemplar memory is empty")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise DimensionError(f"query has dim {queries.shape[1]}, memory dim is {self.dim}")
        exclude = None
        if exclude_seq is not None:
            seq_to_row = {r.insertion_seq: i for i, r in enumerate(records)}
            exclude = np.array([seq_to_row.get(int(s), -1) if s is not None and s >= 0 else -1
                                for s in exclude_seq], dtype=np.int64)
        sims = similarity_matrix(queries, matrix, self.metric)
        return nearest_rows(sims, k, exclude)

    def knn_query(self, q, k: int, exclude: int | None = None) -> list[tuple[int, float]]:
        """The ``k`` most similar stored records as (row, similarity), best first.

        Rows index into :meth:`as_matrix`.  ``exclude`` is the insertion_seq of
        a stored record to skip.
        """
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionError(f"query has shape {q.shape}, memory dim is {self.dim}")
        idx, sims = self.knn_batch(q[None, :], k, None if exclude is None else [exclude])
        return [(int(i), float(s)) for i, s in zip(idx[0], sims[0]) if i >= 0]

    def neighbor_features(self, rows: np.ndarray) -> np.ndarray:
        """Gather features for an index array from :meth:`knn_batch`; -1 rows become zeros."""
        matrix = self._materialize()[0]
        out = np.zeros(rows.shape + (self.dim,))
        valid = rows >= 0
        out[valid] = matrix[rows[valid]]
        return out

    def sample(self, rng: np.random.Generator, size: int) -> list[FeatureRecord]:
        """Uniform draw without replacement (clamped to the memory size)."""
        records = self._materialize()[2]
        size = min(size, len(records))
        picks = rng.choice(len(records), size=size, replace=False)
        return [records[i] for i in picks]

    # snapshot support for checkpoints
    def to_state(self) -> dict:
        matrix, labels, records = self._materialize()
        return {
            "budget": self.budget,
            "dim": self.dim,
            "metric": self.metric,
            "next_seq": self.next_seq,
            "classes": self.classes,
            "features": matrix,
            "labels": labels,
            "task_ids": np.array([r.task_id for r in records], dtype=np.int64),
            "seqs": np.array([r.insertion_seq for r in records], dtype=np.int64),
        }

    @classmethod
    def from_state(cls, state: dict) -> ExemplarMemory:
        mem = cls(state["budget"], state["dim"], state["metric"])
        mem.next_seq = int(state["next_seq"])
        for c in state["classes"]:
            mem.per_class[int(c)] = deque()
        for feats, label, task, seq in zip(state["features"], state["labels"],
                                           state["task_ids"], state["seqs"]):
            mem.per_class[int(label)].append(FeatureRecord(np.array(feats), int(label), int(task), int(seq)))
        return mem
