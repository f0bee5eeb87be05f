"""Accuracy bookkeeping and the two reference baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TaskStream
from .memory import ExemplarMemory


@dataclass
class RunMetrics:
    per_task_top1: list[float] = field(default_factory=list)
    per_task_class_counts: list[int] = field(default_factory=list)
    method: str = ""
    stream_hash: str = ""
    descriptor_hash: str = ""

    @property
    def average_incremental_accuracy(self) -> float:
        if not self.per_task_top1:
            return float("nan")
        return float(np.mean(self.per_task_top1))

    def record(self, accuracy: float, num_classes: int) -> None:
        self.per_task_top1.append(float(accuracy))
        self.per_task_class_counts.append(int(num_classes))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "stream_hash": self.stream_hash,
            "descriptor_hash": self.descriptor_hash,
            "per_task_top1": list(self.per_task_top1),
            "per_task_class_counts": list(self.per_task_class_counts),
            "average_incremental_accuracy": self.average_incremental_accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunMetrics:
        return cls(list(d["per_task_top1"]), list(d["per_task_class_counts"]),
                   d.get("method", ""), d.get("stream_hash", ""), d.get("descriptor_hash", ""))


def top1_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(predictions == labels))


def vote(labels: Sequence[int]) -> int:
    """Majority label of a ranked neighbor list; ties go to the label seen first."""
    counts: dict[int, int] = {}
    first: dict[int, int] = {}
    for rank, y in enumerate(labels):
        counts[y] = counts.get(y, 0) + 1
        first.setdefault(y, rank)
    return min(counts, key=lambda y: (-counts[y], first[y]))


def mem_knn_baseline(mem: ExemplarMemory, queries, k: int = 10) -> np.ndarray:
    """Majority vote among each query's ``k`` nearest exemplars."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    _, labels = mem.as_matrix()
    rows, _ = mem.knn_batch(queries, k)
    return np.array([vote([int(labels[r]) for r in row if r >= 0]) for row in rows], dtype=np.int64)


def seen_eval(stream: TaskStream, upto: int):
    """Eval features and labels of tasks 1..upto."""
    records = [r for task in stream.tasks[:upto] for r in task.eval]
    if not records:
        raise ValueError(f"no eval records for tasks 1..{upto}")
    return np.stack([r.features for r in records]), np.array([r.label for r in records], dtype=np.int64)


def memknn_baseline_run(stream: TaskStream, cfg) -> RunMetrics:
    """Same task protocol and memory updates as training runs, but predictions by voting."""
    from .data import descriptor_hash

    mem = ExemplarMemory(cfg.memory_budget, stream.dim, cfg.metric)
    stream_hash = stream.digest()
    metrics = RunMetrics(method="memknn", stream_hash=stream_hash,
                         descriptor_hash=descriptor_hash(stream_hash, cfg.to_dict()))
    seen = 0
    for t, task in enumerate(stream.tasks, start=1):
        mem.update_after_task(task.train, task.classes)
        seen += len(task.classes)
        x, y = seen_eval(stream, t)
        metrics.record(top1_accuracy(mem_knn_baseline(mem, x, cfg.knn_baseline_k), y), seen)
    return metrics


def linear_baseline_run(stream: TaskStream, cfg, **kwargs) -> RunMetrics:
    """Training protocol of :func:`mtn.trainer.run_incremental` with a linear head on raw features."""
    from .trainer import run_incremental

    return run_incremental(stream, cfg.replace(method="linear"), **kwargs)
