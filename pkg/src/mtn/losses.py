"""Separated-softmax classification loss and task-wise distillation.

Logits are restricted to a block of class columns by gathering those columns,
so gradients never leak into the partition a sample does not belong to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class TaskPartition:
    """Class blocks C^1..C^T and the index (1-based) of the task being trained."""

    task_classes: list[list[int]]
    current: int

    def __post_init__(self):
        self.task_classes = [sorted(int(c) for c in block) for block in self.task_classes]
        if not 1 <= self.current <= len(self.task_classes):
            raise ValueError(f"current task {self.current} outside 1..{len(self.task_classes)}")
        seen: set[int] = set()
        for block in self.task_classes:
            if seen & set(block):
                raise ValueError(f"task class sets overlap on {sorted(seen & set(block))}")
            seen |= set(block)

    @property
    def current_classes(self) -> list[int]:
        return self.task_classes[self.current - 1]

    @property
    def old_classes(self) -> list[int]:
        return [c for block in self.task_classes[: self.current - 1] for c in block]

    @property
    def seen_classes(self) -> list[int]:
        return self.old_classes + self.current_classes

    @property
    def previous_tasks(self) -> list[list[int]]:
        return self.task_classes[: self.current - 1]


def _as_logits(z) -> Tensor:
    z = nx.as_tensor(z)
    return z.reshape(1, -1) if z.ndim == 1 else z


def _restricted_nll(z: Tensor, rows: np.ndarray, cols: list[int], targets: np.ndarray) -> Tensor:
    """Summed -log softmax(z[rows, cols])[target]; equals KL(one-hot || softmax)."""
    block = z[np.ix_(rows, np.asarray(cols))]
    logp = nx.log_softmax(block, axis=-1)
    position = {c: i for i, c in enumerate(cols)}
    picks = np.array([position[int(y)] for y in targets], dtype=np.int64)
    return -logp[np.arange(len(rows)), picks].sum()


def separated_softmax_loss(z, y, part: TaskPartition) -> Tensor:
    """Mean separated-softmax loss over a batch.

    ``z`` is (B, C) or (C,), ``y`` the matching class id(s).  Samples of the
    current task are scored against the current block only, older samples
    against the union of earlier blocks only.
    """
    z = _as_logits(z)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    current, old = set(part.current_classes), set(part.old_classes)
    unknown = [int(c) for c in y if c not in current and c not in old]
    if unknown:
        raise ValueError(f"labels {sorted(set(unknown))} are not among the seen classes")
    is_current = np.array([c in current for c in y])
    total = nx.Tensor(0.0)
    for mask, cols in ((is_current, part.current_classes), (~is_current, part.old_classes)):
        rows = np.nonzero(mask)[0]
        if rows.size:
            total = total + _restricted_nll(z, rows, cols, y[rows])
    return total * (1.0 / len(y))


def task_distillation_loss(z, z_prev, part: TaskPartition, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of the summed per-task KL(previous model || live model)."""
    z = _as_logits(z)
    if part.current == 1:
        return nx.Tensor(0.0)
    prev = np.atleast_2d(z_prev.data if isinstance(z_prev, Tensor) else np.asarray(z_prev, dtype=np.float64))
    if prev.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} live logit rows but {prev.shape[0]} snapshot rows")
    scale = 1.0 / temperature
    total = nx.Tensor(0.0)
    for block in part.previous_tasks:
        cols = np.asarray(block)
        # identical arithmetic on both sides so equal logits cancel exactly
        log_target = nx.log_softmax(nx.Tensor(prev[:, cols]) * scale).data
        log_live = nx.log_softmax(z[:, cols] * scale)
        total = total + ((nx.Tensor(log_target) - log_live) * np.exp(log_target)).sum()
    return total * (1.0 / z.shape[0])


def total_loss(z, z_prev, y, part: TaskPartition, temperature: float = 1.0) -> Tensor:
    loss = separated_softmax_loss(z, y, part)
    if part.current > 1:
        loss = loss + task_distillation_loss(z, z_prev, part, temperature)
    return loss
