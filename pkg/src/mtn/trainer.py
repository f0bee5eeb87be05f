"""Incremental rehearsal training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data as dio
from .evaluation import RunMetrics, seen_eval, top1_accuracy
from .losses import TaskPartition, total_loss
from .memory import ExemplarMemory, FeatureRecord, nearest_rows, similarity_matrix
from .model import (Classifier, LinearClassifier, LinearConfig, ModelSnapshot, MtnConfig, MtnModel,
                    restore)
from .numerics import OptimizerState, sgd_step

logger = logging.getLogger(__name__)

METHODS = ("mtn", "linear", "memknn")
# where training queries of task t >= 2 find neighbors: the memory frozen at the
# start of the task, or that memory plus the current batch's new-task samples
CONTEXTS = ("memory", "memory+batch")
EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    method: str = "mtn"
    epochs_per_task: int = 10
    batch_new: int = 128
    batch_replay: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    k: int = 10
    memory_budget: int = 2000
    seed: int = 0
    distill_temperature: float = 1.0
    metric: str = "cosine"
    knn_baseline_k: int = 10
    model_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_multiplier: int = 4
    rank_embedding: bool = False
    context: str = "memory"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("epochs_per_task", "batch_new", "batch_replay", "memory_budget", "knn_baseline_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be positive")
        if self.context not in CONTEXTS:
            raise ValueError(f"context must be one of {CONTEXTS}, got {self.context!r}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.momentum, self.weight_decay)


def build_model(cfg: TrainConfig, dim: int, num_classes: int, seed: int) -> Classifier:
    if cfg.method == "linear":
        return LinearClassifier(LinearConfig(dim, num_classes), seed=seed)
    mcfg = MtnConfig(input_dim=dim, num_classes_capacity=num_classes, model_dim=cfg.model_dim,
                     num_layers=cfg.num_layers, num_heads=cfg.num_heads,
                     ffn_multiplier=cfg.ffn_multiplier, k=cfg.k,
                     use_rank_positional_embedding=cfg.rank_embedding)
    return MtnModel(mcfg, seed=seed)


def in_batch_context(feats: np.ndarray, k: int, metric: str = "cosine"):
    """Neighbors of each row among the other rows of the same batch."""
    idx, _ = nearest_rows(similarity_matrix(feats, feats, metric), k, np.arange(len(feats)))
    mask = idx >= 0
    return np.where(mask[..., None], feats[np.maximum(idx, 0)], 0.0), mask


def memory_context(mem: ExemplarMemory, feats: np.ndarray, k: int, exclude_seq=None):
    idx, _ = mem.knn_batch(feats, k, exclude_seq)
    return mem.neighbor_features(idx), idx >= 0


def mixed_context(mem: ExemplarMemory, feats: np.ndarray, k: int, exclude_seq, fresh: np.ndarray,
                  metric: str = "cosine"):
    """Neighbors drawn from the memory plus the batch rows flagged ``fresh``.

    Each row skips itself and, for replayed exemplars, its own stored record.
    """
    matrix, _ = mem.as_matrix()
    pool_rows = np.nonzero(fresh)[0]
    pool = np.concatenate([matrix, feats[pool_rows]])
    sims = similarity_matrix(feats, pool, metric)
    self_col = np.full(len(feats), -1, dtype=np.int64)
    self_col[pool_rows] = len(matrix) + np.arange(len(pool_rows))
    if exclude_seq is not None:
        seq_to_row = {r.insertion_seq: i for i, r in enumerate(mem.records())}
        for i, seq in enumerate(exclude_seq):
            if seq >= 0:
                self_col[i] = seq_to_row.get(int(seq), -1)
    idx, _ = nearest_rows(sims, k, self_col)
    mask = idx >= 0
    return np.where(mask[..., None], pool[np.maximum(idx, 0)], 0.0), mask


def batch_context(model: Classifier, mem: ExemplarMemory, feats: np.ndarray, k: int,
                  exclude_seq=None, metric: str = "cosine", fresh: np.ndarray | None = None):
    """(neighbors, mask) for a batch, or (None, None) when no context is used.

    An empty memory falls back to in-batch neighbors with self-exclusion.
    """
    if not model.uses_neighbors or k == 0:
        return None, None
    if len(mem) == 0:
        return in_batch_context(feats, k, metric)
    if fresh is not None and fresh.any():
        return mixed_context(mem, feats, k, exclude_seq, fresh, metric)
    return memory_context(mem, feats, k, exclude_seq)


def replay_count(chunk: int, cfg: TrainConfig) -> int:
    if chunk >= cfg.batch_new:
        return cfg.batch_replay
    return max(1, math.ceil(chunk * cfg.batch_replay / cfg.batch_new))


@dataclass
class TaskLog:
    batch_losses: list[float]
    epoch_losses: list[float]


def train_task(model: Classifier, mem: ExemplarMemory, snapshot: Classifier | None,
               task_data: Sequence[FeatureRecord], part: TaskPartition, cfg: TrainConfig,
               opt: OptimizerState, rng: np.random.Generator) -> TaskLog:
    """Optimize ``model`` on one task; ``mem`` is read but never mutated here."""
    if not task_data:
        raise ValueError("task has no training data")
    if (snapshot is None) != (part.current == 1):
        raise ValueError("a snapshot is required exactly when training task 2 or later")
    current = set(part.current_classes)
    for r in task_data:
        if r.label not in current:
            raise ValueError(f"training label {r.label} is not in the current task {sorted(current)}")
    model.mark_trained(part.current_classes)
    k = model.context_size
    feats = np.stack([r.features for r in task_data])
    labels = np.array([r.label for r in task_data], dtype=np.int64)
    replaying = part.current > 1 and len(mem) > 0
    log = TaskLog([], [])
    for epoch in range(cfg.epochs_per_task):
        order = rng.permutation(len(task_data))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_new):
            chunk = order[start:start + cfg.batch_new]
            x, y = feats[chunk], labels[chunk]
            exclude = np.full(len(chunk), -1, dtype=np.int64)
            fresh = np.ones(len(chunk), dtype=bool)
            if replaying:
                replay = mem.sample(rng, replay_count(len(chunk), cfg))
                x = np.concatenate([x, np.stack([r.features for r in replay])])
                y = np.concatenate([y, [r.label for r in replay]])
                exclude = np.concatenate([exclude, [r.insertion_seq for r in replay]])
                fresh = np.concatenate([fresh, np.zeros(len(replay), dtype=bool)])
            neighbors, mask = batch_context(model, mem, x, k, exclude, cfg.metric,
                                            fresh if cfg.context == "memory+batch" else None)
            z = model.logits_batch(x, neighbors, mask)
            z_prev = snapshot.logits_batch(x, neighbors, mask).data if snapshot is not None else None
            loss = total_loss(z, z_prev, y, part, cfg.distill_temperature)
            loss.backward()
            sgd_step(model.params, opt)
            log.batch_losses.append(loss.item())
            epoch_losses.append(loss.item())
        log.epoch_losses.append(float(np.mean(epoch_losses)))
    return log


def predict(model: Classifier, mem: ExemplarMemory, feats: np.ndarray, metric: str = "cosine") -> np.ndarray:
    k = model.context_size
    out = []
    for start in range(0, len(feats), EVAL_CHUNK):
        x = feats[start:start + EVAL_CHUNK]
        neighbors, mask = batch_context(model, mem, x, k, None, metric)
        out.append(model.predict(model.logits_batch(x, neighbors, mask).data))
    return np.concatenate(out)


@dataclass
class RunState:
    """Mutable state of an incremental run, checkpointable at task boundaries."""

    model: Classifier
    mem: ExemplarMemory
    opt: OptimizerState
    rng: np.random.Generator
    metrics: RunMetrics
    events: list
    tasks_completed: int = 0


def _seeds(seed: int) -> tuple[int, np.random.Generator]:
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    return int(init_seq.generate_state(1)[0]), np.random.default_rng(train_seq)


def start_run(stream: dio.TaskStream, cfg: TrainConfig) -> RunState:
    init_seed, rng = _seeds(cfg.seed)
    stream_hash = stream.digest()
    metrics = RunMetrics(method=cfg.method, stream_hash=stream_hash,
                         descriptor_hash=dio.descriptor_hash(stream_hash, cfg.to_dict()))
    return RunState(
        model=build_model(cfg, stream.dim, stream.num_classes, init_seed),
        mem=ExemplarMemory(cfg.memory_budget, stream.dim, cfg.metric),
        opt=cfg.optimizer(),
        rng=rng,
        metrics=metrics,
        events=[],
    )


def to_checkpoint(state: RunState, cfg: TrainConfig) -> dio.Checkpoint:
    snap = state.model.snapshot()
    opt = state.opt
    return dio.Checkpoint(
        run={"config": cfg.to_dict(), "tasks_completed": state.tasks_completed,
             "rng_state": state.rng.bit_generator.state},
        model_kind=snap.kind,
        model_config=snap.config,
        params=snap.arrays,
        trained_classes=snap.trained_classes,
        memory=state.mem.to_state(),
        optimizer={"learning_rate": opt.learning_rate, "momentum": opt.momentum,
                   "weight_decay": opt.weight_decay},
        velocity={name: v.copy() for name, v in opt.velocity.items()},
        metrics={"metrics": state.metrics.to_dict(), "events": state.events},
    )


def from_checkpoint(ckpt: dio.Checkpoint) -> tuple[RunState, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt.run["config"])
    model = restore(ModelSnapshot(ckpt.model_kind, ckpt.model_config, ckpt.params, ckpt.trained_classes))
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.run["rng_state"]
    opt = OptimizerState(**ckpt.optimizer)
    opt.velocity = {name: v.copy() for name, v in ckpt.velocity.items()}
    state = RunState(
        model=model,
        mem=ExemplarMemory.from_state(ckpt.memory),
        opt=opt,
        rng=rng,
        metrics=RunMetrics.from_dict(ckpt.metrics["metrics"]),
        events=[tuple(e) for e in ckpt.metrics["events"]],
        tasks_completed=int(ckpt.run["tasks_completed"]),
    )
    return state, cfg


def run_incremental(stream: dio.TaskStream, cfg: TrainConfig, **kwargs) -> RunMetrics:
    """Train and evaluate over every task of ``stream``; see :func:`execute`."""
    if cfg.method == "memknn":
        from .evaluation import memknn_baseline_run

        return memknn_baseline_run(stream, cfg)
    return execute(stream, cfg, **kwargs).metrics


def execute(stream: dio.TaskStream, cfg: TrainConfig, checkpoint_path=None,
            resume: dio.Checkpoint | None = None, stop_after: int | None = None) -> RunState:
    """Run the task loop for a trainable classifier and return the final state.

    After each task the memory is updated, all seen classes are evaluated with
    the updated memory as context, and (if ``checkpoint_path`` is given) a
    checkpoint is written.  ``stop_after`` ends the run early after that many
    tasks, which together with ``resume`` supports interrupted runs.
    """
    if cfg.method == "memknn":
        raise ValueError("the memknn baseline has no trainable state; use run_incremental")
    if resume is not None:
        state, saved_cfg = from_checkpoint(resume)
        if saved_cfg != cfg:
            raise ValueError("checkpoint was written with a different configuration")
        if state.metrics.stream_hash != stream.digest():
            raise ValueError("checkpoint was written for a different task stream")
    else:
        state = start_run(stream, cfg)
    state.metrics.stream_hash = stream.digest()
    seen_blocks = stream.task_classes
    for t in range(state.tasks_completed + 1, len(stream.tasks) + 1):
        task = stream.tasks[t - 1]
        part = TaskPartition(seen_blocks[:t], t)
        snapshot = restore(state.model.snapshot()) if t > 1 else None
        log = train_task(state.model, state.mem, snapshot, task.train, part, cfg, state.opt, state.rng)
        for epoch, loss in enumerate(log.epoch_losses, start=1):
            state.events.append(("epoch", {"method": cfg.method, "task": t, "epoch": epoch, "loss": loss}))
        state.mem.update_after_task(task.train, task.classes)
        x, y = seen_eval(stream, t)
        acc = top1_accuracy(predict(state.model, state.mem, x, cfg.metric), y)
        seen = sum(len(b) for b in seen_blocks[:t])
        state.metrics.record(acc, seen)
        state.events.append(("task", {"method": cfg.method, "task": t, "classes_seen": seen, "top1": acc}))
        logger.info("%s task %d/%d: top1=%.4f over %d classes", cfg.method, t, len(stream.tasks), acc, seen)
        state.tasks_completed = t
        if checkpoint_path is not None:
            dio.write_checkpoint(to_checkpoint(state, cfg), checkpoint_path)
        if stop_after is not None and t >= stop_after:
            break
    return state
