"""Memory Transformer Network and the linear reference classifier.

The transformer reads a token sequence ``[q, n_1, ..., n_j]`` made of a query
feature and its retrieved neighbors, refines it with pre-norm self-attention
blocks and hands the output at the query position to a linear head.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .memory import ExemplarMemory
from .numerics import Tensor

MODEL_SIZES = {
    "small": (2, 1, 64),
    "medium": (4, 4, 128),
    "large": (12, 12, 768),
}


@dataclass
class MtnConfig:
    input_dim: int
    num_classes_capacity: int
    model_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_multiplier: int = 4
    k: int = 10
    use_rank_positional_embedding: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.input_dim <= 0 or self.model_dim <= 0 or self.num_classes_capacity <= 0:
            raise ValueError("input_dim, model_dim and num_classes_capacity must be positive")
        if self.num_layers < 0 or self.k < 0:
            raise ValueError("num_layers and k must be non-negative")
        if self.num_heads <= 0 or self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.ffn_multiplier <= 0:
            raise ValueError("ffn_multiplier must be positive")

    @classmethod
    def from_size(cls, size: str, **kwargs) -> MtnConfig:
        layers, heads, width = MODEL_SIZES[size]
        return cls(num_layers=layers, num_heads=heads, model_dim=width, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelSnapshot:
    """Frozen deep copy of a classifier's parameters."""

    kind: str
    config: dict
    arrays: dict[str, np.ndarray]
    trained_classes: list[int] = field(default_factory=list)

    def restore(self):
        return restore(self)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _uniform_bound(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Classifier:
    """Shared plumbing: parameter dict, class bookkeeping, snapshots."""

    kind = ""
    uses_neighbors = True
    context_size = 0

    params: dict[str, Tensor]
    trained_classes: set[int]

    def logits_batch(self, queries, neighbors=None, mask=None) -> Tensor:
        raise NotImplementedError

    @property
    def num_classes(self) -> int:
        raise NotImplementedError

    def mark_trained(self, classes) -> None:
        self.trained_classes.update(int(c) for c in classes)

    def predict(self, logits: np.ndarray) -> np.ndarray:
        """Argmax restricted to classes trained so far."""
        seen = np.array(sorted(self.trained_classes), dtype=np.int64)
        if seen.size == 0:
            raise ValueError("no classes have been trained yet")
        logits = np.atleast_2d(logits)
        return seen[np.argmax(logits[:, seen], axis=1)]

    def snapshot(self) -> ModelSnapshot:
        return ModelSnapshot(
            kind=self.kind,
            config=copy.deepcopy(self.config_dict()),
            arrays={name: p.data.copy() for name, p in self.params.items()},
            trained_classes=sorted(self.trained_classes),
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise KeyError(f"parameter set mismatch: {sorted(set(arrays) ^ set(self.params))}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: stored {arrays[name].shape}, expected {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64, copy=True)
            p.grad = None

    def config_dict(self) -> dict:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class MtnModel(Classifier):
    kind = "mtn"

    def __init__(self, config: MtnConfig, seed: int = 0):
        self.config = config
        self.trained_classes = set()
        rng = np.random.default_rng(seed)
        c = config
        D, F = c.model_dim, c.model_dim * c.ffn_multiplier
        p: dict[str, Tensor] = {}
        # features arrive L2-normalized; this bound gives unit-variance tokens
        p["input.weight"] = _uniform_bound(rng, math.sqrt(3.0), (c.input_dim, D))
        p["input.bias"] = _zeros(D)
        if c.use_rank_positional_embedding:
            p["rank_embedding"] = _uniform(rng, D, (1 + c.k, D))
        for i in range(c.num_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.gain"], p[pre + "ln1.bias"] = _ones(D), _zeros(D)
            for proj in ("query", "key", "value"):
                p[pre + f"attn.{proj}.weight"] = _uniform(rng, D, (D, D))
                p[pre + f"attn.{proj}.bias"] = _zeros(D)
            # residual branches start closed so each block begins as the identity
            p[pre + "attn.out.weight"], p[pre + "attn.out.bias"] = _zeros((D, D)), _zeros(D)
            p[pre + "ln2.gain"], p[pre + "ln2.bias"] = _ones(D), _zeros(D)
            p[pre + "ffn.in.weight"] = _uniform(rng, D, (D, F))
            p[pre + "ffn.in.bias"] = _zeros(F)
            p[pre + "ffn.out.weight"] = _zeros((F, D))
            p[pre + "ffn.out.bias"] = _zeros(D)
        if c.num_layers:
            # unit-norm readout at init keeps SGD steps on the head comparable to a linear probe
            p["final_ln.gain"] = Tensor(np.full(D, 1.0 / math.sqrt(D)), requires_grad=True)
            p["final_ln.bias"] = _zeros(D)
        p["head.weight"] = _uniform(rng, D, (D, c.num_classes_capacity))
        p["head.bias"] = _zeros(c.num_classes_capacity)
        self.params = p

    @property
    def num_classes(self) -> int:
        return self.config.num_classes_capacity

    @property
    def context_size(self) -> int:
        return self.config.k

    def config_dict(self) -> dict:
        return self.config.to_dict()

    # batched graph
    def _attention(self, x: Tensor, pre: str, key_mask: np.ndarray) -> Tensor:
        p, c = self.params, self.config
        B, S, D = x.shape
        H = c.num_heads
        Dh = D // H

        def heads(name):
            t = x @ p[pre + f"attn.{name}.weight"] + p[pre + f"attn.{name}.bias"]
            return t.reshape(B, S, H, Dh).transpose(0, 2, 1, 3)

        q, k, v = heads("query"), heads("key"), heads("value")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(Dh))
        attn = nx.softmax(scores, mask=key_mask[:, None, None, :])
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
        return out @ p[pre + "attn.out.weight"] + p[pre + "attn.out.bias"]

    def encode(self, queries, neighbors=None, mask=None) -> Tensor:
        """Run the stack over [query, neighbors...]; returns (B, 1 + j, model_dim).

        ``neighbors`` is (B, j, d) and ``mask`` (B, j) flags the real neighbor
        slots; padded slots are never attended to.
        """
        c, p = self.config, self.params
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        B = queries.shape[0]
        if queries.shape[1] != c.input_dim:
            raise DimensionError(f"query token has dim {queries.shape[1]}, expected {c.input_dim}")
        if neighbors is None:
            neighbors = np.zeros((B, 0, c.input_dim))
        neighbors = np.asarray(neighbors, dtype=np.float64)
        if neighbors.ndim != 3 or neighbors.shape[0] != B or neighbors.shape[2] != c.input_dim:
            raise DimensionError(f"neighbor tokens have shape {neighbors.shape}, expected ({B}, j, {c.input_dim})")
        j = neighbors.shape[1]
        if mask is None:
            mask = np.ones((B, j), dtype=bool)
        key_mask = np.concatenate([np.ones((B, 1), dtype=bool), np.asarray(mask, dtype=bool)], axis=1)
        tokens = np.concatenate([queries[:, None, :], np.where(key_mask[:, 1:, None], neighbors, 0.0)], axis=1)

        x = Tensor(tokens) @ p["input.weight"] + p["input.bias"]
        if c.use_rank_positional_embedding:
            if j + 1 > p["rank_embedding"].shape[0]:
                raise DimensionError(f"{j} neighbors exceed the rank embedding table built for k={c.k}")
            x = x + p["rank_embedding"][: j + 1]
        for i in range(c.num_layers):
            pre = f"layers.{i}."
            h = nx.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"], c.layer_norm_eps)
            x = x + self._attention(h, pre, key_mask)
            h = nx.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"], c.layer_norm_eps)
            h = nx.gelu(h @ p[pre + "ffn.in.weight"] + p[pre + "ffn.in.bias"])
            x = x + (h @ p[pre + "ffn.out.weight"] + p[pre + "ffn.out.bias"])
        if c.num_layers:
            x = nx.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"], c.layer_norm_eps)
        return x

    def adapt_batch(self, queries, neighbors=None, mask=None) -> Tensor:
        return self.encode(queries, neighbors, mask)[:, 0, :]

    def logits_batch(self, queries, neighbors=None, mask=None) -> Tensor:
        adapted = self.adapt_batch(queries, neighbors, mask)
        return adapted @ self.params["head.weight"] + self.params["head.bias"]

    # single-query conveniences
    def _neighbors_array(self, neighbors: Sequence) -> np.ndarray:
        d = self.config.input_dim
        rows = []
        for i, n in enumerate(neighbors):
            n = np.asarray(n, dtype=np.float64)
            if n.shape != (d,):
                raise DimensionError(f"neighbor token {i} has shape {n.shape}, expected ({d},)")
            rows.append(n)
        return np.array(rows).reshape(1, len(rows), d)

    def adapt(self, q, neighbors: Sequence = ()) -> np.ndarray:
        """Adapted query feature (length model_dim) given ranked neighbor features."""
        return self.adapt_batch(np.asarray(q)[None, :], self._neighbors_array(neighbors)).data[0]

    def forward(self, q, mem: ExemplarMemory | None, k: int | None = None,
                exclude: int | None = None) -> np.ndarray:
        """Logits for one query, with its context fetched from ``mem``.

        ``mem=None`` runs the query with an empty neighbor list.
        """
        k = self.config.k if k is None else k
        neighbors: list = []
        if mem is not None and k > 0:
            matrix, _ = mem.as_matrix()
            neighbors = [matrix[row] for row, _ in mem.knn_query(q, k, exclude)]
        return self.logits_batch(np.asarray(q)[None, :], self._neighbors_array(neighbors)).data[0]

    def adapted_similarities(self, q, neighbors: Sequence) -> list[float]:
        """Cosine similarity between the adapted query token and each adapted neighbor token."""
        if len(neighbors) == 0:
            return []
        out = self.encode(np.asarray(q)[None, :], self._neighbors_array(neighbors)).data[0]
        query, rest = out[0], out[1:]
        denom = np.maximum(np.linalg.norm(rest, axis=1) * np.linalg.norm(query), 1e-12)
        return [float(s) for s in np.clip(rest @ query / denom, -1.0, 1.0)]


@dataclass
class LinearConfig:
    input_dim: int
    num_classes_capacity: int

    def to_dict(self) -> dict:
        return asdict(self)


class LinearClassifier(Classifier):
    """Single affine map on the raw query feature; never looks at neighbors."""

    kind = "linear"
    uses_neighbors = False

    def __init__(self, config: LinearConfig, seed: int = 0):
        self.config = config
        self.trained_classes = set()
        rng = np.random.default_rng(seed)
        self.params = {
            "head.weight": _uniform(rng, config.input_dim, (config.input_dim, config.num_classes_capacity)),
            "head.bias": _zeros(config.num_classes_capacity),
        }

    @property
    def num_classes(self) -> int:
        return self.config.num_classes_capacity

    def config_dict(self) -> dict:
        return self.config.to_dict()

    def logits_batch(self, queries, neighbors=None, mask=None) -> Tensor:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.config.input_dim:
            raise DimensionError(f"query has dim {queries.shape[1]}, expected {self.config.input_dim}")
        return Tensor(queries) @ self.params["head.weight"] + self.params["head.bias"]


def build_classifier(kind: str, config: dict, seed: int = 0) -> Classifier:
    if kind == "mtn":
        return MtnModel(MtnConfig(**config), seed=seed)
    if kind == "linear":
        return LinearClassifier(LinearConfig(**config), seed=seed)
    raise ValueError(f"unknown classifier kind {kind!r}")


def restore(snap: ModelSnapshot) -> Classifier:
    model = build_classifier(snap.kind, snap.config)
    model.load_arrays(snap.arrays)
    model.trained_classes = set(snap.trained_classes)
    return model
