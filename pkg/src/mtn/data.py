"""Task streams, synthetic data and on-disk formats.

Feature file (little-endian)::

    magic "MTNF" | version u32 | n u64 | d u32 | n*d float32 row-major | n uint32 labels

Checkpoint file::

    magic "MTNC" | version u32 | sections...
    section = tag (4 ASCII bytes) | payload length u64 | payload
    payload = meta length u64 | meta JSON | array bundle

Array bundle: count u32, then per array: name length u16, name, dtype code
u8 (0 float64, 1 int64), ndim u8, ndim * u64 shape, raw bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, FeatureFileError
from .memory import FeatureRecord, l2_normalize

FEATURE_MAGIC = b"MTNF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQI")

CHECKPOINT_MAGIC = b"MTNC"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_CODES = {"f": 0, "i": 1}


@dataclass
class Task:
    classes: list[int]
    train: list[FeatureRecord]
    eval: list[FeatureRecord]


@dataclass
class TaskStream:
    dim: int
    tasks: list[Task]
    class_order: list[int] = field(default_factory=list)
    split_seed: int | None = None

    @property
    def task_classes(self) -> list[list[int]]:
        return [list(t.classes) for t in self.tasks]

    @property
    def num_classes(self) -> int:
        return sum(len(t.classes) for t in self.tasks)

    def digest(self) -> str:
        """SHA-256 over the stream's structure and every feature/label byte."""
        h = hashlib.sha256()
        h.update(struct.pack("<IQ", self.dim, len(self.tasks)))
        h.update(json.dumps([self.class_order, self.split_seed]).encode())
        for task in self.tasks:
            h.update(json.dumps(task.classes).encode())
            for split in (task.train, task.eval):
                h.update(struct.pack("<Q", len(split)))
                if split:
                    h.update(np.stack([r.features for r in split]).astype("<f8").tobytes())
                    h.update(np.array([r.label for r in split], dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    dim: int = 32
    train_per_class: int = 100
    eval_per_class: int = 50
    spread: float = 0.27
    separation: float = 1.0
    modes_per_class: int = 1
    task_size: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "dim", "train_per_class", "eval_per_class", "modes_per_class", "task_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.spread < 0 or self.separation <= 0:
            raise ValueError("spread must be non-negative and separation positive")


# task splitting

def task_sizes(num_classes: int, task_size: int) -> list[int]:
    """Half the classes in the base task, then blocks of ``task_size`` (last may be short)."""
    base = num_classes // 2
    rest = num_classes - base
    if task_size <= 0 or task_size > rest:
        raise ValueError(f"task size {task_size} must lie in 1..{rest} for {num_classes} classes")
    sizes = [base]
    while rest > 0:
        sizes.append(min(task_size, rest))
        rest -= task_size
    return sizes


def split_into_tasks(train: Sequence[FeatureRecord], num_classes: int, task_size: int,
                     eval: Sequence[FeatureRecord] = (), seed: int | None = None,
                     dim: int | None = None) -> TaskStream:
    """Assign classes 0..C-1 to tasks in (optionally seeded-shuffled) order."""
    sizes = task_sizes(num_classes, task_size)
    order = list(range(num_classes))
    if seed is not None:
        order = [int(c) for c in np.random.default_rng(seed).permutation(num_classes)]
    if dim is None:
        dim = len(train[0].features) if train else 0
    tasks, start = [], 0
    owner = {}
    for t, size in enumerate(sizes, start=1):
        block = sorted(order[start:start + size])
        start += size
        owner.update({c: t for c in block})
        tasks.append(Task(block, [], []))
    for records, attr in ((train, "train"), (eval, "eval")):
        for r in records:
            if r.label not in owner:
                raise ValueError(f"label {r.label} outside 0..{num_classes - 1}")
            if len(r.features) != dim:
                raise DimensionError(f"record of dim {len(r.features)} in a stream of dim {dim}")
            t = owner[r.label]
            getattr(tasks[t - 1], attr).append(FeatureRecord(r.features, r.label, t, r.insertion_seq))
    return TaskStream(dim, tasks, order, seed)


def generate_synthetic(spec: SyntheticSpec) -> TaskStream:
    """Gaussian clusters around seeded random class means, L2-normalized.

    Class means are random directions scaled to ``separation``; each class
    may own several such modes, which samples are spread over round-robin.
    """
    rng = np.random.default_rng(spec.seed)
    C, d, m = spec.num_classes, spec.dim, spec.modes_per_class
    means = spec.separation * l2_normalize(rng.normal(size=(C, m, d)))

    def draw(count):
        records = []
        for c in range(C):
            centers = means[c, np.arange(count) % m]
            x = l2_normalize(centers + spec.spread * rng.normal(size=(count, d)))
            records.extend(FeatureRecord(row, c) for row in x)
        return records

    train = draw(spec.train_per_class)
    evaluation = draw(spec.eval_per_class)
    return split_into_tasks(train, C, spec.task_size, evaluation, seed=spec.seed, dim=d)


# feature files

def write_feature_file(records: Sequence[FeatureRecord], path, dim: int | None = None) -> None:
    n = len(records)
    if dim is None:
        if not records:
            raise ValueError("dim is required when writing an empty record list")
        dim = len(records[0].features)
    feats = np.zeros((n, dim), dtype="<f4")
    for i, r in enumerate(records):
        if len(r.features) != dim:
            raise DimensionError(f"record {i} has dim {len(r.features)}, expected {dim}")
        feats[i] = r.features
    labels = np.array([r.label for r in records], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, dim))
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())


def read_feature_file(path, expected_dim: int | None = None) -> tuple[int, list[FeatureRecord]]:
    """Returns ``(dim, records)``; features are widened to float64."""
    buf = Path(path).read_bytes()
    size = _FEATURE_HEADER.size
    if len(buf) < size:
        raise FeatureFileError(f"file is {len(buf)} bytes, shorter than the {size}-byte header", len(buf))
    magic, version, n, d = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported version {version}", 4)
    if d == 0:
        raise FeatureFileError("feature dimension is zero", 16)
    if expected_dim is not None and d != expected_dim:
        raise FeatureFileError(f"dimension {d} does not match expected {expected_dim}", 16)
    feat_end = size + n * d * 4
    end = feat_end + n * 4
    if len(buf) < feat_end:
        raise FeatureFileError(f"truncated feature payload: {n}x{d} floats need {feat_end} bytes", len(buf))
    if len(buf) < end:
        raise FeatureFileError(f"truncated label payload: file needs {end} bytes", len(buf))
    if len(buf) > end:
        raise FeatureFileError(f"{len(buf) - end} trailing bytes after payload", end)
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=size).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=feat_end)
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats.reshape(-1)))[0, 0])
        raise FeatureFileError("non-finite feature value", size + 4 * bad)
    return d, [FeatureRecord(f, int(y)) for f, y in zip(feats, labels)]


def load_stream(train_path, num_classes: int | None, task_size: int, eval_path=None,
                seed: int | None = None) -> TaskStream:
    dim, train = read_feature_file(train_path)
    evaluation: list[FeatureRecord] = []
    if eval_path is not None:
        _, evaluation = read_feature_file(eval_path, expected_dim=dim)
    if num_classes is None:
        num_classes = 1 + max(r.label for r in train)
    return split_into_tasks(train, num_classes, task_size, evaluation, seed=seed, dim=dim)


# array bundles and checkpoints

def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.kind if arr.dtype.kind != "u" else "i")
        if code is None:
            raise TypeError(f"cannot store array {name} of dtype {arr.dtype}")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes, base: int = 0):
        self.buf, self.pos, self.base = buf, 0, base

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.buf):
            raise FeatureFileError(f"truncated while reading {what}", self.base + len(self.buf))
        chunk = self.buf[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def unpack_arrays(buf: bytes, base: int = 0) -> dict[str, np.ndarray]:
    r = _Reader(buf, base)
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "array name length")
        name = r.take(nlen, "array name").decode()
        code, ndim = r.unpack("<BB", f"header of {name}")
        if code not in _DTYPES:
            raise FeatureFileError(f"unknown dtype code {code} for {name}", base + r.pos - 2)
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        arrays[name] = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype=_DTYPES[code]).reshape(shape).copy()
    return arrays


def _section(tag: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    payload = struct.pack("<Q", len(meta_raw)) + meta_raw + pack_arrays(arrays)
    return tag + struct.pack("<Q", len(payload)) + payload


@dataclass
class Checkpoint:
    """Everything needed to resume a run at a task boundary."""

    run: dict
    model_kind: str
    model_config: dict
    params: dict[str, np.ndarray]
    trained_classes: list[int]
    memory: dict
    optimizer: dict
    velocity: dict[str, np.ndarray]
    metrics: dict


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    mem = dict(ckpt.memory)
    mem_arrays = {k: mem.pop(k) for k in ("features", "labels", "task_ids", "seqs")}
    sections = [
        _section(b"CONF", {"run": ckpt.run, "model_kind": ckpt.model_kind,
                           "model_config": ckpt.model_config, "trained_classes": ckpt.trained_classes}, {}),
        _section(b"PARM", {}, ckpt.params),
        _section(b"MEMO", mem, mem_arrays),
        _section(b"OPTM", ckpt.optimizer, ckpt.velocity),
        _section(b"METR", ckpt.metrics, {}),
    ]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        for s in sections:
            fh.write(s)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FeatureFileError("file shorter than the checkpoint header", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FeatureFileError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FeatureFileError(f"unsupported checkpoint version {version}", 4)
    pos, sections = 8, {}
    while pos < len(buf):
        if pos + 12 > len(buf):
            raise FeatureFileError("truncated section header", len(buf))
        tag = buf[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", buf, pos + 4)
        start = pos + 12
        if start + length > len(buf):
            raise FeatureFileError(f"section {tag!r} declares {length} bytes past end of file", len(buf))
        payload = buf[start:start + length]
        if len(payload) < 8:
            raise FeatureFileError(f"section {tag!r} too short", start)
        (mlen,) = struct.unpack_from("<Q", payload, 0)
        if 8 + mlen > len(payload):
            raise FeatureFileError(f"section {tag!r} metadata overruns payload", start + len(payload))
        meta = json.loads(payload[8:8 + mlen])
        arrays = unpack_arrays(payload[8 + mlen:], base=start + 8 + mlen)
        sections[tag] = (meta, arrays)
        pos = start + length
    missing = [t for t in (b"CONF", b"PARM", b"MEMO", b"OPTM", b"METR") if t not in sections]
    if missing:
        raise FeatureFileError(f"missing sections {missing}", len(buf))
    conf = sections[b"CONF"][0]
    memory = dict(sections[b"MEMO"][0])
    memory.update(sections[b"MEMO"][1])
    return Checkpoint(
        run=conf["run"],
        model_kind=conf["model_kind"],
        model_config=conf["model_config"],
        params=sections[b"PARM"][1],
        trained_classes=conf["trained_classes"],
        memory=memory,
        optimizer=sections[b"OPTM"][0],
        velocity=sections[b"OPTM"][1],
        metrics=sections[b"METR"][0],
    )


# metrics logs

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def format_line(kind: str, **fields) -> str:
    return " ".join([kind] + [f"{k}={_fmt(v)}" for k, v in fields.items()])


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def write_metrics_log(path, header: dict, events: Iterable[tuple[str, dict]], summary: dict) -> None:
    lines = ["# mtn metrics v1", format_line("config", **flatten(header))]
    lines += [format_line(kind, **fields) for kind, fields in events]
    lines.append("[summary]")
    lines += [f"{k}={_fmt(v)}" for k, v in summary.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_log(path) -> dict:
    """Parse a metrics log back into ``{"config", "events", "summary"}``."""
    config, events, summary = {}, [], {}
    in_summary = False
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if line == "[summary]":
            in_summary = True
            continue
        if in_summary:
            key, _, value = line.partition("=")
            summary[key] = value
            continue
        kind, *pairs = line.split(" ")
        fields = dict(p.split("=", 1) for p in pairs)
        if kind == "config":
            config = fields
        else:
            events.append((kind, fields))
    return {"config": config, "events": events, "summary": summary}


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def descriptor_hash(stream_hash: str, config: dict) -> str:
    blob = json.dumps({"stream": stream_hash, "config": config}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def synthetic_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
