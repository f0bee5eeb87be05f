"""Command-line entry point: ``mtn run | ablate | inspect | validate``.

Exit codes: 0 success, 1 internal error, 2 bad input (config, paths, files).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import data as dio
from .errors import FeatureFileError
from .evaluation import mem_knn_baseline, seen_eval
from .memory import ExemplarMemory
from .model import MODEL_SIZES, ModelSnapshot, restore
from .trainer import METHODS, TrainConfig, batch_context, execute, from_checkpoint, run_incremental

logger = logging.getLogger("mtn")

SWEEPS = ("k", "memory_size", "model_size")


class UserError(Exception):
    """Bad input from the command line; reported without a traceback, exit 2."""


# argument plumbing

def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--key value`` flag per TrainConfig field (method handled separately)."""
    group = p.add_argument_group("training config overrides")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "method":
            continue
        # TrainConfig annotations are strings under postponed evaluation
        kind = {"int": int, "float": float, "str": str, "bool": _parse_bool}[f.type]
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                           metavar=f.name.upper())


def _add_stream_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("task stream")
    group.add_argument("--config", type=Path, help="JSON file with training keys and optional "
                       "'synthetic' or 'data' sections")
    group.add_argument("--synthetic-default", action="store_true", help="use the default synthetic stream")
    group.add_argument("--train", type=Path, help="training feature file")
    group.add_argument("--eval", type=Path, help="evaluation feature file")
    group.add_argument("--num-classes", type=int)
    group.add_argument("--task-size", type=int)
    group.add_argument("--split-seed", type=int)


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UserError(f"config file {path} is not valid JSON: {e}") from None


def resolve(args) -> tuple[TrainConfig, dio.TaskStream, dict]:
    """Merge config file and flags; build the stream.  Returns (config, stream, source description)."""
    file_cfg = _read_json(args.config) if args.config else {}
    synthetic = file_cfg.pop("synthetic", None)
    data = file_cfg.pop("data", None)
    for f in dataclasses.fields(TrainConfig):
        if f.name == "method":
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            file_cfg[f.name] = value
    file_cfg.setdefault("method", "mtn")
    try:
        cfg = TrainConfig.from_dict(file_cfg)
    except (TypeError, ValueError) as e:
        raise UserError(f"invalid config: {e}") from None

    data = dict(data or {})
    for key in ("train", "eval", "num_classes", "task_size", "split_seed"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = str(value) if isinstance(value, Path) else value
    if args.synthetic_default or (synthetic is not None and "train" not in data):
        try:
            spec = dio.SyntheticSpec(**(synthetic or {}))
        except (TypeError, ValueError) as e:
            raise UserError(f"invalid synthetic spec: {e}") from None
        return cfg, dio.generate_synthetic(spec), {"synthetic": dio.synthetic_to_dict(spec)}
    if "train" not in data:
        raise UserError("no data given: pass --train FILE, a config 'data' section, or --synthetic-default")
    for key in ("train", "eval"):
        if key in data and not Path(data[key]).is_file():
            raise UserError(f"data file not found: {data[key]}")
    try:
        stream = dio.load_stream(data["train"], data.get("num_classes"), int(data.get("task_size", 1)),
                                 data.get("eval"), data.get("split_seed"))
    except FeatureFileError as e:
        raise UserError(f"{e} (byte offset {e.offset})") from None
    except ValueError as e:
        raise UserError(str(e)) from None
    return cfg, stream, {"data": data}


def _methods(text: str) -> list[str]:
    names = list(METHODS) if text == "all" else text.split(",")
    bad = [m for m in names if m not in METHODS]
    if bad:
        raise UserError(f"unknown method(s) {bad}; choose from {list(METHODS)} or 'all'")
    return names


# run

def run_one(cfg: TrainConfig, stream: dio.TaskStream, source: dict, out: Path) -> dict:
    """Train/evaluate one method; writes ``<method>.metrics.log``, ``.tasks.csv`` and ``.ckpt``."""
    out.mkdir(parents=True, exist_ok=True)
    stem = out / cfg.method
    if cfg.method == "memknn":
        metrics = run_incremental(stream, cfg)
        events = [("task", {"method": "memknn", "task": t, "classes_seen": n, "top1": a})
                  for t, (a, n) in enumerate(zip(metrics.per_task_top1, metrics.per_task_class_counts), 1)]
    else:
        state = execute(stream, cfg, checkpoint_path=f"{stem}.ckpt")
        metrics, events = state.metrics, state.events
    header = {"train": cfg.to_dict(), "source": source, "stream_hash": metrics.stream_hash,
              "descriptor_hash": metrics.descriptor_hash}
    summary = {"method": cfg.method, "stream_hash": metrics.stream_hash,
               "descriptor_hash": metrics.descriptor_hash, "per_task_top1": metrics.per_task_top1,
               "average_incremental_accuracy": metrics.average_incremental_accuracy}
    dio.write_metrics_log(f"{stem}.metrics.log", header, events, summary)
    dio.write_table(f"{stem}.tasks.csv", ["task", "classes_seen", "top1"],
                    [(t, n, a) for t, (a, n) in enumerate(zip(metrics.per_task_top1,
                                                              metrics.per_task_class_counts), 1)])
    return metrics.to_dict()


def cmd_run(args) -> int:
    cfg, stream, source = resolve(args)
    rows = []
    for method in _methods(args.method or cfg.method):
        result = run_one(cfg.replace(method=method), stream, source, args.out)
        rows.append((method, result["average_incremental_accuracy"], *result["per_task_top1"]))
        print(f"{method:7s} avg_inc_acc={result['average_incremental_accuracy']:.4f} "
              f"per_task={[round(a, 4) for a in result['per_task_top1']]}")
    if len(rows) > 1:
        columns = ["method", "average_incremental_accuracy"] + [f"task{t}" for t in range(1, len(stream.tasks) + 1)]
        dio.write_table(args.out / "comparison.csv", columns, rows)
    return 0


# ablate

def _grid_values(sweep: str, grid: str) -> list:
    items = [g for g in grid.split(",") if g]
    if not items:
        raise UserError("empty grid")
    if sweep == "model_size":
        bad = [g for g in items if g not in MODEL_SIZES]
        if bad:
            raise UserError(f"unknown model size(s) {bad}; choose from {list(MODEL_SIZES)}")
        return items
    try:
        return [int(g) for g in items]
    except ValueError:
        raise UserError(f"grid for {sweep} must be integers, got {grid!r}") from None


def _apply(cfg: TrainConfig, sweep: str, value) -> TrainConfig:
    if sweep == "k":
        return cfg.replace(k=value, knn_baseline_k=max(value, 1))
    if sweep == "memory_size":
        return cfg.replace(memory_budget=value)
    layers, heads, width = MODEL_SIZES[value]
    return cfg.replace(num_layers=layers, num_heads=heads, model_dim=width)


def cmd_ablate(args) -> int:
    cfg, stream, source = resolve(args)
    values = _grid_values(args.sweep, args.grid)
    methods = _methods(args.method or cfg.method)
    try:
        point_cfgs = [_apply(cfg, args.sweep, v) for v in values]
    except ValueError as e:
        raise UserError(str(e)) from None
    rows = []
    for value, point in zip(values, point_cfgs):
        sub = args.out / f"{args.sweep}={value}"
        for method in methods:
            result = run_one(point.replace(method=method), stream, source, sub)
            rows.append((args.sweep, value, method, result["stream_hash"],
                         result["average_incremental_accuracy"], *result["per_task_top1"]))
            print(f"{args.sweep}={value} {method:7s} avg_inc_acc={result['average_incremental_accuracy']:.4f}")
    columns = ["sweep", "value", "method", "stream_hash", "average_incremental_accuracy"]
    columns += [f"task{t}" for t in range(1, len(stream.tasks) + 1)]
    dio.write_table(args.out / "sweep.csv", columns, rows)
    return 0


# inspect

def inspect_lines(ckpt: dio.Checkpoint, stream: dio.TaskStream, index: int, k: int | None = None) -> list[str]:
    state, cfg = from_checkpoint(ckpt)
    if state.metrics.stream_hash != stream.digest():
        raise UserError("the given stream does not match the one the checkpoint was trained on")
    x, y = seen_eval(stream, max(state.tasks_completed, 1))
    if not 0 <= index < len(y):
        raise UserError(f"query index {index} outside 0..{len(y) - 1}")
    model, mem = state.model, state.mem
    k = k or cfg.k or cfg.knn_baseline_k
    q = x[index]
    hits = mem.knn_query(q, k)
    matrix, labels = mem.as_matrix()
    neighbors = [matrix[r] for r, _ in hits]
    adapted = model.adapted_similarities(q, neighbors) if model.uses_neighbors else [float("nan")] * len(hits)
    nb, mask = batch_context(model, mem, q[None, :], model.context_size, None, cfg.metric)
    predicted = int(model.predict(model.logits_batch(q[None, :], nb, mask).data)[0])
    voted = int(mem_knn_baseline(mem, q[None, :], cfg.knn_baseline_k)[0])
    lines = [f"query={index} label={int(y[index])} {model.kind}_prediction={predicted} memknn_prediction={voted}",
             "rank,row,label,raw_similarity,adapted_similarity"]
    for rank, ((row, sim), a) in enumerate(zip(hits, adapted), start=1):
        lines.append(f"{rank},{row},{int(labels[row])},{sim!r},{a!r}")
    return lines


def cmd_inspect(args) -> int:
    if not args.checkpoint.is_file():
        raise UserError(f"checkpoint not found: {args.checkpoint}")
    try:
        ckpt = dio.read_checkpoint(args.checkpoint)
    except FeatureFileError as e:
        raise UserError(f"{args.checkpoint}: {e} (byte offset {e.offset})") from None
    _, stream, _ = resolve(args)
    lines = inspect_lines(ckpt, stream, args.query_index, args.neighbors)
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    sys.stdout.write(text)
    return 0


# validate

def cmd_validate(args) -> int:
    if not args.path.is_file():
        raise UserError(f"feature file not found: {args.path}")
    try:
        dim, records = dio.read_feature_file(args.path, args.dim)
    except FeatureFileError as e:
        raise UserError(f"{args.path}: {e} (byte offset {e.offset})") from None
    counts: dict[int, int] = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    print(f"ok n={len(records)} d={dim} classes={len(counts)}")
    for label in sorted(counts):
        print(f"class {label}: {counts[label]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one or more methods")
    _add_stream_flags(p)
    _add_config_flags(p)
    p.add_argument("--method", help="mtn, linear, memknn, a comma list, or 'all' (default: config, else mtn)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep k, memory size or model size")
    _add_stream_flags(p)
    _add_config_flags(p)
    p.add_argument("--sweep", choices=SWEEPS, required=True)
    p.add_argument("--grid", required=True, help="comma-separated values, e.g. 1,10,100 or small,medium")
    p.add_argument("--method", help="as for run")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="raw vs adapted neighbor similarities for one eval query")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--query-index", type=int, required=True)
    p.add_argument("--neighbors", type=int, help="how many neighbors to list (default: the run's k)")
    p.add_argument("--out", type=Path, help="also write the report here")
    _add_stream_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("validate", help="check a feature file")
    p.add_argument("path", type=Path)
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
