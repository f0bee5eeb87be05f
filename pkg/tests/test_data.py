import struct

import numpy as np
import pytest

from mtn.data import (SyntheticSpec, Checkpoint, generate_synthetic, pack_arrays, read_checkpoint,
                      read_feature_file, read_metrics_log, split_into_tasks, task_sizes,
                      unpack_arrays, write_checkpoint, write_feature_file, write_metrics_log)
from mtn.errors import FeatureFileError
from mtn.evaluation import mem_knn_baseline
from mtn.memory import ExemplarMemory, FeatureRecord


@pytest.mark.parametrize("classes, size, expected", [
    (1000, 100, [500, 100, 100, 100, 100, 100]),
    (8, 2, [4, 2, 2]),
    (10, 4, [5, 4, 1]),
])
def test_task_sizes(classes, size, expected):
    assert task_sizes(classes, size) == expected


@pytest.mark.parametrize("size", [0, -1, 6])
def test_task_size_out_of_range(size):
    with pytest.raises(ValueError):
        task_sizes(10, size)


def test_split_disjoint_and_covering():
    recs = [FeatureRecord(np.zeros(2), c) for c in range(10) for _ in range(3)]
    stream = split_into_tasks(recs, 10, 4, seed=5)
    blocks = stream.task_classes
    assert [len(b) for b in blocks] == [5, 4, 1]
    flat = [c for b in blocks for c in b]
    assert sorted(flat) == list(range(10))
    for t, task in enumerate(stream.tasks, start=1):
        assert all(r.label in task.classes and r.task_id == t for r in task.train)
    assert stream.class_order == [int(c) for c in np.random.default_rng(5).permutation(10)]


def test_split_unseeded_is_ascending():
    recs = [FeatureRecord(np.zeros(2), c) for c in range(8)]
    assert split_into_tasks(recs, 8, 2).task_classes == [[0, 1, 2, 3], [4, 5], [6, 7]]


def test_synthetic_deterministic_and_normalized():
    a, b = generate_synthetic(SyntheticSpec(seed=3)), generate_synthetic(SyntheticSpec(seed=3))
    assert a.digest() == b.digest()
    assert generate_synthetic(SyntheticSpec(seed=4)).digest() != a.digest()
    feats = np.stack([r.features for t in a.tasks for r in t.train])
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)
    assert a.task_classes and [len(c) for c in a.task_classes] == [4, 2, 2]


def test_zero_spread_makes_voting_exact():
    stream = generate_synthetic(SyntheticSpec(spread=0.0, train_per_class=5, eval_per_class=5))
    mem = ExemplarMemory(40, stream.dim)
    for task in stream.tasks:
        mem.update_after_task(task.train, task.classes)
    per_class = {}
    for r in stream.tasks[0].train:
        per_class.setdefault(r.label, []).append(r.features)
    assert all(np.array_equal(v[0], w) for v in per_class.values() for w in v)
    ev = [r for t in stream.tasks for r in t.eval]
    pred = mem_knn_baseline(mem, np.stack([r.features for r in ev]), k=10)
    assert np.mean(pred == [r.label for r in ev]) == 1.0


def test_default_stream_one_nn_oracle():
    stream = generate_synthetic(SyntheticSpec())
    train = [r for t in stream.tasks for r in t.train]
    ev = [r for t in stream.tasks for r in t.eval]
    correct = 0
    for q in ev:
        best, label = -np.inf, None
        for r in train:
            s = float(np.dot(q.features, r.features))
            if s > best:
                best, label = s, r.label
        correct += label == q.label
    # frozen from the brute-force scan above
    assert correct / len(ev) == pytest.approx(0.895, abs=1e-12)


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [FeatureRecord(rng.normal(size=5).astype(np.float32), int(y)) for y in rng.integers(0, 9, 30)]
    write_feature_file(recs, tmp_path / "f.mtnf")
    dim, back = read_feature_file(tmp_path / "f.mtnf")
    assert dim == 5 and len(back) == 30
    for a, b in zip(recs, back):
        assert a.label == b.label
        np.testing.assert_array_equal(a.features, b.features)


def test_empty_feature_file(tmp_path):
    write_feature_file([], tmp_path / "e.mtnf", dim=3)
    assert read_feature_file(tmp_path / "e.mtnf") == (3, [])


def _header(n, d, magic=b"MTNF", version=1):
    return struct.pack("<4sIQI", magic, version, n, d)


def test_truncated_feature_file_offset(tmp_path):
    path = tmp_path / "t.mtnf"
    # header claims 4 rows of dim 2 but only 3 rows of floats follow
    path.write_bytes(_header(4, 2) + np.zeros(6, "<f4").tobytes())
    with pytest.raises(FeatureFileError) as err:
        read_feature_file(path)
    assert err.value.offset == 20 + 6 * 4
    path.write_bytes(_header(4, 2) + np.zeros(8, "<f4").tobytes() + np.zeros(2, "<u4").tobytes())
    with pytest.raises(FeatureFileError, match="label") as err:
        read_feature_file(path)
    assert err.value.offset == 20 + 32 + 8


@pytest.mark.parametrize("blob, offset", [
    (_header(0, 2, magic=b"XXXX"), 0),
    (_header(0, 2, version=9), 4),
    (b"MTN", 3),
])
def test_malformed_headers(tmp_path, blob, offset):
    path = tmp_path / "bad.mtnf"
    path.write_bytes(blob)
    with pytest.raises(FeatureFileError) as err:
        read_feature_file(path)
    assert err.value.offset == offset


def test_dimension_mismatch_and_trailing_bytes(tmp_path):
    path = tmp_path / "d.mtnf"
    write_feature_file([FeatureRecord(np.ones(3), 0)], path)
    with pytest.raises(FeatureFileError) as err:
        read_feature_file(path, expected_dim=4)
    assert err.value.offset == 16
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FeatureFileError, match="trailing"):
        read_feature_file(path)


def test_array_bundle_round_trip():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64), "c": np.float64(3.5)}
    back = unpack_arrays(pack_arrays(arrays))
    for k, v in arrays.items():
        assert back[k].dtype == np.asarray(v).dtype
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_round_trip(tmp_path):
    mem = ExemplarMemory(4, 2)
    mem.update_after_task([FeatureRecord([1.0, 2.0], 0), FeatureRecord([3.0, 4.0], 1)], [0, 1])
    ckpt = Checkpoint(run={"seed": 1, "nested": {"x": [1, 2]}}, model_kind="linear",
                      model_config={"input_dim": 2, "num_classes_capacity": 2},
                      params={"head.weight": np.eye(2) / 3, "head.bias": np.array([0.1, 0.2])},
                      trained_classes=[0, 1], memory=mem.to_state(),
                      optimizer={"learning_rate": 0.1}, velocity={"head.bias": np.array([1e-300, -0.0])},
                      metrics={"metrics": {"per_task_top1": [0.5]}})
    write_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = read_checkpoint(tmp_path / "c.ckpt")
    assert back.run == ckpt.run and back.metrics == ckpt.metrics and back.trained_classes == [0, 1]
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    assert back.velocity["head.bias"].tobytes() == ckpt.velocity["head.bias"].tobytes()
    mem2 = ExemplarMemory.from_state(back.memory)
    assert mem2.as_matrix()[0].tobytes() == mem.as_matrix()[0].tobytes()
    assert not (tmp_path / "c.ckpt.tmp").exists()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE\1\0\0\0")
    with pytest.raises(FeatureFileError):
        read_checkpoint(tmp_path / "x.ckpt")


def test_metrics_log_round_trip(tmp_path):
    path = tmp_path / "m.log"
    write_metrics_log(path, {"seed": 7, "model": {"k": 10}},
                      [("task", {"task": 1, "top1": 0.1 + 0.2})],
                      {"average_incremental_accuracy": 0.3})
    parsed = read_metrics_log(path)
    assert parsed["config"] == {"seed": "7", "model.k": "10"}
    assert parsed["events"] == [("task", {"task": "1", "top1": repr(0.1 + 0.2)})]
    assert float(parsed["summary"]["average_incremental_accuracy"]) == 0.3
    assert path.read_text().startswith("# mtn metrics v1\n")
