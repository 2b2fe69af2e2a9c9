import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cloud_dataset
from pcpipe.distributed import (
    ShardSpec,
    ToyModel,
    allreduce_exact,
    allreduce_mean,
    shard_index,
    simulate_data_parallel,
    to_exact,
)
from pcpipe.errors import NotPadded, ShapeMismatch, WorkerPanic
from pcpipe.index import IndexTable, MetadataEntry, TaskType, pad_for_shards


def fake_index(n):
    entries = tuple(MetadataEntry(TaskType.kCommonTask, 0, 0, (0, 0), {"row": i, "sample_id": i, "field_lengths": []})
                    for i in range(n))
    return IndexTable(tuple(e.task for e in entries), entries, n)


def test_shard_12_by_4():
    idx = fake_index(12)
    shards = [shard_index(idx, ShardSpec(4, d)) for d in range(4)]
    assert [len(s) for s in shards] == [3, 3, 3, 3]
    assert [e.sample_id for e in shards[1]] == [1, 5, 9]


def test_shard_identity_and_not_padded():
    idx = fake_index(7)
    assert shard_index(idx, ShardSpec(1, 0)) == idx
    with pytest.raises(NotPadded):
        shard_index(fake_index(10), ShardSpec(4, 0))


def test_shard_spec_bounds():
    with pytest.raises(ValueError):
        ShardSpec(4, 4)
    with pytest.raises(ValueError):
        ShardSpec(0, 0)


def test_ten_samples_four_shards():
    padded = pad_for_shards(fake_index(10), 4)
    shards = [shard_index(padded, ShardSpec(4, d)) for d in range(4)]
    assert [len(s) for s in shards] == [3, 3, 3, 3]
    padded_tasks = [t for s in shards for t in s.task_list if t is TaskType.kPaddedTask]
    assert len(padded_tasks) == 2
    assert sum(s.total_real_samples for s in shards) == 10


@given(n=st.integers(1, 80), k=st.integers(1, 9))
def test_shard_partition(n, k):
    padded = pad_for_shards(fake_index(n), k)
    shards = [shard_index(padded, ShardSpec(k, d)) for d in range(k)]
    assert len({len(s) for s in shards}) == 1
    positions = sorted(i for d in range(k) for i in range(d, len(padded), k))
    assert positions == list(range(len(padded)))  # disjoint and covering
    real = sorted(e.sample_id for s in shards for e, t in zip(s, s.task_list) if t is TaskType.kCommonTask)
    assert real == list(range(n))


def test_allreduce_mean_examples():
    assert allreduce_mean([[2.0], [4.0]]).tolist() == [3.0]
    v = np.array([1.5, -2.0])
    np.testing.assert_array_equal(allreduce_mean([v]), v)
    with pytest.raises(ShapeMismatch):
        allreduce_mean([[1.0], [1.0, 2.0]])
    with pytest.raises(ShapeMismatch):
        allreduce_mean([])


def test_allreduce_mean_fixed_order():
    vs = list(np.random.default_rng(3).normal(size=(8, 16)) * 1e3)
    acc = vs[0]
    for v in vs[1:]:
        acc = acc + v
    assert allreduce_mean(vs).tobytes() == (acc / 8).tobytes()


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=8))
def test_exact_encoding_round_trips(xs):
    ints = to_exact(xs)
    back = allreduce_exact([ints], 1)
    assert back.tolist() == [float(x) for x in xs]


def test_exact_reduce_is_split_invariant():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(12, 4)) * 10.0 ** rng.integers(-8, 8, size=(12, 1))
    whole = allreduce_exact([[sum(c) for c in zip(*[to_exact(r) for r in g])]], 12)
    for parts in (2, 3, 4, 6):
        partials = [[sum(c) for c in zip(*[to_exact(r) for r in g[p::parts]])] for p in range(parts)]
        assert allreduce_exact(partials, 12).tobytes() == whole.tobytes()


@pytest.fixture
def padded10(tmp_path):
    headers, index, reader = cloud_dataset(tmp_path, 10)
    return pad_for_shards(index, 4), reader


def test_zero_lr_keeps_params(padded10):
    index, reader = padded10
    m = ToyModel.initial(1, learning_rate=0.0)
    rep = simulate_data_parallel(pad_for_shards(index, 2), reader, 2, 1, m, 4)
    for p in rep.params:
        assert p.tobytes() == m.params.tobytes()


def test_four_devices_match_one(padded10):
    index, reader = padded10
    m = ToyModel.initial(0, learning_rate=0.05)
    one = simulate_data_parallel(index, reader, 1, 3, m, 4, maps=["normalize", "jitter", "rotate"])
    four = simulate_data_parallel(index, reader, 4, 3, m, 4, maps=["normalize", "jitter", "rotate"])
    assert one.steps == four.steps == 9
    assert four.final_params.tobytes() == one.final_params.tobytes()
    assert not np.array_equal(four.final_params, m.params)
    assert all(d == 0 for d in four.replica_max_diff) and len(four.replica_max_diff) == 9
    assert one.params_hash() == four.params_hash()


def test_report_json(padded10):
    index, reader = padded10
    rep = simulate_data_parallel(index, reader, 2, 1, ToyModel.initial(), 4)
    doc = rep.to_json()
    assert doc["replicas_identical"] and len(doc["step_times_s"]) == 3 and len(doc["device_wall_s"]) == 2


def test_bad_global_batch(padded10):
    index, reader = padded10
    with pytest.raises(ValueError):
        simulate_data_parallel(index, reader, 4, 1, ToyModel.initial(), 6)


def test_device_failure_propagates(padded10):
    index, reader = padded10

    def loader(entry, epoch, position):
        raise OSError("boom")
    with pytest.raises(WorkerPanic):
        simulate_data_parallel(index, reader, 4, 1, ToyModel.initial(), 4, loader=loader)
