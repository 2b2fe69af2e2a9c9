import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import MODELNET_SCHEMA, cloud_sample
from pcpipe.errors import OutOfRange, SchemaConflict
from pcpipe.index import IndexTable, MetadataEntry, TaskType, build_index, locate, pad_for_shards, strip_padding
from pcpipe.record import DatasetReader, Schema, iter_samples, open_dataset, sample_equal, write_dataset
from pcpipe.record.schema import conform


def _fake_index(n):
    entries = tuple(MetadataEntry(TaskType.kCommonTask, 0, i // 4, (0, 0), {"row": i % 4, "sample_id": i,
                                                                           "field_lengths": []})
                    for i in range(n))
    return IndexTable(tuple(e.task for e in entries), entries, n)


def test_single_header_ten_samples(tmp_path):
    headers = write_dataset([cloud_sample(i, 4) for i in range(10)], MODELNET_SCHEMA, out_dir=tmp_path)
    index = build_index(headers)
    assert len(index) == 10 and index.total_real_samples == 10
    assert [e.sample_id for e in index] == list(range(10))
    assert all(t is TaskType.kCommonTask for t in index.task_list)


def test_two_slices_entry_4(tmp_path):
    # write_dataset balances slices, so assemble a 4 + 2 pair by hand
    from dataclasses import replace
    a = write_dataset([cloud_sample(i, 4) for i in range(4)], MODELNET_SCHEMA, out_dir=tmp_path / "a")[0]
    b = write_dataset([cloud_sample(i, 4) for i in range(4, 6)], MODELNET_SCHEMA, out_dir=tmp_path / "b")[0]
    b = replace(b, slice_id=1, slice_paths=("dataset.pcrecord", "dataset.pcrecord"))
    index = build_index([b, a])
    assert len(index) == 6
    expected = [(0, 0)] * 4 + [(1, 0)] * 2
    assert [(e.shard_id, e.group_id) for e in index] == expected
    assert (index[4].shard_id, index[4].group_id) == (1, 0)


def test_schema_conflict(tmp_path):
    a = write_dataset([cloud_sample(0, 4)], MODELNET_SCHEMA, out_dir=tmp_path / "a")[0]
    other = Schema.of({"data": ("bytes", [3]), "label": "int64"})
    b = write_dataset([{"data": b"", "label": 1}], other, out_dir=tmp_path / "b")[0]
    from dataclasses import replace
    with pytest.raises(SchemaConflict):
        build_index([a, replace(b, slice_id=1)])


def test_locate_bounds(modelnet_dir):
    ds, samples = modelnet_dir
    index = build_index(open_dataset(ds))
    assert locate(index, 0) is index.sample_meta_list[0]
    with pytest.raises(OutOfRange):
        locate(index, len(index))
    with pytest.raises(OutOfRange):
        locate(index, -1)


def test_locate_matches_sequential_scan(modelnet_dir):
    ds, samples = modelnet_dir
    headers = open_dataset(ds)
    index = build_index(headers)
    reader = DatasetReader(headers, cache_groups=0)
    sequential = list(iter_samples(ds))
    for i in range(len(index)):
        got = reader.read_sample(locate(index, i))
        assert sample_equal(got, sequential[i])
        assert sample_equal(got, conform(MODELNET_SCHEMA, samples[i]))


def test_build_touches_no_pages(modelnet_dir, monkeypatch):
    ds, _ = modelnet_dir
    headers = open_dataset(ds)
    import pcpipe.record.dataset as dataset_mod
    calls = []
    monkeypatch.setattr(dataset_mod, "decode_page", lambda *a, **k: calls.append(a))
    build_index(headers)
    assert calls == []


def test_pad_10_by_4():
    # ceil(10 / 4) * 4 = 12
    padded = pad_for_shards(_fake_index(10), 4)
    assert len(padded) == 12
    assert [t.name for t in padded.task_list[10:]] == ["kPaddedTask"] * 2
    assert padded.total_real_samples == 10
    assert [e.sample_id for e in padded.sample_meta_list[10:]] == [8, 9]


def test_pad_noop_cases():
    idx = _fake_index(8)
    assert pad_for_shards(idx, 4) == idx
    assert pad_for_shards(_fake_index(7), 1) == _fake_index(7)


@given(n=st.integers(1, 60), shards=st.integers(1, 16))
def test_pad_properties(n, shards):
    idx = _fake_index(n)
    padded = pad_for_shards(idx, shards)
    assert len(padded) % shards == 0
    assert len(padded) - n < shards
    assert padded.total_real_samples == n
    assert strip_padding(padded) == idx
    assert all(p.sample_id < n for p in padded)
