import os
import zlib
from dataclasses import replace

import lz4.block
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MODELNET_SCHEMA, cloud_sample, random_sample, random_schema
from pcpipe.errors import (
    BadAlignment,
    BadMagic,
    BadShape,
    ChecksumMismatch,
    ColumnOutOfRange,
    CorruptHeader,
    CorruptPage,
    DuplicateField,
    EmptyDataset,
    EmptySchema,
    RangeOutOfBounds,
    SchemaMismatch,
)
from pcpipe.index import build_index, locate
from pcpipe.record import (
    ColumnSpec,
    DatasetReader,
    EncodedPage,
    FieldType,
    Schema,
    decode_block_page,
    encode_block_page,
    iter_samples,
    open_dataset,
    read_header,
    read_sample,
    sample_equal,
    validate_schema,
    write_dataset,
    xor_delta_decode,
    xor_delta_encode,
)
from pcpipe.record.pages import STORED_RAW, tensor_columns


# -- schema -----------------------------------------------------------------

def test_modelnet_schema_is_valid():
    validate_schema(MODELNET_SCHEMA)


def test_empty_schema():
    with pytest.raises(EmptySchema):
        validate_schema(Schema.of({}))


def test_duplicate_field():
    with pytest.raises(DuplicateField):
        validate_schema(Schema.of([("x", "float32"), ("x", "int32")]))


@pytest.mark.parametrize("ft", [FieldType("int32", (0,)), FieldType("string", (2,)), FieldType("complex", ())])
def test_bad_shape(ft):
    with pytest.raises(BadShape):
        validate_schema(Schema((("x", ft),)))


def test_schema_json_roundtrip():
    assert Schema.from_json(MODELNET_SCHEMA.to_json()) == MODELNET_SCHEMA
    user_form = {"data": {"type": "bytes", "shape": [3]}, "normal": {"type": "bytes", "shape": [3]},
                 "label": {"type": "int32", "shape": []}}
    assert Schema.from_json(user_form) == MODELNET_SCHEMA


# -- xor delta --------------------------------------------------------------

def test_xor_single_element_unchanged():
    col = (0x3F800000).to_bytes(4, "little")
    assert xor_delta_encode(col, 4) == col


def test_xor_equal_neighbours():
    p = (0x40490FDB).to_bytes(4, "little")
    assert xor_delta_encode(p + p, 4) == p + bytes(4)


def test_xor_decode_zero_delta_repeats():
    p = (0x40490FDB).to_bytes(4, "little")
    assert xor_delta_decode(p + bytes(4), 4) == p + p


def test_xor_empty():
    assert xor_delta_decode(b"", 4) == b""
    assert xor_delta_encode(b"", 8) == b""


def test_xor_alignment():
    with pytest.raises(BadAlignment):
        xor_delta_encode(b"abcde", 4)
    with pytest.raises(BadAlignment):
        xor_delta_decode(b"abcd", 2)


def test_xor_monotone_column_compresses_no_worse():
    col = np.linspace(1.0, 2.0, 100, dtype=np.float32).tobytes()
    raw_size = len(lz4.block.compress(col, store_size=False))
    enc_size = len(lz4.block.compress(xor_delta_encode(col, 4), store_size=False))
    assert enc_size <= raw_size


def test_xor_random_roundtrip_1k():
    col = np.random.default_rng(3).normal(size=256).astype(np.float32).tobytes()
    assert len(col) == 1024
    assert xor_delta_decode(xor_delta_encode(col, 4), 4) == col


def _decode_by_recurrence(encoded: bytes, width: int) -> bytes:
    """Reference decoder: out[i] = enc[i] ^ out[i-1], element by element."""
    out = []
    prev = 0
    for i in range(0, len(encoded), width):
        prev = int.from_bytes(encoded[i:i + width], "little") ^ prev
        out.append(prev.to_bytes(width, "little"))
    return b"".join(out)


@settings(max_examples=200, deadline=None)
@given(width=st.sampled_from([4, 8]), data=st.binary(max_size=256))
def test_xor_matches_recurrence(width, data):
    data = data[: len(data) - len(data) % width]
    enc = xor_delta_encode(data, width)
    assert len(enc) == len(data)
    assert _decode_by_recurrence(enc, width) == data
    assert xor_delta_decode(enc, width) == data


# -- block pages ------------------------------------------------------------

def test_zero_page_compresses_small():
    page = encode_block_page(bytes(4096))
    assert page.outer_lz4
    assert len(page.payload) < 64
    assert decode_block_page(page) == bytes(4096)


def test_random_page_stored_raw():
    raw = os.urandom(4096)
    # LZ4 must expand this input for the fallback to be exercised
    assert len(lz4.block.compress(raw, store_size=False)) >= len(raw)
    page = encode_block_page(raw)
    assert page.stored_raw and not page.outer_lz4
    assert len(page.payload) == len(raw)
    assert decode_block_page(page) == raw


def test_empty_page():
    page = encode_block_page(b"")
    assert decode_block_page(page) == b""


def test_page_checksum_mismatch():
    raw = np.arange(1000, dtype=np.float32).tobytes()
    page = encode_block_page(raw, tensor_columns(0, len(raw), 1))
    flipped = bytearray(page.payload)
    flipped[5] ^= 0x10
    with pytest.raises(ChecksumMismatch):
        decode_block_page(replace(page, payload=bytes(flipped)), tensor_columns(0, len(raw), 1))


def test_page_truncated():
    raw = np.arange(1000, dtype=np.float32).tobytes()
    page = encode_block_page(raw)
    with pytest.raises(CorruptPage):
        EncodedPage.from_bytes(page.to_bytes()[:-3])
    short = page.payload[:-3]
    with pytest.raises(CorruptPage):
        decode_block_page(replace(page, payload=short, checksum=zlib.crc32(short)))
    raw_page = encode_block_page(os.urandom(100))
    with pytest.raises(CorruptPage):
        decode_block_page(replace(raw_page, payload=raw_page.payload[:50],
                                  checksum=zlib.crc32(raw_page.payload[:50])))


def test_column_out_of_range():
    with pytest.raises(ColumnOutOfRange):
        encode_block_page(bytes(16), [ColumnSpec(8, 12, 4, 2)])


@settings(max_examples=150, deadline=None)
@given(data=st.binary(max_size=600), width=st.sampled_from([4, 8]), start=st.integers(0, 64),
       rows=st.integers(0, 20), row_width=st.integers(1, 4))
def test_page_roundtrip_any_flags(data, width, start, rows, row_width):
    stride = row_width * width
    need = start + rows * stride
    raw = data + bytes(max(0, need - len(data)))
    cols = tensor_columns(start, rows * stride, row_width, width)
    page = encode_block_page(raw, cols)
    assert bool(page.flags & STORED_RAW) != page.outer_lz4
    assert decode_block_page(EncodedPage.from_bytes(page.to_bytes()), cols) == raw


# -- dataset files ----------------------------------------------------------

def test_placement_10_samples_2_slices_group_4(tmp_path):
    samples = [cloud_sample(i, 8) for i in range(10)]
    headers = write_dataset(samples, MODELNET_SCHEMA, slice_count=2, group_size=4, out_dir=tmp_path)
    assert [[g.sample_count for g in h.group_index] for h in headers] == [[4, 1], [4, 1]]
    index = build_index(headers)
    e = locate(index, 7)
    assert (e.shard_id, e.group_id) == (1, 0)
    assert sorted(os.listdir(tmp_path)) == ["dataset.pcrecord", "dataset.pcrecord1"]


def test_empty_dataset(tmp_path):
    with pytest.raises(EmptyDataset):
        write_dataset([], MODELNET_SCHEMA, out_dir=tmp_path)


def test_single_sample(tmp_path):
    s = cloud_sample(0, 16)
    (h,) = write_dataset([s], MODELNET_SCHEMA, out_dir=tmp_path)
    assert len(h.group_index) == 1 and h.group_index[0].sample_count == 1
    entry = build_index([h]).sample_meta_list[0]
    assert sample_equal(read_sample(h, entry), s)


def test_schema_mismatch(tmp_path):
    with pytest.raises(SchemaMismatch):
        write_dataset([{"data": b"", "label": 1}], MODELNET_SCHEMA, out_dir=tmp_path)
    with pytest.raises(SchemaMismatch):
        write_dataset([{"data": b"abc", "normal": b"", "label": 1}], MODELNET_SCHEMA, out_dir=tmp_path)


def test_header_roundtrip_and_size(modelnet_dir):
    ds, _ = modelnet_dir
    headers = open_dataset(ds)
    for h in headers:
        assert read_header(h.path) == h
    on_disk = sum(os.path.getsize(ds / n) for n in headers[0].slice_paths)
    assert all(h.total_size_bytes == on_disk for h in headers)


def test_write_returns_what_read_sees(tmp_path):
    samples = [cloud_sample(i, 8) for i in range(9)]
    written = write_dataset(samples, MODELNET_SCHEMA, slice_count=3, group_size=2, out_dir=tmp_path)
    assert written == open_dataset(tmp_path)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.pcrecord"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(BadMagic):
        read_header(p)


def test_truncated_header(modelnet_dir, tmp_path):
    ds, _ = modelnet_dir
    data = (ds / "dataset.pcrecord").read_bytes()
    for cut in (10, 30, 200):
        p = tmp_path / f"cut{cut}.pcrecord"
        p.write_bytes(data[:cut])
        with pytest.raises(CorruptHeader):
            read_header(p)


def test_random_order_reads(modelnet_dir):
    ds, samples = modelnet_dir
    headers = open_dataset(ds)
    index = build_index(headers)
    reader = DatasetReader(headers)
    order = np.random.default_rng(0).permutation(len(index))
    for i in order:
        assert sample_equal(reader.read_sample(locate(index, int(i))), samples[i])


def test_blob_end_out_of_range(modelnet_dir):
    ds, _ = modelnet_dir
    headers = open_dataset(ds)
    e = build_index(headers).sample_meta_list[0]
    bad = replace(e, sample_meta=(0, 10**9))
    with pytest.raises(RangeOutOfBounds):
        DatasetReader(headers).read_sample(bad)


def test_corrupted_page_detected(modelnet_dir):
    ds, _ = modelnet_dir
    headers = open_dataset(ds)
    h = headers[0]
    g = h.group_index[0]
    path = h.path
    data = bytearray(path.read_bytes())
    data[h.data_offset + g.block_page[0] + g.block_page[1] - 1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatch):
        DatasetReader(headers).read_sample(build_index(headers).sample_meta_list[0])


def test_locality_one_page_pair_per_read(modelnet_dir):
    ds, _ = modelnet_dir
    headers = open_dataset(ds)
    index = build_index(headers)
    reader = DatasetReader(headers, cache_groups=0)
    for i in (0, 13, 39):
        before = (reader.stats.scalar_decodes, reader.stats.block_decodes)
        reader.read_sample(locate(index, i))
        after = (reader.stats.scalar_decodes, reader.stats.block_decodes)
        assert after[0] - before[0] <= 1 and after[1] - before[1] <= 1


@pytest.mark.parametrize("seed", range(25))
def test_roundtrip_random_schemas(tmp_path, seed):
    rng = np.random.default_rng(seed)
    schema = random_schema(rng)
    samples = [random_sample(rng, schema) for _ in range(int(rng.integers(1, 30)))]
    slices = int(rng.integers(1, 5))
    group = int(rng.integers(1, 12))
    write_dataset(samples, schema, slice_count=slices, group_size=group, out_dir=tmp_path)
    got = list(iter_samples(tmp_path))
    assert len(got) == len(samples)
    for a, b in zip(got, samples):
        from pcpipe.record import conform
        assert sample_equal(a, conform(schema, b))


def test_xyz_column_coding_flag_set(modelnet_dir):
    ds, _ = modelnet_dir
    from pcpipe.record.dataset import DatasetReader as R  # noqa: F401
    h = open_dataset(ds)[0]
    g = h.group_index[0]
    with open(h.path, "rb") as fh:
        fh.seek(h.data_offset + g.block_page[0])
        page = EncodedPage.from_bytes(fh.read(g.block_page[1]))
    assert page.inner_delta


@pytest.mark.parametrize("seed", range(30))
def test_batched_column_coding_matches_one_at_a_time(seed):
    from pcpipe.record.pages import ColumnSpec, _apply_columns, _apply_one

    rng = np.random.default_rng(seed)
    raw = rng.bytes(512)
    cols = []
    for _ in range(int(rng.integers(1, 12))):
        w = int(rng.choice([4, 8]))
        stride = w * int(rng.integers(1, 4))
        count = int(rng.integers(0, 10))
        offset = int(rng.integers(0, 512 - max(count - 1, 0) * stride - w + 1))
        cols.append(ColumnSpec(offset, stride, w, count))
    for decode in (False, True):
        ref = np.frombuffer(bytearray(raw), dtype=np.uint8)
        for c in cols:
            if c.count:
                _apply_one(ref, c, decode)
        assert _apply_columns(raw, cols, decode) == ref.tobytes()
    enc = _apply_columns(raw, cols, False)
    if len({(c.offset + i * c.stride + b) for c in cols for i in range(c.count) for b in range(c.element_width)}) \
            == sum(c.count * c.element_width for c in cols):
        assert _apply_columns(enc, cols, True) == raw  # disjoint columns round-trip
