"""Reading and writing .PcRecord slice files.

Every slice file is self-describing::

    offset 0   4s   magic  b"PCRC"
           4   u16  version (1)
           6   u64  total_size_bytes (all slices of the dataset)
          14   u32  header_len
          18   ...  header JSON (UTF-8, header_len bytes)
          ...       pages; group offsets are relative to the end of the JSON

Each group owns one scalar page and one block page (see ``pages``).

Scalar page (before LZ4): columns in schema order; fixed-width numeric
fields store ``sample_count`` little-endian rows back to back, strings store
``u32 length + UTF-8`` per row.

Block page (before coding): one contiguous blob per sample, holding that
sample's bytes fields in schema order. Blob boundaries and per-field lengths
live in the header so locating a sample never touches page data.
"""
from __future__ import annotations

import json
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from pcpipe.errors import (
    BadMagic,
    CorruptHeader,
    CorruptPage,
    EmptyDataset,
    IoFailure,
    RangeOutOfBounds,
    SchemaMismatch,
    UnsupportedVersion,
)
from pcpipe.record.pages import EncodedPage, decode_page, encode_page, tensor_columns
from pcpipe.record.schema import TENSOR_DTYPE, Schema, conform, validate_schema

MAGIC = b"PCRC"
VERSION = 1
PREFIX = struct.Struct("<4sHQI")
TOTAL_SIZE_OFFSET = 6
DEFAULT_GROUP_SIZE = 256
SUFFIX = ".pcrecord"


def slice_name(stem: str, i: int) -> str:
    return f"{stem}{SUFFIX}" if i == 0 else f"{stem}{SUFFIX}{i}"


@dataclass(frozen=True)
class GroupDescriptor:
    group_id: int
    sample_count: int
    scalar_page: tuple[int, int]  # (offset, length) after the header
    block_page: tuple[int, int]
    blob_offsets: tuple[int, ...]  # sample_count + 1 cumulative offsets into the block page
    field_lengths: tuple[tuple[int, ...], ...]  # per sample, per bytes field

    def to_json(self) -> dict:
        return {
            "group_id": self.group_id,
            "sample_count": self.sample_count,
            "scalar_page": list(self.scalar_page),
            "block_page": list(self.block_page),
            "blob_offsets": list(self.blob_offsets),
            "field_lengths": [list(f) for f in self.field_lengths],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "GroupDescriptor":
        return cls(
            int(d["group_id"]),
            int(d["sample_count"]),
            tuple(d["scalar_page"]),
            tuple(d["block_page"]),
            tuple(d["blob_offsets"]),
            tuple(tuple(f) for f in d["field_lengths"]),
        )


@dataclass(frozen=True)
class FileHeader:
    version: int
    total_size_bytes: int
    scalar_page_size_bytes: int  # largest encoded scalar page in this slice
    block_page_size_bytes: int  # largest encoded block page in this slice
    schema: Schema
    slice_paths: tuple[str, ...]
    slice_id: int
    group_index: tuple[GroupDescriptor, ...]
    data_offset: int = 0
    # directory the slice paths are relative to; not serialized
    base_dir: str | None = field(default=None, compare=False)

    @property
    def sample_count(self) -> int:
        return sum(g.sample_count for g in self.group_index)

    @property
    def path(self) -> Path:
        return Path(self.base_dir or ".") / self.slice_paths[self.slice_id]

    def to_json(self) -> dict:
        return {
            "scalar_page_size_bytes": self.scalar_page_size_bytes,
            "block_page_size_bytes": self.block_page_size_bytes,
            "schema": self.schema.to_json(),
            "slice_paths": list(self.slice_paths),
            "slice_id": self.slice_id,
            "group_index": [g.to_json() for g in self.group_index],
        }

    def to_document(self) -> dict:
        """Full JSON form, including the binary prefix fields."""
        doc = self.to_json()
        doc.update(version=self.version, total_size_bytes=self.total_size_bytes, data_offset=self.data_offset)
        return doc

    @classmethod
    def from_document(cls, doc: Mapping, base_dir=None) -> "FileHeader":
        try:
            return cls(
                version=int(doc["version"]),
                total_size_bytes=int(doc["total_size_bytes"]),
                scalar_page_size_bytes=int(doc["scalar_page_size_bytes"]),
                block_page_size_bytes=int(doc["block_page_size_bytes"]),
                schema=Schema.from_json(doc["schema"]),
                slice_paths=tuple(doc["slice_paths"]),
                slice_id=int(doc["slice_id"]),
                group_index=tuple(GroupDescriptor.from_json(g) for g in doc["group_index"]),
                data_offset=int(doc.get("data_offset", 0)),
                base_dir=None if base_dir is None else str(base_dir),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeader(f"malformed header document: {exc!r}") from None


# --------------------------------------------------------------------------
# page layout helpers

def _encode_scalar_page(schema: Schema, rows: Sequence[dict]) -> bytes:
    parts = []
    for name, ft in schema.scalar_fields:
        if ft.kind == "string":
            for r in rows:
                b = r[name].encode("utf-8")
                parts.append(struct.pack("<I", len(b)))
                parts.append(b)
        else:
            col = np.empty((len(rows),) + ft.shape, dtype=ft.dtype)
            for i, r in enumerate(rows):
                col[i] = r[name]
            parts.append(col.tobytes())
    return b"".join(parts)


def _decode_scalar_row(schema: Schema, page: bytes, count: int, row: int) -> dict:
    out = {}
    pos = 0
    try:
        for name, ft in schema.scalar_fields:
            if ft.kind == "string":
                for i in range(count):
                    (n,) = struct.unpack_from("<I", page, pos)
                    pos += 4
                    if i == row:
                        raw = page[pos:pos + n]
                        if len(raw) != n:
                            raise CorruptPage("string runs past scalar page")
                        out[name] = raw.decode("utf-8")
                    pos += n
            else:
                width = ft.fixed_nbytes
                start = pos + row * width
                if pos + count * width > len(page):
                    raise CorruptPage(f"scalar column {name!r} runs past page end")
                arr = np.frombuffer(page, dtype=ft.dtype, count=ft.row_width, offset=start)
                if ft.shape:
                    out[name] = arr.reshape(ft.shape).copy()
                else:
                    v = arr[0]
                    out[name] = int(v) if ft.dtype.kind == "i" else float(v)
                pos += count * width
    except struct.error as exc:
        raise CorruptPage(f"scalar page: {exc}") from None
    return out


def _block_columns(schema: Schema, blob_offsets, field_lengths) -> list:
    cols = []
    block = schema.block_fields
    for start, lengths in zip(blob_offsets, field_lengths):
        pos = start
        for (name, ft), n in zip(block, lengths):
            if ft.is_coordinate and n:
                cols.extend(tensor_columns(pos, n, ft.row_width, TENSOR_DTYPE.itemsize))
            pos += n
    return cols


# --------------------------------------------------------------------------
# writing

def _plan_slices(n: int, slice_count: int) -> list[int]:
    """Contiguous, balanced sample counts per slice."""
    return [(k + 1) * n // slice_count - k * n // slice_count for k in range(slice_count)]


def write_dataset(
    samples: Iterable[Mapping],
    schema: Schema,
    slice_count: int = 1,
    group_size: int = DEFAULT_GROUP_SIZE,
    out_dir=".",
    stem: str = "dataset",
) -> list[FileHeader]:
    """Write ``samples`` as ``slice_count`` .PcRecord files and return their headers.

    Samples are split contiguously across slices (balanced by count) and cut
    into groups of ``group_size`` inside each slice, so reading the slices in
    order reproduces the input order.
    """
    validate_schema(schema)
    if slice_count < 1 or group_size < 1:
        raise ValueError("slice_count and group_size must be positive")
    rows = [conform(schema, s) for s in samples]
    if not rows:
        raise EmptyDataset("no samples to write")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    names = tuple(slice_name(stem, i) for i in range(slice_count))
    block_names = [n for n, _ in schema.block_fields]

    headers = []
    start = 0
    for sid, count in enumerate(_plan_slices(len(rows), slice_count)):
        chunk = rows[start:start + count]
        start += count
        pages: list[bytes] = []
        groups = []
        pos = 0
        for gid, g0 in enumerate(range(0, len(chunk), group_size)):
            grows = chunk[g0:g0 + group_size]
            scalar = encode_page(_encode_scalar_page(schema, grows)).to_bytes()
            lengths = tuple(tuple(len(r[n]) for n in block_names) for r in grows)
            offsets = [0]
            for ls in lengths:
                offsets.append(offsets[-1] + sum(ls))
            raw_block = b"".join(r[n] for r in grows for n in block_names)
            cols = _block_columns(schema, offsets[:-1], lengths)
            block = encode_page(raw_block, cols).to_bytes()
            groups.append(GroupDescriptor(
                gid, len(grows), (pos, len(scalar)), (pos + len(scalar), len(block)),
                tuple(offsets), lengths,
            ))
            pages += [scalar, block]
            pos += len(scalar) + len(block)
        header = FileHeader(
            version=VERSION,
            total_size_bytes=0,
            scalar_page_size_bytes=max((g.scalar_page[1] for g in groups), default=0),
            block_page_size_bytes=max((g.block_page[1] for g in groups), default=0),
            schema=schema,
            slice_paths=names,
            slice_id=sid,
            group_index=tuple(groups),
            base_dir=str(out_dir),
        )
        body = json.dumps(header.to_json(), separators=(",", ":")).encode("utf-8")
        header = replace(header, data_offset=PREFIX.size + len(body))
        try:
            with open(out_dir / names[sid], "wb") as fh:
                fh.write(PREFIX.pack(MAGIC, VERSION, 0, len(body)))
                fh.write(body)
                for p in pages:
                    fh.write(p)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        headers.append(header)

    total = sum(os.path.getsize(out_dir / n) for n in names)
    for n in names:
        with open(out_dir / n, "r+b") as fh:
            fh.seek(TOTAL_SIZE_OFFSET)
            fh.write(struct.pack("<Q", total))
    return [replace(h, total_size_bytes=total) for h in headers]


# --------------------------------------------------------------------------
# reading

def parse_header(data: bytes, base_dir=None, file_size: int | None = None) -> FileHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"not a .PcRecord file (magic {bytes(data[:4])!r})")
    if len(data) < PREFIX.size:
        raise CorruptHeader("file shorter than the fixed header prefix")
    _, version, total, hlen = PREFIX.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} (supported: {VERSION})")
    body = data[PREFIX.size:PREFIX.size + hlen]
    if len(body) != hlen:
        raise CorruptHeader(f"header JSON truncated: {len(body)} of {hlen} bytes")
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header JSON unreadable: {exc}") from None
    doc.update(version=version, total_size_bytes=total, data_offset=PREFIX.size + hlen)
    header = FileHeader.from_document(doc, base_dir=base_dir)
    check_header(header, file_size)
    return header


def check_header(header: FileHeader, file_size: int | None = None) -> None:
    if not header.slice_paths or not 0 <= header.slice_id < len(header.slice_paths):
        raise CorruptHeader("slice table is empty or slice_id out of range")
    for g in header.group_index:
        if len(g.blob_offsets) != g.sample_count + 1 or len(g.field_lengths) != g.sample_count:
            raise CorruptHeader(f"group {g.group_id}: blob table does not match sample count")
        for off, length in (g.scalar_page, g.block_page):
            if off < 0 or length < 0:
                raise CorruptHeader(f"group {g.group_id}: negative page range")
            if file_size is not None and header.data_offset + off + length > file_size:
                raise CorruptHeader(f"group {g.group_id}: page range beyond end of slice file")


def read_header(path) -> FileHeader:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(PREFIX.size)
            if prefix[:4] != MAGIC:
                raise BadMagic(f"{path}: not a .PcRecord file")
            if len(prefix) < PREFIX.size:
                raise CorruptHeader(f"{path}: truncated header prefix")
            hlen = PREFIX.unpack_from(prefix)[3]
            data = prefix + fh.read(hlen)
            size = os.fstat(fh.fileno()).st_size
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return parse_header(data, base_dir=path.parent, file_size=size)


def open_dataset(path) -> list[FileHeader]:
    """Read every slice header of the dataset that ``path`` (any slice or a directory) belongs to."""
    path = Path(path)
    if path.is_dir():
        firsts = sorted(path.glob(f"*{SUFFIX}"))
        if not firsts:
            raise IoFailure(f"{path}: no {SUFFIX} file found")
        path = firsts[0]
    first = read_header(path)
    return [first if i == first.slice_id else read_header(path.parent / name)
            for i, name in enumerate(first.slice_paths)]


@dataclass
class PageStats:
    scalar_decodes: int = 0
    block_decodes: int = 0

    @property
    def total(self) -> int:
        return self.scalar_decodes + self.block_decodes


class DatasetReader:
    """Random access to samples of one dataset.

    Decoded groups are kept in a small LRU cache guarded by a lock, so one
    reader can be shared by many worker threads.
    """

    def __init__(self, headers: Sequence[FileHeader], cache_groups: int = 4, root=None, opener=None):
        self.headers = {h.slice_id: h for h in headers}
        self.root = None if root is None else Path(root)
        self.cache_groups = cache_groups
        self.stats = PageStats()
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._opener = opener or open

    def _path(self, header: FileHeader) -> Path:
        if self.root is not None:
            return self.root / header.slice_paths[header.slice_id]
        return header.path

    def _read_range(self, header: FileHeader, off: int, length: int) -> bytes:
        path = self._path(header)
        try:
            with self._opener(path, "rb") as fh:
                fh.seek(header.data_offset + off)
                data = fh.read(length)
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        if len(data) != length:
            raise CorruptPage(f"{path}: page at {off} truncated ({len(data)} of {length} bytes)")
        return data

    def _group(self, shard_id: int, group_id: int):
        key = (shard_id, group_id)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        header = self.headers[shard_id]
        g = header.group_index[group_id]
        scalar = decode_page(EncodedPage.from_bytes(self._read_range(header, *g.scalar_page)))
        cols = _block_columns(header.schema, g.blob_offsets[:-1], g.field_lengths)
        block = decode_page(EncodedPage.from_bytes(self._read_range(header, *g.block_page)), cols)
        with self._lock:
            self.stats.scalar_decodes += 1
            self.stats.block_decodes += 1
            self._cache[key] = (scalar, block)
            while len(self._cache) > self.cache_groups:
                self._cache.popitem(last=False)
        return scalar, block

    def read_sample(self, entry) -> dict:
        header = self.headers.get(entry.shard_id)
        if header is None or not 0 <= entry.group_id < len(header.group_index):
            raise RangeOutOfBounds(f"no group ({entry.shard_id}, {entry.group_id})")
        g = header.group_index[entry.group_id]
        row = entry.row
        start, end = entry.sample_meta
        if not (0 <= row < g.sample_count):
            raise RangeOutOfBounds(f"row {row} outside group of {g.sample_count}")
        if not (0 <= start <= end <= g.blob_offsets[-1]):
            raise RangeOutOfBounds(f"blob range [{start}, {end}) outside block page of {g.blob_offsets[-1]} bytes")
        scalar, block = self._group(entry.shard_id, entry.group_id)
        out = _decode_scalar_row(header.schema, scalar, g.sample_count, row)
        blob = block[start:end]
        pos = 0
        lengths = entry.field_lengths
        if sum(lengths) != end - start:
            raise RangeOutOfBounds("field lengths do not cover the blob range")
        for (name, _), n in zip(header.schema.block_fields, lengths):
            out[name] = blob[pos:pos + n]
            pos += n
        return {n: out[n] for n in header.schema.names}

    def clear_cache(self):
        with self._lock:
            self._cache.clear()


def read_sample(header: FileHeader, entry) -> dict:
    """One-off read of a sample from ``header``'s slice (no caching)."""
    return DatasetReader([header], cache_groups=0).read_sample(entry)


def iter_samples(path) -> Iterable[dict]:
    """Sequential read of a whole dataset in write order."""
    from pcpipe.index import build_index

    headers = open_dataset(path)
    reader = DatasetReader(headers, cache_groups=2)
    for entry in build_index(headers).sample_meta_list:
        yield reader.read_sample(entry)


def sample_equal(a: Mapping, b: Mapping) -> bool:
    """Bit-exact comparison of two canonical samples."""
    if set(a) != set(b):
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            x, y = np.asarray(x), np.asarray(y)
            if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
        elif isinstance(x, float) and isinstance(y, float):
            if struct.pack("<d", x) != struct.pack("<d", y):
                return False
        elif type(x) is not type(y) or x != y:
            return False
    return True


__all__ = [
    "FileHeader", "GroupDescriptor", "DatasetReader", "PageStats", "write_dataset",
    "read_header", "parse_header", "open_dataset", "read_sample", "iter_samples",
    "sample_equal", "slice_name",
]


def describe_dataset(path) -> dict:
    """Schema, slices and group counts of a dataset, from headers only."""
    headers = open_dataset(path)
    return {
        "schema": headers[0].schema.to_json(),
        "total_size_bytes": headers[0].total_size_bytes,
        "total_samples": sum(h.sample_count for h in headers),
        "slices": [{"name": h.slice_paths[h.slice_id], "slice_id": h.slice_id, "samples": h.sample_count,
                    "groups": len(h.group_index), "scalar_page_size_bytes": h.scalar_page_size_bytes,
                    "block_page_size_bytes": h.block_page_size_bytes} for h in headers],
    }
