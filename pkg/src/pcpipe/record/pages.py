"""Page codec: XOR-delta inner layer, LZ4 outer layer, CRC32 integrity.

Serialized page layout (little-endian)::

    u8  flags         bit0 outer_lz4, bit1 inner_delta, bit2 stored_raw
    u64 raw_len       length of the page before any coding
    u64 payload_len
    u32 crc32         of payload
    ... payload
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import lz4.block
import numpy as np

from pcpipe.errors import BadAlignment, ChecksumMismatch, ColumnOutOfRange, CorruptPage

OUTER_LZ4 = 0x1
INNER_DELTA = 0x2
STORED_RAW = 0x4

PAGE_HEADER = struct.Struct("<BQQI")

_UINT = {4: np.dtype("<u4"), 8: np.dtype("<u8")}


class ColumnSpec(NamedTuple):
    """``count`` elements of ``element_width`` bytes, ``stride`` bytes apart, from ``offset``."""

    offset: int
    stride: int
    element_width: int
    count: int

    @property
    def end(self) -> int:
        if self.count == 0:
            return self.offset
        return self.offset + (self.count - 1) * self.stride + self.element_width


def _check_width(column_len: int, element_width: int) -> np.dtype:
    if element_width not in _UINT:
        raise BadAlignment(f"element width must be 4 or 8, got {element_width}")
    if column_len % element_width:
        raise BadAlignment(f"column of {column_len} bytes is not a multiple of {element_width}")
    return _UINT[element_width]


def xor_delta_encode(column: bytes, element_width: int) -> bytes:
    dt = _check_width(len(column), element_width)
    v = np.frombuffer(column, dtype=dt)
    out = v.copy()
    out[1:] ^= v[:-1]
    return out.tobytes()


def xor_delta_decode(encoded: bytes, element_width: int) -> bytes:
    dt = _check_width(len(encoded), element_width)
    v = np.frombuffer(encoded, dtype=dt)
    # prefix-XOR undoes the neighbour XOR
    return np.bitwise_xor.accumulate(v).tobytes() if len(v) else b""


def _apply_columns(raw: bytes, columns: Sequence[ColumnSpec], decode: bool) -> bytes:
    if not columns:
        return bytes(raw)
    buf = np.frombuffer(bytearray(raw), dtype=np.uint8)
    live = []
    for col in columns:
        if col.count == 0:
            continue
        _check_width(col.element_width, col.element_width)
        if col.offset < 0 or col.end > len(buf) or col.stride < col.element_width:
            raise ColumnOutOfRange(f"{col} does not fit a page of {len(buf)} bytes")
        live.append(col)
    if not live:
        return buf.tobytes()
    plans = [_gather(live, w) for w in _UINT]
    touched = np.concatenate([p[1].ravel() for p in plans if p])
    if len(np.unique(touched)) != len(touched):
        # overlapping columns: the result depends on column order, so apply them one at a time
        for col in live:
            _apply_one(buf, col, decode)
        return buf.tobytes()
    for plan in plans:
        if plan:
            _apply_gathered(buf, *plan, decode)
    return buf.tobytes()


def _gather(cols, width):
    """Byte positions of every element of the ``width``-byte columns, plus each column's first row."""
    cols = [c for c in cols if c.element_width == width]
    if not cols:
        return None
    counts = np.array([c.count for c in cols])
    first = np.concatenate(([0], np.cumsum(counts)[:-1]))
    col_of = np.repeat(np.arange(len(cols)), counts)
    k = np.arange(counts.sum()) - first[col_of]
    offsets = np.array([c.offset for c in cols])[col_of]
    strides = np.array([c.stride for c in cols])[col_of]
    return width, (offsets + k * strides)[:, None] + np.arange(width), first, col_of


def _apply_gathered(buf, width, idx, first, col_of, decode):
    dt = _UINT[width]
    values = buf[idx].view(dt).reshape(len(idx))
    if decode:
        # segmented prefix-XOR: a global scan, then cancel what came before each column
        scan = np.bitwise_xor.accumulate(values)
        before = np.zeros(len(first), dtype=dt)
        before[1:] = scan[first[1:] - 1]
        coded = scan ^ before[col_of]
    else:
        coded = values.copy()
        coded[1:] ^= values[:-1]
        coded[first] = values[first]
    buf[idx] = coded.view(np.uint8).reshape(len(idx), width)


def _apply_one(buf, col, decode):
    dt = _UINT[col.element_width]
    grid = np.lib.stride_tricks.as_strided(
        buf[col.offset:], shape=(col.count, col.element_width),
        strides=(col.stride, 1), writeable=True)
    values = np.ascontiguousarray(grid).view(dt).reshape(col.count)
    if decode:
        coded = np.bitwise_xor.accumulate(values)
    else:
        coded = values.copy()
        coded[1:] ^= values[:-1]
    grid[...] = coded.view(np.uint8).reshape(col.count, col.element_width)


@dataclass(frozen=True)
class EncodedPage:
    flags: int
    raw_len: int
    payload: bytes
    checksum: int

    @property
    def outer_lz4(self) -> bool:
        return bool(self.flags & OUTER_LZ4)

    @property
    def inner_delta(self) -> bool:
        return bool(self.flags & INNER_DELTA)

    @property
    def stored_raw(self) -> bool:
        return bool(self.flags & STORED_RAW)

    def to_bytes(self) -> bytes:
        return PAGE_HEADER.pack(self.flags, self.raw_len, len(self.payload), self.checksum) + self.payload

    def __len__(self):
        return PAGE_HEADER.size + len(self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedPage":
        if len(data) < PAGE_HEADER.size:
            raise CorruptPage(f"page header needs {PAGE_HEADER.size} bytes, have {len(data)}")
        flags, raw_len, payload_len, crc = PAGE_HEADER.unpack_from(data)
        payload = bytes(data[PAGE_HEADER.size:PAGE_HEADER.size + payload_len])
        if len(payload) != payload_len:
            raise CorruptPage(f"payload truncated: {len(payload)} of {payload_len} bytes")
        return cls(flags, raw_len, payload, crc)


def encode_page(raw: bytes, columns: Iterable[ColumnSpec] = ()) -> EncodedPage:
    columns = list(columns)
    flags = INNER_DELTA if columns else 0
    body = _apply_columns(raw, columns, decode=False)
    packed = lz4.block.compress(body, store_size=False) if body else b""
    if body and len(packed) < len(body):
        flags |= OUTER_LZ4
        payload = packed
    else:
        flags |= STORED_RAW
        payload = body
    return EncodedPage(flags, len(raw), payload, zlib.crc32(payload))


def decode_page(page: EncodedPage, columns: Iterable[ColumnSpec] = ()) -> bytes:
    if page.stored_raw and len(page.payload) != page.raw_len:
        raise CorruptPage(f"raw page holds {len(page.payload)} bytes, expected {page.raw_len}")
    if zlib.crc32(page.payload) != page.checksum:
        raise ChecksumMismatch("page checksum does not match payload")
    if page.outer_lz4:
        try:
            body = lz4.block.decompress(page.payload, uncompressed_size=page.raw_len)
        except lz4.block.LZ4BlockError as exc:
            raise CorruptPage(f"lz4: {exc}") from None
        if len(body) != page.raw_len:
            raise CorruptPage(f"decoded {len(body)} bytes, expected {page.raw_len}")
    elif page.stored_raw:
        body = page.payload
    else:
        raise CorruptPage(f"page flags {page.flags:#x} name no storage mode")
    if page.inner_delta:
        body = _apply_columns(body, list(columns), decode=True)
    return body


def encode_block_page(raw: bytes, coordinate_columns: Iterable[ColumnSpec] = ()) -> EncodedPage:
    return encode_page(raw, coordinate_columns)


def decode_block_page(page: EncodedPage, coordinate_columns: Iterable[ColumnSpec] = ()) -> bytes:
    return decode_page(page, coordinate_columns)


def tensor_columns(offset: int, nbytes: int, row_width: int, element_width: int = 4) -> list[ColumnSpec]:
    """Column specs for a row-major tensor of ``row_width`` elements per row."""
    stride = row_width * element_width
    rows = nbytes // stride
    return [ColumnSpec(offset + c * element_width, stride, element_width, rows) for c in range(row_width)]
