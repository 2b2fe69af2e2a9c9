"""Meta-index publishing/fetching and per-epoch download planning.

The meta index is one JSON object named ``meta_index.json``: a list of
``{name, samples, bytes, crc32, header}`` where ``header`` is the slice's full
header document, so a client can build the sample index before downloading
any slice.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

from pcpipe.distributed import ShardSpec, shard_index
from pcpipe.errors import CorruptHeader, MissingMetaIndex, ObjectNotFound
from pcpipe.index import IndexTable, build_index, pad_for_shards
from pcpipe.record import FileHeader, open_dataset
from pcpipe.streaming.store import ObjectStore, file_crc32

META_NAME = "meta_index.json"


@dataclass(frozen=True)
class SliceSummary:
    name: str
    samples: int
    bytes: int
    crc32: int
    header: FileHeader

    def to_json(self) -> dict:
        return {"name": self.name, "samples": self.samples, "bytes": self.bytes, "crc32": self.crc32,
                "header": self.header.to_document()}


def build_meta_index(dataset) -> list[SliceSummary]:
    """Summaries for every slice of a local dataset (file or directory)."""
    out = []
    for h in open_dataset(dataset):
        p = h.path
        out.append(SliceSummary(p.name, h.sample_count, p.stat().st_size, file_crc32(p), h))
    return out


def write_meta_index(dataset, out_dir=None) -> Path:
    summaries = build_meta_index(dataset)
    base = Path(out_dir) if out_dir is not None else summaries[0].header.path.parent
    path = base / META_NAME
    path.write_text(json.dumps([s.to_json() for s in summaries]))
    return path


def publish(dataset, store_dir) -> list[SliceSummary]:
    """Copy a dataset's slices into ``store_dir`` and write its meta index there."""
    store_dir = Path(store_dir)
    store_dir.mkdir(parents=True, exist_ok=True)
    summaries = build_meta_index(dataset)
    for s in summaries:
        shutil.copyfile(s.header.path, store_dir / s.name)
    write_meta_index(store_dir, store_dir)
    return summaries


def parse_meta_index(data: bytes, base_dir=None) -> list[SliceSummary]:
    try:
        doc = json.loads(data)
        out = [SliceSummary(str(d["name"]), int(d["samples"]), int(d["bytes"]), int(d["crc32"]),
                            FileHeader.from_document(d["header"], base_dir)) for d in doc]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeader(f"malformed meta index: {exc!r}") from None
    if not out:
        raise MissingMetaIndex("meta index lists no slices")
    return out


def fetch_meta_index(store: ObjectStore, base_dir=None) -> list[SliceSummary]:
    try:
        data = store.get(META_NAME)
    except ObjectNotFound:
        raise MissingMetaIndex(f"{store!r} has no {META_NAME}") from None
    return parse_meta_index(data, base_dir)


def summaries_index(summaries: list[SliceSummary]) -> IndexTable:
    return build_index([s.header for s in summaries])


def shard_of(summaries: list[SliceSummary], spec: ShardSpec) -> IndexTable:
    """The shard-local index a device reads, after padding for ``spec.num_shards``."""
    return shard_index(pad_for_shards(summaries_index(summaries), spec.num_shards), spec)


@dataclass(frozen=True)
class DownloadRequest:
    object_name: str
    expected_size: int
    expected_crc32: int
    needed_by: tuple[int, int]  # (epoch, first shard-local position that reads it)
    reads: int = 0  # shard-local samples this epoch reads from the object

    def __post_init__(self):
        if self.expected_size <= 0:
            raise ValueError("expected_size must be positive")


def plan_epoch_downloads(summaries: list[SliceSummary], spec: ShardSpec, epoch: int,
                         shard: IndexTable | None = None) -> list[DownloadRequest]:
    """Requests for every slice the shard touches, ordered by first use."""
    shard = shard if shard is not None else shard_of(summaries, spec)
    by_id = {s.header.slice_id: s for s in summaries}
    first: dict[int, int] = {}
    reads: dict[int, int] = {}
    for pos, e in enumerate(shard):
        first.setdefault(e.shard_id, pos)
        reads[e.shard_id] = reads.get(e.shard_id, 0) + 1
    return [DownloadRequest(by_id[sid].name, by_id[sid].bytes, by_id[sid].crc32, (epoch, pos), reads[sid])
            for sid, pos in sorted(first.items(), key=lambda kv: kv[1])]
