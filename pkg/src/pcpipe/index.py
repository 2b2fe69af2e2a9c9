"""In-memory metadata index: global sample id -> (slice, group, byte range)."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

from pcpipe.errors import OutOfRange, SchemaConflict


class TaskType(enum.Enum):
    kCommonTask = 0
    kPaddedTask = 1


@dataclass(frozen=True)
class MetadataEntry:
    task: TaskType
    shard_id: int
    group_id: int
    sample_meta: tuple[int, int]  # [blob_start, blob_end) within the group's block page
    scalar_meta: dict = field(default_factory=dict, compare=True, hash=False)

    @property
    def row(self) -> int:
        return self.scalar_meta["row"]

    @property
    def field_lengths(self) -> tuple[int, ...]:
        return tuple(self.scalar_meta["field_lengths"])

    @property
    def sample_id(self) -> int:
        """Global id of the real sample this entry points at."""
        return self.scalar_meta["sample_id"]

    def to_json(self) -> dict:
        return {
            "task": self.task.name,
            "data_mapping": [self.shard_id, self.group_id],
            "sample_meta": list(self.sample_meta),
            "scalar_meta": self.scalar_meta,
        }


@dataclass(frozen=True)
class IndexTable:
    task_list: tuple[TaskType, ...]
    sample_meta_list: tuple[MetadataEntry, ...]
    total_real_samples: int

    def __len__(self):
        return len(self.sample_meta_list)

    def __getitem__(self, i):
        return self.sample_meta_list[i]

    def __iter__(self):
        return iter(self.sample_meta_list)

    @property
    def padded(self) -> int:
        return len(self) - self.total_real_samples

    def to_json(self) -> dict:
        return {
            "total_real_samples": self.total_real_samples,
            "entries": [e.to_json() for e in self.sample_meta_list],
        }

    def dumps(self, **kw: Any) -> str:
        return json.dumps(self.to_json(), **kw)


def build_index(headers: Sequence) -> IndexTable:
    """One kCommonTask entry per sample of every slice, in write order.

    Only header data is consulted; no page is read.
    """
    headers = sorted(headers, key=lambda h: h.slice_id)
    if headers:
        schema = headers[0].schema
        for h in headers[1:]:
            if h.schema != schema:
                raise SchemaConflict(f"slice {h.slice_id} schema differs from slice {headers[0].slice_id}")
    entries = []
    for h in headers:
        for g in h.group_index:
            for row in range(g.sample_count):
                entries.append(MetadataEntry(
                    TaskType.kCommonTask, h.slice_id, g.group_id,
                    (g.blob_offsets[row], g.blob_offsets[row + 1]),
                    {"row": row, "field_lengths": list(g.field_lengths[row]), "sample_id": len(entries)},
                ))
    return IndexTable(tuple(e.task for e in entries), tuple(entries), len(entries))


def locate(index: IndexTable, global_id: int) -> MetadataEntry:
    if not 0 <= global_id < len(index.sample_meta_list):
        raise OutOfRange(f"sample {global_id} outside index of {len(index)}")
    return index.sample_meta_list[global_id]


def pad_for_shards(index: IndexTable, num_shards: int) -> IndexTable:
    """Append kPaddedTask copies of trailing entries until ``num_shards`` divides the length."""
    if num_shards < 1:
        raise ValueError("num_shards must be positive")
    n = len(index)
    k = -n % num_shards
    if k == 0 or n == 0:
        return index
    extra = [replace(index.sample_meta_list[(n - k + j) % n], task=TaskType.kPaddedTask) for j in range(k)]
    entries = index.sample_meta_list + tuple(extra)
    return IndexTable(tuple(e.task for e in entries), entries, index.total_real_samples)


def strip_padding(index: IndexTable) -> IndexTable:
    entries = tuple(e for e in index.sample_meta_list if e.task is TaskType.kCommonTask)
    return IndexTable(tuple(e.task for e in entries), entries, index.total_real_samples)
