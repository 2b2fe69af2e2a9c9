"""Field types, schemas and sample validation for .PcRecord datasets.

Field kinds split into two storage classes:

* ``bytes`` fields are variable-length binary blobs kept in the block page.
  A non-empty ``shape`` marks the blob as a float32 row tensor with that
  trailing shape (``bytes[3]`` is an N x 3 point array). Three-component
  vector fields (coordinates, normals) get XOR-delta coding per column;
  per-point scalars such as intensity are left for LZ4 alone, since delta
  coding breaks up their exact repeats.
* every other kind is a fixed-size scalar/array stored in the scalar page.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from pcpipe.errors import BadShape, DuplicateField, EmptySchema, SchemaMismatch

KINDS = ("bytes", "int32", "int64", "float32", "float64", "string")

NUMERIC_DTYPES = {
    "int32": np.dtype("<i4"),
    "int64": np.dtype("<i8"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}

# element type of a shaped bytes field
TENSOR_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class FieldType:
    kind: str
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def is_block(self) -> bool:
        return self.kind == "bytes"

    @property
    def is_tensor(self) -> bool:
        """True for bytes fields holding float32 rows of ``shape``."""
        return self.kind == "bytes" and len(self.shape) > 0

    @property
    def is_coordinate(self) -> bool:
        return self.is_tensor and self.shape == (3,)

    @property
    def row_width(self) -> int:
        return math.prod(self.shape) if self.shape else 1

    @property
    def dtype(self) -> np.dtype:
        return NUMERIC_DTYPES[self.kind]

    @property
    def fixed_nbytes(self) -> int:
        return self.row_width * self.dtype.itemsize

    def to_json(self) -> dict:
        return {"type": self.kind, "shape": list(self.shape)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "FieldType":
        return cls(doc["type"], tuple(doc.get("shape", ())))


@dataclass(frozen=True)
class Schema:
    fields: tuple[tuple[str, FieldType], ...] = field(default_factory=tuple)

    @classmethod
    def of(cls, mapping=None, **kw) -> "Schema":
        """Build from ``{name: FieldType | "kind" | ("kind", shape)}`` or a pair list."""
        if isinstance(mapping, Mapping):
            items = list(mapping.items())
        else:
            items = list(mapping or ())
        items += list(kw.items())
        out = []
        for name, spec in items:
            if isinstance(spec, FieldType):
                ft = spec
            elif isinstance(spec, str):
                ft = FieldType(spec)
            elif isinstance(spec, Mapping):
                ft = FieldType.from_json(spec)
            else:
                kind, shape = spec
                ft = FieldType(kind, tuple(shape))
            out.append((name, ft))
        return cls(tuple(out))

    def __iter__(self):
        return iter(self.fields)

    def __len__(self):
        return len(self.fields)

    def __getitem__(self, name: str) -> FieldType:
        for n, ft in self.fields:
            if n == name:
                return ft
        raise KeyError(name)

    def __contains__(self, name) -> bool:
        return any(n == name for n, _ in self.fields)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    @property
    def block_fields(self) -> list[tuple[str, FieldType]]:
        return [(n, ft) for n, ft in self.fields if ft.is_block]

    @property
    def scalar_fields(self) -> list[tuple[str, FieldType]]:
        return [(n, ft) for n, ft in self.fields if not ft.is_block]

    def to_json(self) -> dict:
        # list form keeps order and duplicates visible to validate_schema
        return {"fields": [[n, ft.to_json()] for n, ft in self.fields]}

    @classmethod
    def from_json(cls, doc) -> "Schema":
        if isinstance(doc, Mapping) and "fields" in doc and isinstance(doc["fields"], list):
            return cls(tuple((n, FieldType.from_json(ft)) for n, ft in doc["fields"]))
        # plain {"name": {"type":..., "shape":...}} as users write it
        return cls(tuple((n, FieldType.from_json(ft)) for n, ft in dict(doc).items()))


def validate_schema(schema: Schema) -> None:
    """Raise if ``schema`` breaks any structural rule; return None when fine."""
    if len(schema) == 0:
        raise EmptySchema("schema has no fields")
    seen = set()
    for name, ft in schema:
        if not isinstance(name, str) or not name or not name.isascii():
            raise BadShape(f"invalid field name {name!r}")
        if name in seen:
            raise DuplicateField(name)
        seen.add(name)
        if ft.kind not in KINDS:
            raise BadShape(f"{name}: unknown type {ft.kind!r}")
        if any(d <= 0 for d in ft.shape):
            raise BadShape(f"{name}: shape entries must be positive, got {list(ft.shape)}")
        if ft.kind == "string" and ft.shape:
            raise BadShape(f"{name}: string fields cannot carry a shape")


def normalize_value(name: str, ft: FieldType, value):
    """Coerce one sample value to its canonical in-memory form.

    bytes -> ``bytes``; scalar numeric -> python int/float (float32 values
    rounded through float32); shaped numeric -> contiguous ndarray; string -> str.
    """
    if ft.kind == "bytes":
        if isinstance(value, np.ndarray):
            if ft.is_tensor:
                value = np.ascontiguousarray(value, dtype=TENSOR_DTYPE)
            value = value.tobytes()
        if not isinstance(value, (bytes, bytearray, memoryview)):
            raise SchemaMismatch(f"{name}: expected bytes, got {type(value).__name__}")
        value = bytes(value)
        if ft.is_tensor and len(value) % (ft.row_width * TENSOR_DTYPE.itemsize):
            raise SchemaMismatch(
                f"{name}: {len(value)} bytes is not a whole number of "
                f"{list(ft.shape)} float32 rows"
            )
        return value
    if ft.kind == "string":
        if not isinstance(value, str):
            raise SchemaMismatch(f"{name}: expected str, got {type(value).__name__}")
        return value
    dt = ft.dtype
    if ft.shape:
        arr = np.asarray(value)
        if arr.shape != ft.shape:
            raise SchemaMismatch(f"{name}: expected shape {ft.shape}, got {arr.shape}")
        if arr.dtype.kind not in ("iub" if dt.kind == "i" else "iubf"):
            raise SchemaMismatch(f"{name}: cannot store {arr.dtype} as {ft.kind}")
        out = np.ascontiguousarray(arr.astype(dt))
        if dt.kind == "i" and not np.array_equal(out, arr):
            raise SchemaMismatch(f"{name}: values do not fit {ft.kind}")
        return out
    if isinstance(value, (np.ndarray,)) and value.shape != ():
        raise SchemaMismatch(f"{name}: expected a scalar")
    if dt.kind == "i":
        if isinstance(value, (float, np.floating)) or isinstance(value, bool):
            raise SchemaMismatch(f"{name}: expected an integer")
        v = int(value)
        info = np.iinfo(dt)
        if not info.min <= v <= info.max:
            raise SchemaMismatch(f"{name}: {v} does not fit {ft.kind}")
        return v
    return float(dt.type(value))


def conform(schema: Schema, sample: Mapping[str, Any]) -> dict:
    """Validate a sample against the schema and return its canonical form."""
    keys = set(sample)
    names = schema.names
    if keys != set(names):
        missing = sorted(set(names) - keys)
        extra = sorted(keys - set(names))
        raise SchemaMismatch(f"sample fields differ from schema: missing={missing} extra={extra}")
    return {n: normalize_value(n, ft, sample[n]) for n, ft in schema}
