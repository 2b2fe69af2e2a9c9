"""Directory-of-raw-files -> .PcRecord conversion."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pcpipe.errors import NoInputFiles, ParseError, ParseFailure, SchemaMismatch
from pcpipe.ingest.parsers import SUFFIXES, ParsedCloud, SourceKind, parse_source
from pcpipe.record import FileHeader, Schema, validate_schema, write_dataset
from pcpipe.record.dataset import DEFAULT_GROUP_SIZE

log = logging.getLogger(__name__)

# schema field names recognised for each cloud attribute
FIELD_ALIASES = {
    "points": ("data", "points", "xyz", "coords"),
    "normals": ("normal", "normals"),
    "colors": ("color", "colors", "rgb"),
    "intensity": ("intensity", "reflectance"),
    "label": ("label",),
}


@dataclass
class ConversionReport:
    files: int
    samples: int
    input_bytes: int
    output_bytes: int
    ratio: float
    slices: list[str]
    labels: dict[str, int] = field(default_factory=dict)
    narrowed_files: int = 0  # float64 inputs rounded to float32

    def to_json(self) -> dict:
        return asdict(self)


def _field_map(schema: Schema) -> dict[str, str]:
    """attribute -> schema field name"""
    out = {}
    for attr, aliases in FIELD_ALIASES.items():
        for name in aliases:
            if name in schema:
                out[attr] = name
                break
    if "points" not in out:
        raise SchemaMismatch(f"schema needs a point field named one of {FIELD_ALIASES['points']}")
    for attr in ("points", "normals", "colors", "intensity"):
        if attr in out and schema[out[attr]].kind != "bytes":
            raise SchemaMismatch(f"field {out[attr]!r} must be of type bytes")
    if "label" in out and schema[out["label"]].kind not in ("int32", "int64"):
        raise SchemaMismatch("label field must be int32 or int64")
    unknown = set(schema.names) - set(out.values())
    if unknown:
        raise SchemaMismatch(f"no source attribute for schema fields {sorted(unknown)}")
    return out


def find_sources(source_dir, kind) -> list[Path]:
    root = Path(source_dir)
    suffixes = SUFFIXES[SourceKind(kind)]
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in suffixes)
    return files


def class_name(path: Path, root: Path) -> str:
    """Top-level directory under ``root`` (``"."`` for files directly in it)."""
    parts = path.relative_to(root).parts
    return parts[0] if len(parts) > 1 else "."


def label_ids(files, root) -> dict[str, int]:
    """Sorted unique class-directory names -> 0-based ids."""
    return {n: i for i, n in enumerate(sorted({class_name(p, Path(root)) for p in files}))}


def resample(cloud: ParsedCloud, num_points: int) -> ParsedCloud:
    """Evenly spaced pick of exactly ``num_points`` rows (repeats rows when the cloud is smaller)."""
    n = len(cloud.points)
    if n == num_points:
        return cloud
    idx = (np.arange(num_points) * n) // num_points
    pick = lambda a: None if a is None else np.ascontiguousarray(a[idx])  # noqa: E731
    return ParsedCloud(pick(cloud.points), pick(cloud.normals), pick(cloud.colors), pick(cloud.intensity),
                       cloud.label, cloud.narrowed)


def cloud_to_sample(cloud: ParsedCloud, fields: dict[str, str], schema: Schema) -> dict:
    sample = {}
    for attr in ("points", "normals", "colors", "intensity"):
        value = getattr(cloud, attr)
        if value is None:
            if attr in fields:
                raise SchemaMismatch(f"schema field {fields[attr]!r} but the source has no {attr}")
            continue
        if attr not in fields:
            raise SchemaMismatch(f"source has {attr} but the schema has no field for it")
        arr = np.ascontiguousarray(value, dtype="<f4")
        ft = schema[fields[attr]]
        if ft.is_tensor and arr.reshape(len(arr), -1).shape[1] != ft.row_width:
            raise SchemaMismatch(f"{attr} rows have {arr.reshape(len(arr), -1).shape[1]} values, "
                                 f"field {fields[attr]!r} expects {list(ft.shape)}")
        sample[fields[attr]] = arr.tobytes()
    if "label" in fields:
        sample[fields["label"]] = int(cloud.label if cloud.label is not None else 0)
    return sample


def convert(source_dir, kind, schema: Schema, slice_count: int = 1, group_size: int = DEFAULT_GROUP_SIZE,
            out_dir="out", num_points: int | None = None, stem: str = "dataset",
            workers: int = 4) -> tuple[list[FileHeader], ConversionReport]:
    validate_schema(schema)
    kind = SourceKind(kind)
    root = Path(source_dir)
    files = find_sources(root, kind) if root.is_dir() else []
    if not files:
        raise NoInputFiles(f"no {kind.value} files under {source_dir}")
    fields = _field_map(schema)
    labels = label_ids(files, root) if "label" in fields else {}

    def load(path: Path):
        data = path.read_bytes()
        try:
            cloud = parse_source(data, kind)
        except ParseError as exc:
            raise ParseFailure(str(path), exc) from exc
        if labels:
            cloud.label = labels[class_name(path, root)]
        if num_points:
            cloud = resample(cloud, num_points)
        return len(data), cloud

    # pool.map yields in submission order, which keeps the sorted file order
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = list(pool.map(load, files))
    input_bytes = sum(n for n, _ in loaded)
    samples = [cloud_to_sample(c, fields, schema) for _, c in loaded]
    narrowed = sum(1 for _, c in loaded if c.narrowed)
    if narrowed:
        log.warning("%d float64 inputs were rounded to float32", narrowed)
    headers = write_dataset(samples, schema, slice_count=slice_count, group_size=group_size,
                            out_dir=out_dir, stem=stem)
    out_bytes = headers[0].total_size_bytes
    report = ConversionReport(
        files=len(files),
        samples=len(samples),
        input_bytes=input_bytes,
        output_bytes=out_bytes,
        ratio=input_bytes / out_bytes if out_bytes else float("inf"),
        slices=[os.fspath(Path(out_dir) / p) for p in headers[0].slice_paths],
        labels=labels,
        narrowed_files=narrowed,
    )
    return headers, report


# schemas for the common source layouts; the CLI accepts these names or a JSON schema file
SCHEMA_PRESETS = {
    "modelnet": {"data": ("bytes", [3]), "normal": ("bytes", [3]), "label": "int32"},
    "points": {"data": ("bytes", [3]), "label": "int32"},
    "kitti": {"data": ("bytes", [3]), "intensity": ("bytes", [1])},
}


def preset_schema(name: str) -> Schema:
    try:
        return Schema.of(SCHEMA_PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown schema preset {name!r}; choose from {sorted(SCHEMA_PRESETS)}") from None
