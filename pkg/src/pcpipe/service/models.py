"""Request and response models of the HTTP service."""
from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class SliceInfo(BaseModel):
    name: str
    slice_id: int
    samples: int
    groups: int
    scalar_page_size_bytes: int
    block_page_size_bytes: int


class InspectRequest(BaseModel):
    path: str


class InspectResponse(BaseModel):
    # "schema" shadows a BaseModel attribute, hence the alias
    dataset_schema: dict = Field(alias="schema")
    total_size_bytes: int
    total_samples: int
    slices: list[SliceInfo]

    model_config = {"populate_by_name": True}


class ConvertRequest(BaseModel):
    source_dir: str
    kind: str
    dataset_schema: dict = Field(alias="schema")
    out_dir: str
    slice_count: int = Field(1, ge=1)
    group_size: int = Field(256, ge=1)
    num_points: Optional[int] = Field(None, ge=1)
    stem: str = "dataset"

    model_config = {"populate_by_name": True}


class ConvertResponse(BaseModel):
    files: int
    samples: int
    input_bytes: int
    output_bytes: int
    ratio: float
    slices: list[str]
    labels: dict[str, int]
    narrowed_files: int


class BenchRequest(BaseModel):
    dataset: str
    graph: Optional[dict] = None  # pipeline config document; default graph when omitted
    repeats: int = Field(3, ge=1)
    sample_interval_ms: float = Field(10.0, gt=0)
    epochs: int = Field(1, ge=1)
    base_seed: Optional[int] = None


class BenchResponse(BaseModel):
    report: dict[str, Any]


class ErrorResponse(BaseModel):
    error: str
    detail: str
