"""FastAPI service: the mock object store plus thin wrappers over the core package."""
from __future__ import annotations

import logging
import os
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response

from pcpipe.errors import PcpipeError
from pcpipe.service.models import (
    BenchRequest,
    BenchResponse,
    ConvertRequest,
    ConvertResponse,
    InspectRequest,
    InspectResponse,
)
from pcpipe.streaming.store import CRC_HEADER, crc32_of, file_crc32

log = logging.getLogger(__name__)


class _ObjectDir:
    """Objects = regular files of one directory; CRCs cached by (size, mtime)."""

    def __init__(self, root):
        self.root = Path(root) if root is not None else None
        self._crc: dict = {}
        self._lock = threading.Lock()

    def path(self, name: str) -> Path:
        if self.root is None or not name or "/" in name or name.startswith("."):
            raise HTTPException(404, f"no object {name!r}")
        p = self.root / name
        if not p.is_file():
            raise HTTPException(404, f"no object {name!r}")
        return p

    def crc(self, p: Path) -> int:
        st = p.stat()
        key = (p.name, st.st_size, st.st_mtime_ns)
        with self._lock:
            hit = self._crc.get(key)
        if hit is None:
            hit = file_crc32(p)
            with self._lock:
                self._crc[key] = hit
        return hit

    def names(self) -> list[str]:
        if self.root is None or not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_file() and not p.name.startswith("."))


def create_app(store_root=None, corrupt: dict | None = None) -> FastAPI:
    """``corrupt`` maps object names to how many GETs should serve a flipped byte (fault injection)."""
    app = FastAPI(title="pcpipe", version="1")
    objects = _ObjectDir(store_root)
    faults = dict(corrupt or {})
    fault_lock = threading.Lock()

    @app.exception_handler(PcpipeError)
    async def pcpipe_error(request: Request, exc: PcpipeError):
        return JSONResponse(status_code=422, content={"error": type(exc).__name__, "detail": str(exc)})

    @app.get("/objects")
    def list_objects() -> list[str]:
        return objects.names()

    @app.api_route("/objects/{name}", methods=["GET", "HEAD"])
    def get_object(name: str, request: Request):
        p = objects.path(name)
        headers = {CRC_HEADER: str(objects.crc(p))}
        if request.method == "HEAD":
            headers["content-length"] = str(p.stat().st_size)
            return Response(status_code=200, headers=headers)
        data = p.read_bytes()
        with fault_lock:
            if faults.get(name, 0) > 0:
                faults[name] -= 1
                data = bytes([data[0] ^ 0xFF]) + data[1:]
                log.warning("serving corrupted copy of %s", name)
        return Response(content=data, media_type="application/octet-stream", headers=headers)

    @app.post("/inspect", response_model=InspectResponse)
    def inspect(req: InspectRequest):
        from pcpipe.record import describe_dataset

        return InspectResponse.model_validate(describe_dataset(req.path))

    @app.post("/convert", response_model=ConvertResponse)
    def convert(req: ConvertRequest):
        from pcpipe.ingest import convert as run_convert
        from pcpipe.record import Schema

        _, report = run_convert(req.source_dir, req.kind, Schema.from_json(req.dataset_schema),
                                slice_count=req.slice_count, group_size=req.group_size, out_dir=req.out_dir,
                                num_points=req.num_points, stem=req.stem)
        return ConvertResponse(**report.to_json())

    @app.post("/bench", response_model=BenchResponse)
    def bench(req: BenchRequest):
        from pcpipe.bench import run_benchmark
        from pcpipe.pipeline import PipelineGraph, simple_graph

        graph = PipelineGraph.from_json(req.graph) if req.graph else simple_graph(["normalize", "translate"])
        report = run_benchmark(graph, req.dataset, repeats=req.repeats, sample_interval_ms=req.sample_interval_ms,
                               epochs=req.epochs, base_seed=req.base_seed)
        return BenchResponse(report=report.to_json())

    return app


def serve(store_root, host="127.0.0.1", port=8765):  # pragma: no cover - blocking server
    import uvicorn

    uvicorn.run(create_app(os.fspath(store_root)), host=host, port=port, log_level="warning")
