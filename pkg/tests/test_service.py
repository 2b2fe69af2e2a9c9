import zlib
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from conftest import cloud_dataset
from pcpipe.ingest.synth import write_xyz_corpus
from pcpipe.record import describe_dataset
from pcpipe.service import create_app
from pcpipe.streaming import publish


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    d = tmp_path_factory.mktemp("svc")
    cloud_dataset(d / "ds", 24, n_points=16, slice_count=2, group_size=4)
    publish(d / "ds", d / "store")
    return d, TestClient(create_app(d / "store"))


def test_objects_list_get_head(setup):
    d, client = setup
    assert client.get("/objects").json() == ["dataset.pcrecord", "dataset.pcrecord1", "meta_index.json"]
    data = (d / "store" / "dataset.pcrecord1").read_bytes()
    r = client.get("/objects/dataset.pcrecord1")
    assert r.status_code == 200 and r.content == data
    assert r.headers["x-checksum-crc32"] == str(zlib.crc32(data))
    h = client.head("/objects/dataset.pcrecord1")
    assert h.status_code == 200 and int(h.headers["content-length"]) == len(data)
    assert h.headers["x-checksum-crc32"] == str(zlib.crc32(data))
    for bad in ("missing", ".hidden", "..%2Fetc"):
        assert client.get(f"/objects/{bad}").status_code == 404


def test_corruption_injection_counts_down(setup):
    d, _ = setup
    client = TestClient(create_app(d / "store", corrupt={"dataset.pcrecord": 1}))
    data = (d / "store" / "dataset.pcrecord").read_bytes()
    first = client.get("/objects/dataset.pcrecord").content
    assert first != data and len(first) == len(data)
    assert client.get("/objects/dataset.pcrecord").content == data


def test_inspect_endpoint(setup):
    d, client = setup
    r = client.post("/inspect", json={"path": str(d / "ds" / "dataset.pcrecord")})
    assert r.status_code == 200
    assert r.json() == describe_dataset(d / "ds" / "dataset.pcrecord")
    r = client.post("/inspect", json={"path": str(d / "nope.pcrecord")})
    assert r.status_code == 422 and r.json()["error"] == "IoFailure"


def test_convert_endpoint(setup, tmp_path):
    _, client = setup
    write_xyz_corpus(tmp_path / "src", total_bytes=20_000, n_points=64)
    schema = {"fields": [["data", {"type": "bytes", "shape": [3]}], ["normal", {"type": "bytes", "shape": [3]}],
                         ["label", {"type": "int32", "shape": []}]]}
    r = client.post("/convert", json={"source_dir": str(tmp_path / "src"), "kind": "xyz_text", "schema": schema,
                                      "out_dir": str(tmp_path / "out"), "slice_count": 2})
    assert r.status_code == 200, r.text
    doc = r.json()
    assert [Path(p).name for p in doc["slices"]] == ["dataset.pcrecord", "dataset.pcrecord1"] and doc["ratio"] > 1
    r = client.post("/convert", json={"source_dir": str(tmp_path / "src"), "kind": "xyz_text", "schema": schema,
                                      "out_dir": str(tmp_path / "o2"), "slice_count": 0})
    assert r.status_code == 422  # request validation


def test_bench_endpoint(setup):
    d, client = setup
    r = client.post("/bench", json={"dataset": str(d / "ds" / "dataset.pcrecord"), "repeats": 2, "base_seed": 3})
    assert r.status_code == 200, r.text
    rep = r.json()["report"]
    assert rep["version"] == 1 and rep["repeats"] == 2 and rep["graph"]["base_seed"] == 3
    assert rep["cost_time_s"] >= 0 and rep["avg_cpu_percent"] >= 0
