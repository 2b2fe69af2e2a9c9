import numpy as np
import pytest

from pcpipe.record import FieldType, Schema, write_dataset

MODELNET_SCHEMA = Schema.of({"data": ("bytes", [3]), "normal": ("bytes", [3]), "label": "int32"})


def random_schema(rng):
    """A random schema touching every field kind."""
    kinds = ["bytes", "int32", "int64", "float32", "float64", "string"]
    n = int(rng.integers(1, 7))
    fields = []
    for i in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        shape = ()
        if kind == "bytes" and rng.random() < 0.6:
            shape = (int(rng.integers(1, 4)),)
        elif kind not in ("bytes", "string") and rng.random() < 0.3:
            shape = tuple(int(d) for d in rng.integers(1, 4, size=int(rng.integers(1, 3))))
        fields.append((f"f{i}_{kind}", FieldType(kind, shape)))
    return Schema(tuple(fields))


def random_sample(rng, schema):
    out = {}
    for name, ft in schema:
        if ft.kind == "bytes":
            if ft.is_tensor:
                rows = int(rng.integers(0, 40))
                out[name] = rng.normal(size=(rows,) + ft.shape).astype("<f4").tobytes()
            else:
                out[name] = rng.bytes(int(rng.integers(0, 64)))
        elif ft.kind == "string":
            out[name] = "".join(chr(int(c)) for c in rng.integers(32, 0x2FF, size=int(rng.integers(0, 12))))
        elif ft.kind.startswith("int"):
            info = np.iinfo(ft.dtype)
            v = rng.integers(info.min, info.max, size=ft.shape or None, dtype=ft.dtype, endpoint=True)
            out[name] = v if ft.shape else int(v)
        else:
            v = rng.normal(size=ft.shape or None) * 10.0 ** int(rng.integers(-5, 5))
            out[name] = np.asarray(v, dtype=ft.dtype) if ft.shape else float(ft.dtype.type(v))
    return out


def cloud_sample(i, n_points=64, label=None):
    rng = np.random.default_rng(i)
    pts = rng.normal(size=(n_points, 3)).astype(np.float32)
    nrm = rng.normal(size=(n_points, 3)).astype(np.float32)
    return {"data": pts.tobytes(), "normal": nrm.tobytes(), "label": int(i % 5 if label is None else label)}


@pytest.fixture
def modelnet_dir(tmp_path):
    """40 ModelNet-style samples in 2 slices of groups of 8."""
    samples = [cloud_sample(i) for i in range(40)]
    write_dataset(samples, MODELNET_SCHEMA, slice_count=2, group_size=8, out_dir=tmp_path / "ds")
    return tmp_path / "ds", samples


def cloud_dataset(out_dir, n, n_points=16, slice_count=2, group_size=8):
    """Write ``n`` cloud samples and return (headers, index, reader)."""
    from pcpipe.index import build_index
    from pcpipe.record import DatasetReader

    headers = write_dataset([cloud_sample(i, n_points) for i in range(n)], MODELNET_SCHEMA,
                            slice_count=slice_count, group_size=group_size, out_dir=out_dir)
    return headers, build_index(headers), DatasetReader(headers, cache_groups=8)
