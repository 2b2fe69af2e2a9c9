"""Parsers for the raw point-cloud formats accepted by ``convert``."""
from __future__ import annotations

import ast
import enum
import re
import struct
from dataclasses import dataclass

import numpy as np

from pcpipe.errors import MalformedHeader, TruncatedPayload, UnsupportedProperty


class SourceKind(str, enum.Enum):
    ply_ascii = "ply_ascii"
    ply_binary_le = "ply_binary_le"
    obj = "obj"
    xyz_text = "xyz_text"
    kitti_bin = "kitti_bin"
    npy = "npy"


# file suffixes picked up by ``convert`` for each kind
SUFFIXES = {
    SourceKind.ply_ascii: (".ply",),
    SourceKind.ply_binary_le: (".ply",),
    SourceKind.obj: (".obj",),
    SourceKind.xyz_text: (".xyz", ".txt", ".csv", ".pts"),
    SourceKind.kitti_bin: (".bin",),
    SourceKind.npy: (".npy",),
}


@dataclass
class ParsedCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    intensity: np.ndarray | None = None
    label: int | None = None
    narrowed: bool = False  # float64 input rounded to float32

    def __post_init__(self):
        n = len(self.points)
        if n < 1:
            raise TruncatedPayload("cloud has no points")
        for name in ("normals", "colors", "intensity"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise MalformedHeader(f"{name} has {len(v)} rows for {n} points")

    @property
    def attributes(self) -> list[str]:
        return ["points"] + [a for a in ("normals", "colors", "intensity") if getattr(self, a) is not None]


# -- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_KNOWN = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue")


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedHeader("missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader("no newline after end_header")
    lines = data[:end].decode("ascii", "replace").splitlines()
    fmt = None
    elements = []  # [name, count, [(prop, dtype|None for list)]]
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise MalformedHeader("bad format line")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedHeader(f"bad element line {line!r}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if tok[1] == "list":
                if len(tok) != 5:
                    raise MalformedHeader(f"bad list property {line!r}")
                elements[-1][2].append((tok[4], None))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise UnsupportedProperty(f"property type in {line!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise MalformedHeader(f"unknown header line {line!r}")
    if fmt is None:
        raise MalformedHeader("no format line")
    return fmt, elements, nl + 1


def _vertex_cloud(table: dict) -> ParsedCloud:
    for axis in "xyz":
        if axis not in table:
            raise UnsupportedProperty(f"vertex element lacks '{axis}'")
    pts = np.stack([table[a] for a in "xyz"], axis=1)
    narrowed = pts.dtype == np.float64
    pts = pts.astype(np.float32)
    normals = colors = None
    if all(k in table for k in ("nx", "ny", "nz")):
        normals = np.stack([table[k] for k in ("nx", "ny", "nz")], axis=1).astype(np.float32)
    if all(k in table for k in ("red", "green", "blue")):
        c = np.stack([table[k] for k in ("red", "green", "blue")], axis=1)
        if c.dtype.kind in "iu":
            c = c.astype(np.float32) / 255.0
        colors = np.clip(c.astype(np.float32), 0.0, 1.0)
    return ParsedCloud(pts, normals, colors, narrowed=narrowed)


def parse_ply(data: bytes, binary: bool | None = None) -> ParsedCloud:
    fmt, elements, body = _parse_ply_header(data)
    if fmt == "binary_big_endian":
        raise UnsupportedProperty("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"unknown PLY format {fmt!r}")
    if binary is not None and binary != (fmt == "binary_little_endian"):
        raise MalformedHeader(f"expected {'binary' if binary else 'ascii'} PLY, file says {fmt}")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MalformedHeader("no vertex element")
    vi = names.index("vertex")
    _, count, props = elements[vi]
    if count < 1:
        raise TruncatedPayload("vertex element is empty")
    if any(dt is None for _, dt in props):
        raise UnsupportedProperty("list property inside vertex element")

    if fmt == "ascii":
        lines = data[body:].split(b"\n")
        skip = 0
        for name, n, eprops in elements[:vi]:
            skip += n
        rows = [ln.split() for ln in lines[skip:skip + count]]
        if len(rows) < count or any(len(r) != len(props) for r in rows):
            raise TruncatedPayload(f"expected {count} vertex rows of {len(props)} values")
        try:
            arr = np.array(rows, dtype=np.float64)
        except ValueError as exc:
            raise MalformedHeader(f"non-numeric vertex data: {exc}") from None
        table = {}
        for j, (pname, dt) in enumerate(props):
            col = arr[:, j]
            table[pname] = col.astype(dt) if np.dtype(dt).kind in "iu" else col.astype(
                np.float64 if dt == "f8" else np.float32)
        return _vertex_cloud(table)

    offset = body
    for name, n, eprops in elements[:vi]:
        if any(dt is None for _, dt in eprops):
            raise UnsupportedProperty(f"list property in element {name!r} before vertex")
        offset += n * sum(np.dtype(dt).itemsize for _, dt in eprops)
    rec = np.dtype([(pname, "<" + dt) for pname, dt in props])
    need = offset + count * rec.itemsize
    if len(data) < need:
        raise TruncatedPayload(f"vertex block needs {need} bytes, file has {len(data)}")
    arr = np.frombuffer(data, dtype=rec, count=count, offset=offset)
    return _vertex_cloud({pname: arr[pname] for pname, _ in props})


# -- OBJ --------------------------------------------------------------------

def parse_obj(data: bytes) -> ParsedCloud:
    verts, normals, colors = [], [], []
    for lineno, raw in enumerate(data.decode("utf-8", "replace").splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        head = tok[0]
        try:
            if head == "v":
                if len(tok) not in (4, 5, 7):
                    raise MalformedHeader(f"line {lineno}: vertex needs 3 coordinates")
                verts.append([float(t) for t in tok[1:4]])
                if len(tok) == 7:
                    colors.append([float(t) for t in tok[4:7]])
            elif head == "vn":
                if len(tok) != 4:
                    raise MalformedHeader(f"line {lineno}: normal needs 3 components")
                normals.append([float(t) for t in tok[1:4]])
            elif head in ("vt", "usemtl", "mtllib"):
                raise UnsupportedProperty(f"line {lineno}: textured OBJ ({head}) is not supported")
        except ValueError:
            raise MalformedHeader(f"line {lineno}: non-numeric value") from None
    if not verts:
        raise TruncatedPayload("no vertices")
    pts = np.array(verts, dtype=np.float32)
    nrm = None
    if normals:
        if len(normals) != len(verts):
            raise UnsupportedProperty(f"{len(normals)} normals for {len(verts)} vertices")
        nrm = np.array(normals, dtype=np.float32)
    col = None
    if colors:
        if len(colors) != len(verts):
            raise MalformedHeader("vertex colors given for only some vertices")
        col = np.clip(np.array(colors, dtype=np.float32), 0.0, 1.0)
    return ParsedCloud(pts, nrm, col)


# -- XYZ / TXT / CSV --------------------------------------------------------

_SPLIT = re.compile(rb"[,\s]+")


def parse_xyz(data: bytes) -> ParsedCloud:
    rows = []
    width = None
    for lineno, line in enumerate(data.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(b"#"):
            continue
        tok = _SPLIT.split(line)
        if width is None:
            width = len(tok)
            if width not in (3, 6):
                raise MalformedHeader(f"line {lineno}: expected 3 or 6 columns, got {width}")
        elif len(tok) != width:
            raise TruncatedPayload(f"line {lineno}: {len(tok)} columns, expected {width}")
        rows.append(tok)
    if not rows:
        raise TruncatedPayload("no points")
    try:
        arr = np.array([[float(t) for t in r] for r in rows], dtype=np.float64)
    except ValueError:
        raise MalformedHeader("non-numeric value in point list") from None
    # float32 nearest rounding of the decimal text
    pts = arr[:, :3].astype(np.float32)
    nrm = arr[:, 3:6].astype(np.float32) if width == 6 else None
    return ParsedCloud(pts, nrm)


# -- KITTI velodyne BIN -----------------------------------------------------

def parse_kitti_bin(data: bytes) -> ParsedCloud:
    if len(data) % 16:
        raise TruncatedPayload(f"{len(data)} bytes is not a whole number of float32 quadruples")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return ParsedCloud(arr[:, :3].copy(), intensity=arr[:, 3].copy())


# -- NPY --------------------------------------------------------------------

NPY_MAGIC = b"\x93NUMPY"


def parse_npy(data: bytes) -> ParsedCloud:
    if not data.startswith(NPY_MAGIC) or len(data) < 10:
        raise MalformedHeader("missing NPY magic")
    major, minor = data[6], data[7]
    if (major, minor) != (1, 0):
        raise MalformedHeader(f"NPY version {major}.{minor} (only 1.0 is read)")
    (hlen,) = struct.unpack_from("<H", data, 8)
    start = 10 + hlen
    if len(data) < start:
        raise TruncatedPayload("NPY header truncated")
    try:
        meta = ast.literal_eval(data[10:start].decode("latin1"))
        descr, fortran, shape = meta["descr"], meta["fortran_order"], tuple(meta["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError):
        raise MalformedHeader("unreadable NPY header dictionary") from None
    if fortran:
        raise UnsupportedProperty("Fortran-order arrays are not supported")
    if descr not in ("<f4", "<f8"):
        raise UnsupportedProperty(f"dtype {descr!r} (need little-endian float32/float64)")
    if len(shape) != 2 or shape[1] not in (3, 6):
        raise UnsupportedProperty(f"shape {shape} (need (N, 3) or (N, 6))")
    dt = np.dtype(descr)
    count = shape[0] * shape[1]
    if len(data) - start < count * dt.itemsize:
        raise TruncatedPayload(f"NPY payload needs {count * dt.itemsize} bytes, has {len(data) - start}")
    arr = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(shape)
    narrowed = dt == np.float64
    arr = arr.astype(np.float32)
    nrm = arr[:, 3:6].copy() if shape[1] == 6 else None
    return ParsedCloud(np.ascontiguousarray(arr[:, :3]), nrm, narrowed=narrowed)


_PARSERS = {
    SourceKind.ply_ascii: lambda b: parse_ply(b, binary=False),
    SourceKind.ply_binary_le: lambda b: parse_ply(b, binary=True),
    SourceKind.obj: parse_obj,
    SourceKind.xyz_text: parse_xyz,
    SourceKind.kitti_bin: parse_kitti_bin,
    SourceKind.npy: parse_npy,
}


def parse_source(data: bytes, kind) -> ParsedCloud:
    if not data:
        raise TruncatedPayload("empty input")
    return _PARSERS[SourceKind(kind)](bytes(data))
