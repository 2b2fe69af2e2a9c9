"""Per-sample map transforms.

Every transform has the signature ``fn(sample, rng, **params) -> sample`` and
returns a new dict; input arrays are never modified in place. Coordinates live
in ``sample[field]`` (default ``"data"``) as an (N, 3) float32 array; per-point
companions (normals, colors, intensity) are any other array with N rows.
"""
from __future__ import annotations

import hashlib
import time
import zlib

import numpy as np

from pcpipe.errors import EmptyCloud, MissingField, UnknownOp

POINT_FIELD = "data"
NORMAL_FIELD = "normal"
COLOR_FIELD = "color"


def sample_seed(base_seed: int, epoch: int, sample_index: int, op_id: str) -> np.random.SeedSequence:
    """Seed for one (sample, op) pair; independent of scheduling."""
    return np.random.SeedSequence([base_seed & (2**64 - 1), epoch, sample_index, zlib.crc32(op_id.encode())])


def _points(sample, field=POINT_FIELD, allow_empty=False) -> np.ndarray:
    if field not in sample:
        raise MissingField(f"sample has no field {field!r}")
    v = sample[field]
    p = np.frombuffer(v, dtype="<f4") if isinstance(v, (bytes, bytearray)) else np.asarray(v)
    p = p.reshape(-1, 3)
    if len(p) == 0 and not allow_empty:
        raise EmptyCloud(f"field {field!r} holds no points")
    return p


def _per_point(sample, field, n):
    """Names of array fields (other than ``field``) carrying one row per point."""
    return [k for k, v in sample.items()
            if k != field and isinstance(v, np.ndarray) and v.ndim >= 1 and len(v) == n]


def _with(sample, **updates):
    out = dict(sample)
    out.update(updates)
    return out


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def normalize(sample, rng, field=POINT_FIELD):
    p = _points(sample, field).astype(np.float64)
    c = p.mean(axis=0)
    s = np.sqrt(((p - c) ** 2).sum(axis=1)).max()
    out = np.zeros_like(p) if s == 0 else (p - c) / s
    return _with(sample, **{field: _f32(out)})


def translate(sample, rng, field=POINT_FIELD, low=-0.2, high=0.2):
    p = _points(sample, field)
    t = rng.uniform(low, high, 3)
    return _with(sample, **{field: _f32(p + t)})


def jitter(sample, rng, field=POINT_FIELD, sigma=0.01, clip=0.05):
    p = _points(sample, field)
    noise = np.clip(rng.normal(0.0, sigma, p.shape), -clip, clip)
    return _with(sample, **{field: _f32(p + noise)})


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate(sample, rng, field=POINT_FIELD, normal_field=NORMAL_FIELD, angle=None):
    """Rotation about z by ``angle`` (radians), drawn from U[0, 2pi) when not given."""
    theta = rng.uniform(0.0, 2 * np.pi) if angle is None else float(angle)
    r = _rot_z(theta)
    upd = {field: _f32(_points(sample, field) @ r.T)}
    if normal_field in sample:
        upd[normal_field] = _f32(_points(sample, normal_field, allow_empty=True) @ r.T)
    return _with(sample, **upd)


def random_scale(sample, rng, field=POINT_FIELD, low=0.8, high=1.25):
    p = _points(sample, field)
    return _with(sample, **{field: _f32(p * rng.uniform(low, high))})


def flip_yz(sample, rng, field=POINT_FIELD, normal_field=NORMAL_FIELD, p=0.5):
    """Reflect across the YZ plane (x -> -x) with probability ``p``."""
    pts = _points(sample, field)
    if rng.random() >= p:
        return _with(sample, **{field: pts})
    flip = np.array([-1.0, 1.0, 1.0], dtype=np.float32)
    upd = {field: _f32(pts * flip)}
    if normal_field in sample:
        upd[normal_field] = _f32(_points(sample, normal_field, allow_empty=True) * flip)
    return _with(sample, **upd)


def color_augment(sample, rng, field=COLOR_FIELD, delta=0.1):
    c = _points(sample, field)
    shift = rng.uniform(-delta, delta, 3)
    return _with(sample, **{field: _f32(np.clip(c + shift, 0.0, 1.0))})


def _take(sample, field, idx):
    p = _points(sample, field, allow_empty=True)
    upd = {k: np.ascontiguousarray(sample[k][idx]) for k in _per_point(sample, field, len(p))}
    upd[field] = np.ascontiguousarray(p[idx])
    return _with(sample, **upd)


def random_crop(sample, rng, field=POINT_FIELD, low=0.7, high=1.0):
    """Keep points inside a random axis-aligned box covering a fraction of each axis."""
    p = _points(sample, field)
    lo, hi = p.min(axis=0), p.max(axis=0)
    extent = hi - lo
    f = rng.uniform(low, high, 3)
    start = lo + rng.uniform(0.0, 1.0, 3) * (1.0 - f) * extent
    stop = start + f * extent
    mask = np.all((p >= start) & (p <= stop), axis=1)
    if not mask.any():
        return _with(sample, **{field: p})
    return _take(sample, field, np.flatnonzero(mask))


def downsample(sample, rng, field=POINT_FIELD, num_points=1024):
    p = _points(sample, field)
    idx = rng.choice(len(p), size=num_points, replace=len(p) < num_points)
    return _take(sample, field, idx)


def sleep(sample, rng, ms=1.0):
    """Synthetic latency (releases the GIL; does not use CPU)."""
    time.sleep(ms / 1000.0)
    return sample


_BURN_CHUNK = 64 * 1024
_burn_rate: list[float] = []  # chunks per second, measured once per process


def burn_chunks(ms: float) -> int:
    """Number of hash chunks that take about ``ms`` on this machine (calibrated once)."""
    if not _burn_rate:
        buf = bytes(_BURN_CHUNK)
        n, t0 = 0, time.perf_counter()
        while time.perf_counter() - t0 < 0.05:
            hashlib.sha256(buf).digest()
            n += 1
        _burn_rate.append(n / (time.perf_counter() - t0))
    return max(1, round(_burn_rate[0] * ms / 1000.0))


_BURN_BUF = bytes(_BURN_CHUNK)


def burn(sample, rng, ms=2.0, chunks=None):
    """Fixed CPU-bound work: SHA-256 over a calibrated number of chunks.

    hashlib drops the GIL for large buffers, so workers burn in parallel.
    """
    for _ in range(chunks or burn_chunks(ms)):
        hashlib.sha256(_BURN_BUF).digest()
    return sample


TRANSFORMS = {
    "normalize": normalize,
    "translate": translate,
    "jitter": jitter,
    "rotate": rotate,
    "random_scale": random_scale,
    "flip_yz": flip_yz,
    "color_augment": color_augment,
    "random_crop": random_crop,
    "downsample": downsample,
    "sleep": sleep,
    "burn": burn,
}
# all of the above are per-sample and stateless
FUSABLE = frozenset(TRANSFORMS)


def get_transform(name: str):
    try:
        return TRANSFORMS[name]
    except KeyError:
        raise UnknownOp(f"unknown transform {name!r}") from None


def apply_map(kind: str, params: dict, sample: dict, rng_seed) -> dict:
    """Apply one named transform with a generator seeded from ``rng_seed``."""
    fn = get_transform(kind)
    return fn(sample, np.random.default_rng(rng_seed), **(params or {}))
