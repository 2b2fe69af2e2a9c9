"""Synthetic source corpora for tests and benchmarks.

``cad_cloud`` imitates ModelNet-style text files: points sampled face by face
on a randomly rotated polyhedron, with the face normal on every row.
``lidar_sweep`` imitates a KITTI velodyne scan: rings of range returns over a
ground plane and a few boxes, row order = ring, then azimuth.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

CLASSES = ("airplane", "bathtub", "chair", "lamp", "table")


def _rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    a, b, c, d = q / np.linalg.norm(q)
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def cad_cloud(rng, n_points: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """(points, normals) sampled on the six faces of a rotated box."""
    dims = rng.uniform(0.2, 1.0, 3)
    rot = _rotation(rng)
    counts = np.full(6, n_points // 6)
    counts[: n_points % 6] += 1
    pts, nrm = [], []
    k = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            p = rng.uniform(-0.5, 0.5, (counts[k], 3)) * dims
            p[:, axis] = sign * dims[axis] / 2
            nv = np.zeros(3)
            nv[axis] = sign
            pts.append(p)
            nrm.append(np.tile(nv, (counts[k], 1)))
            k += 1
    return (np.vstack(pts) @ rot.T).astype(np.float32), (np.vstack(nrm) @ rot.T).astype(np.float32)


def format_xyz(points, normals=None, fmt="%.6f", sep=",") -> bytes:
    cols = points if normals is None else np.hstack([points, normals])
    return ("\n".join(sep.join(fmt % v for v in row) for row in cols) + "\n").encode()


def write_xyz_corpus(root, total_bytes: int = 1 << 20, n_points: int = 1024, classes=CLASSES,
                     seed: int = 0, normals: bool = True) -> list[Path]:
    """Write CAD-like clouds as ``root/<class>/<class>_NNNN.txt`` until ``total_bytes`` is reached."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    written, size, i = [], 0, 0
    while size < total_bytes:
        cls = classes[i % len(classes)]
        pts, nrm = cad_cloud(rng, n_points)
        data = format_xyz(pts, nrm if normals else None)
        path = root / cls / f"{cls}_{i // len(classes):04d}.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        written.append(path)
        size += len(data)
        i += 1
    return written


def lidar_sweep(rng, rings: int = 32, azimuths: int = 1024) -> np.ndarray:
    """(N, 4) float32 rows of x, y, z, intensity for one simulated scan."""
    elev = np.deg2rad(np.linspace(-24.8, 2.0, rings))[:, None]
    az = np.linspace(-np.pi, np.pi, azimuths, endpoint=False)[None, :]
    height = 1.73
    # ground-plane range, capped by a wall of boxes at random distances per sector
    with np.errstate(divide="ignore"):
        ground = np.where(np.sin(elev) < 0, height / -np.sin(elev), np.inf)
    sectors = 16
    walls = rng.uniform(8.0, 40.0, sectors)
    wall = walls[((az + np.pi) / (2 * np.pi) * sectors).astype(int) % sectors] / np.maximum(np.cos(elev), 1e-3)
    r = np.minimum(ground, wall)
    r = r + rng.normal(0, 0.02, r.shape)
    x = r * np.cos(elev) * np.cos(az)
    y = r * np.cos(elev) * np.sin(az)
    z = r * np.sin(elev)
    hit_ground = ground <= wall
    inten = np.where(hit_ground, 0.25, 0.6) + rng.normal(0, 0.05, r.shape)
    inten = np.round(np.clip(inten, 0, 0.99), 2)
    keep = rng.random(r.shape) > 0.05  # dropped returns
    rows = np.stack([x, y, z, inten], axis=-1)[keep]
    return rows.astype(np.float32)


def write_kitti_corpus(root, n_files: int = 8, seed: int = 0, rings: int = 32, azimuths: int = 1024) -> list[Path]:
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(n_files):
        path = root / f"{i:06d}.bin"
        path.write_bytes(lidar_sweep(rng, rings, azimuths).tobytes())
        out.append(path)
    return out
