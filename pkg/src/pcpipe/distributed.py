"""Shard-based data parallelism, simulated with one thread per device.

Toy model: linear regression on a per-sample feature vector
``x = (mean_x, mean_y, mean_z, 1)`` of the sample's points, with the label as
target. Per-sample gradient of ``0.5 * (w.x - y)**2`` is ``(w.x - y) * x``.

Gradients are reduced exactly: every device sums its per-sample gradients as
integers scaled by 2**1074 (each finite float64 is an integer multiple of
2**-1074), the allreduce adds those integers, and the global mean is rounded
to float64 once. The result does not depend on how the global batch was
split, so 1-device and N-device runs agree bit for bit.
"""
from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from pcpipe.errors import NotPadded, PcpipeError, ShapeMismatch
from pcpipe.index import IndexTable, TaskType, pad_for_shards
from pcpipe.pipeline import Pipeline, simple_graph

SCALE_BITS = 1074
FEATURES = 4


@dataclass(frozen=True)
class ShardSpec:
    num_shards: int
    shard_id: int = 0

    def __post_init__(self):
        if self.num_shards < 1 or not 0 <= self.shard_id < self.num_shards:
            raise ValueError(f"invalid shard {self.shard_id} of {self.num_shards}")


@dataclass
class ToyModel:
    params: np.ndarray
    learning_rate: float = 0.01

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        if not np.all(np.isfinite(self.params)):
            raise ValueError("model params must be finite")

    @classmethod
    def initial(cls, seed: int = 0, learning_rate: float = 0.01) -> "ToyModel":
        return cls(np.random.default_rng(seed).normal(size=FEATURES), learning_rate)


def shard_index(index: IndexTable, spec: ShardSpec) -> IndexTable:
    """Strided split: entry i goes to shard i mod num_shards."""
    n = spec.num_shards
    if len(index) % n:
        raise NotPadded(f"{len(index)} entries do not split into {n} equal shards; pad the index first")
    entries = index.sample_meta_list[spec.shard_id::n]
    tasks = index.task_list[spec.shard_id::n]
    return IndexTable(tasks, entries, sum(t is TaskType.kCommonTask for t in tasks))


def allreduce_mean(grads: Sequence) -> np.ndarray:
    """Elementwise mean, summed in device-id order."""
    if not grads:
        raise ShapeMismatch("allreduce needs at least one vector")
    vs = [np.asarray(g, dtype=np.float64) for g in grads]
    if len({v.shape for v in vs}) != 1:
        raise ShapeMismatch(f"gradient shapes differ: {sorted({v.shape for v in vs})}")
    total = vs[0].copy()
    for v in vs[1:]:
        total = total + v
    return total / len(vs)


def to_exact(v) -> list[int]:
    """float64 vector -> integers in units of 2**-1074 (lossless)."""
    out = []
    for x in np.asarray(v, dtype=np.float64).ravel():
        num, den = float(x).as_integer_ratio()
        out.append(num << (SCALE_BITS - den.bit_length() + 1))
    return out


def allreduce_exact(partials: Sequence[Sequence[int]], count: int) -> np.ndarray:
    """Mean of exact per-device sums over ``count`` samples, rounded to float64 once."""
    if not partials or len({len(p) for p in partials}) != 1:
        raise ShapeMismatch("partial sums must be non-empty and equally long")
    sums = [sum(col) for col in zip(*partials)]
    return np.array([float(Fraction(s, count << SCALE_BITS)) for s in sums], dtype=np.float64)


def features(points: np.ndarray) -> np.ndarray:
    """(B, N, 3) batch -> (B, 4) feature rows."""
    pts = np.asarray(points, dtype=np.float64)
    m = pts.mean(axis=1) if pts.shape[1] else np.zeros((len(pts), 3))
    return np.hstack([m, np.ones((len(pts), 1))])


def sample_grads(params: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    resid = x @ params - y
    return resid[:, None] * x


def exact_batch_sum(params, batch, point_field="data", label_field="label") -> list[int]:
    x = features(batch.fields[point_field])
    y = np.asarray(batch.fields[label_field], dtype=np.float64)
    acc = [0] * FEATURES
    for g in sample_grads(params, x, y):
        acc = [a + b for a, b in zip(acc, to_exact(g))]
    return acc


@dataclass
class SimReport:
    num_devices: int
    steps: int
    params: list  # final params per device
    step_times_s: list = field(default_factory=list)  # wall time per step (slowest device)
    device_wall_s: list = field(default_factory=list)
    replica_max_diff: list = field(default_factory=list)  # per step, max |params_d - params_0|
    wall_s: float = 0.0

    @property
    def final_params(self) -> np.ndarray:
        return self.params[0]

    def params_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.final_params).tobytes()).hexdigest()

    def to_json(self) -> dict:
        return {
            "num_devices": self.num_devices,
            "steps": self.steps,
            "final_params": [float(v) for v in self.final_params],
            "final_params_hash": self.params_hash(),
            "replicas_identical": all(d == 0 for d in self.replica_max_diff),
            "step_times_s": self.step_times_s,
            "device_wall_s": self.device_wall_s,
            "wall_s": self.wall_s,
        }


def simulate_data_parallel(index: IndexTable, reader, num_devices: int, num_epochs: int, model0: ToyModel,
                           global_batch: int, maps=(), base_seed: int = 0, map_workers: int = 1,
                           loader=None) -> SimReport:
    """Run the data-parallel loop: broadcast, per-device gradients, allreduce, identical updates.

    ``index`` must already be padded for ``num_devices``; each step consumes
    ``global_batch`` consecutive index entries, ``global_batch / num_devices``
    from each device's strided shard.
    """
    if global_batch % num_devices:
        raise ValueError(f"global batch {global_batch} does not split over {num_devices} devices")
    local_batch = global_batch // num_devices
    shards = [shard_index(index, ShardSpec(num_devices, d)) for d in range(num_devices)]
    graph = simple_graph(list(maps), batch_size=local_batch, workers=map_workers, base_seed=base_seed)
    steps_per_epoch = len(index) // global_batch

    barrier = threading.Barrier(num_devices)
    partials: list = [None] * num_devices
    reduced: list = [None]
    params = [model0.params.copy() for _ in range(num_devices)]  # broadcast
    lr = model0.learning_rate
    step_t = [[] for _ in range(num_devices)]
    diffs: list = []
    wall = [0.0] * num_devices
    errors: list = []

    def device(d):
        t_start = time.perf_counter()
        try:
            with Pipeline(graph, shards[d], reader, epochs=num_epochs, loader=loader) as pipe:
                for b in pipe:
                    t0 = time.perf_counter()
                    partials[d] = exact_batch_sum(params[d], b)
                    barrier.wait()
                    if d == 0:
                        reduced[0] = allreduce_exact(partials, global_batch)
                    barrier.wait()
                    params[d] = params[d] - lr * reduced[0]
                    step_t[d].append(time.perf_counter() - t0)
                    barrier.wait()
                    if d == 0:
                        diffs.append(max(float(np.max(np.abs(p - params[0]))) for p in params))
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # noqa: BLE001 - surfaced to the caller below
            errors.append(exc)
            barrier.abort()
        wall[d] = time.perf_counter() - t_start

    t0 = time.perf_counter()
    threads = [threading.Thread(target=device, args=(d,), name=f"device-{d}") for d in range(num_devices)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    steps = len(step_t[0])
    if steps != steps_per_epoch * num_epochs:
        raise PcpipeError(f"devices ran {steps} steps, expected {steps_per_epoch * num_epochs}")
    return SimReport(
        num_devices=num_devices,
        steps=steps,
        params=params,
        step_times_s=[max(ts[i] for ts in step_t) for i in range(steps)],
        device_wall_s=wall,
        replica_max_diff=diffs,
        wall_s=time.perf_counter() - t0,
    )


def simulate_from_dataset(headers, reader, num_devices, **kw) -> SimReport:
    """Pad the dataset's index for ``num_devices`` and simulate."""
    from pcpipe.index import build_index

    index = pad_for_shards(build_index(headers), num_devices)
    return simulate_data_parallel(index, reader, num_devices, **kw)


__all__ = ["ShardSpec", "SimReport", "ToyModel", "allreduce_exact", "allreduce_mean", "shard_index",
           "simulate_data_parallel", "simulate_from_dataset"]
