"""Benchmark harness: timed pipeline passes with a CPU/memory sampler and run-to-run deviation."""
from __future__ import annotations

import csv
import gc
import hashlib
import io
import os
import statistics
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
import psutil

from pcpipe.index import build_index
from pcpipe.pipeline import Pipeline, PipelineGraph
from pcpipe.record import DatasetReader, open_dataset

REPORT_VERSION = 1
SEED_ENV = "PCPIPE_SEED"
CSV_COLUMNS = ["run", "batch_index", "epoch", "items", "items_per_sec"]


class Sampler(threading.Thread):
    """Samples process CPU% and memory% (of total system memory) at a fixed interval."""

    def __init__(self, interval_ms: float = 10.0):
        super().__init__(name="bench-sampler", daemon=True)
        self.interval = interval_ms / 1000.0
        self.proc = psutil.Process()
        self.cpu: list[float] = []
        self.mem: list[float] = []
        self.peak_rss = 0
        self._halt = threading.Event()

    def run(self):
        self.proc.cpu_percent(None)
        while not self._halt.wait(self.interval):
            with self.proc.oneshot():
                self.cpu.append(self.proc.cpu_percent(None))
                self.mem.append(self.proc.memory_percent())
                self.peak_rss = max(self.peak_rss, self.proc.memory_info().rss)

    def stop(self):
        self._halt.set()
        self.join(timeout=2)


@dataclass
class RunRecord:
    cost_time_s: float
    avg_cpu_percent: float
    avg_mem_percent: float
    peak_rss_bytes: int
    items_per_sec: list  # one entry per batch
    batches: int
    items: int
    digest: str  # hash of the batch contents; equal for equal seeds
    rows: list = field(default_factory=list, repr=False)  # pipeline per-batch stats, for the CSV

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "rows"}


@dataclass
class BenchReport:
    dataset: str
    graph: dict
    repeats: int
    epochs: int
    sample_interval_ms: float
    runs: list = field(default_factory=list)

    def _mean(self, key):
        return statistics.fmean(getattr(r, key) for r in self.runs)

    @property
    def cost_time_s(self) -> float:
        return self._mean("cost_time_s")

    @property
    def avg_cpu_percent(self) -> float:
        return self._mean("avg_cpu_percent")

    @property
    def avg_mem_percent(self) -> float:
        return self._mean("avg_mem_percent")

    @property
    def peak_rss_bytes(self) -> int:
        return max(r.peak_rss_bytes for r in self.runs)

    @property
    def items_per_sec(self) -> list:
        """Per-batch throughput of the last run."""
        return self.runs[-1].items_per_sec

    @property
    def deviation(self) -> float | None:
        """Sample standard deviation of the run times over their mean; undefined for one run."""
        if len(self.runs) < 2:
            return None
        times = [r.cost_time_s for r in self.runs]
        return statistics.stdev(times) / statistics.fmean(times)

    def to_json(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "dataset": self.dataset,
            "graph": self.graph,
            "repeats": self.repeats,
            "epochs": self.epochs,
            "sample_interval_ms": self.sample_interval_ms,
            "cost_time_s": self.cost_time_s,
            "avg_cpu_percent": self.avg_cpu_percent,
            "avg_mem_percent": self.avg_mem_percent,
            "peak_rss_bytes": self.peak_rss_bytes,
            "deviation": self.deviation,
            "items_per_sec": list(self.items_per_sec),
            "runs": [r.to_json() for r in self.runs],
        }

    def write_csv(self, fh=None) -> str:
        buf = fh or io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_COLUMNS)
        for i, r in enumerate(self.runs):
            for row in r.rows:
                w.writerow([i, row["batch_index"], row["epoch"], row["items"], f"{row['items_per_sec']:.3f}"])
        return buf.getvalue() if fh is None else ""


def _digest(h, batch):
    h.update(f"{batch.epoch}:{batch.batch_index}:{batch.sample_ids}".encode())
    for k in sorted(batch.fields):
        v = batch.fields[k]
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes() if isinstance(v, np.ndarray) else repr(v).encode())


def run_once(graph: PipelineGraph, headers, index, epochs: int = 1, sample_interval_ms: float = 10.0,
             cache_groups: int = 8, disable_gc: bool = True) -> RunRecord:
    """One full pass; the clock starts when the first (warm-up) batch arrives.

    Like timeit, the collector is flushed before the pass and paused during it
    so collections do not land at random points of the timed region.
    """
    reader = DatasetReader(headers, cache_groups=cache_groups)
    sampler = Sampler(sample_interval_ms)
    h = hashlib.sha256()
    t0 = None
    items = 0
    gc.collect()
    was_enabled = gc.isenabled()
    if disable_gc:
        gc.disable()
    sampler.start()
    try:
        with Pipeline(graph, index, reader, epochs=epochs) as p:
            for b in p:
                _digest(h, b)
                if t0 is None:
                    t0 = time.perf_counter()
                    continue
                items += len(b)
            t1 = time.perf_counter()
            rows = list(p.stats.rows)
    finally:
        sampler.stop()
        if was_enabled:
            gc.enable()
    rec = RunRecord(
        cost_time_s=t1 - (t0 or t1),
        avg_cpu_percent=statistics.fmean(sampler.cpu) if sampler.cpu else 0.0,
        avg_mem_percent=statistics.fmean(sampler.mem) if sampler.mem else 0.0,
        peak_rss_bytes=sampler.peak_rss or psutil.Process().memory_info().rss,
        items_per_sec=[r["items_per_sec"] for r in rows],
        batches=len(rows),
        items=items,
        digest=h.hexdigest(),
        rows=rows,
    )
    return rec


def run_benchmark(graph: PipelineGraph, dataset, repeats: int = 3, sample_interval_ms: float = 10.0,
                  epochs: int = 1, base_seed: int | None = None, disable_gc: bool = True) -> BenchReport:
    """Run ``repeats`` full passes of ``graph`` over ``dataset`` (a .pcrecord path or list of headers)."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    env = os.environ.get(SEED_ENV)
    if env is not None:
        base_seed = int(env)
    if base_seed is not None:
        graph = replace(graph, base_seed=base_seed)
    headers = open_dataset(dataset) if isinstance(dataset, (str, os.PathLike)) else list(dataset)
    index = build_index(headers)
    report = BenchReport(str(dataset) if isinstance(dataset, (str, os.PathLike)) else "<headers>", graph.to_json(),
                         repeats, epochs, sample_interval_ms)
    for _ in range(repeats):
        report.runs.append(run_once(graph, headers, index, epochs, sample_interval_ms, disable_gc=disable_gc))
    return report


__all__ = ["BenchReport", "CSV_COLUMNS", "REPORT_VERSION", "RunRecord", "SEED_ENV", "Sampler", "run_benchmark",
           "run_once"]
