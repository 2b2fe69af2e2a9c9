"""Pipeline monitoring: a sampler thread that turns operator counters into MetricsSample records."""
from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field

import psutil

from pcpipe.errors import InsufficientSamples, PipelineStopped

log = logging.getLogger(__name__)

MIN_WINDOW = 30
EMPTY_RATIO_THRESHOLD = 0.3


@dataclass(frozen=True)
class MetricsSample:
    timestamp: float
    delay_ms: dict  # op_id -> processing time per item
    queue_util: dict  # op_id -> occupancy / capacity of the op's output queues
    cpu_percent: float
    sink_empty_ratio: float
    rss_bytes: int
    sink_polls: int = 0  # polls of the device queue during this interval
    sink_empty_polls: int = 0

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp, "delay_ms": dict(self.delay_ms), "queue_util": dict(self.queue_util),
                "cpu_percent": self.cpu_percent, "sink_empty_ratio": self.sink_empty_ratio,
                "rss_bytes": self.rss_bytes}


@dataclass
class Monitor:
    """Independent sampling thread; reads counters only, never blocks the pipeline."""

    pipeline: object
    interval_ms: float = 10.0
    on_sample: object = None
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if self.interval_ms <= 0:
            raise ValueError("interval_ms must be positive")
        # a held lock doubles as the stop signal: acquire(timeout) is the cheapest timed wait available
        self._stop = threading.Lock()
        self._stop.acquire()
        self._stopped = False
        self._lock = threading.Lock()
        self._proc = psutil.Process()
        self._cpu = None
        self._thread = threading.Thread(target=self._run, name="monitor", daemon=True)
        self._prev = None
        self._delay: dict = {}

    def start(self) -> "Monitor":
        if self._thread.ident is not None:
            return self
        snap = self.pipeline.snapshot()
        if not snap["running"]:
            raise PipelineStopped("pipeline is not running")
        self._cpu = self._cpu_time()
        self._prev = snap
        self._thread.start()
        return self

    def stop(self):
        if not self._stopped:
            self._stopped = True
            self._stop.release()
        if self._thread.is_alive() and self._thread is not threading.current_thread():
            self._thread.join(timeout=2)

    @property
    def running(self) -> bool:
        return self._thread.is_alive()

    @staticmethod
    def _cpu_time() -> float:
        t = os.times()
        return t.user + t.system

    def _sample(self, snap) -> MetricsSample:
        prev = self._prev
        delay, util = {}, {}
        for op, cur in snap["ops"].items():
            old = prev["ops"].get(op)
            d_items = cur["items"] - (old["items"] if old else 0)
            if d_items > 0:
                self._delay[op] = 1000.0 * (cur["busy_s"] - (old["busy_s"] if old else 0.0)) / d_items
            delay[op] = max(0.0, self._delay.get(op, 0.0))  # carried forward across idle ticks
            cap = cur["queue_capacity"]
            util[op] = min(1.0, cur["queue_used"] / cap) if cap else 0.0
        cpu = self._cpu_time()
        wall = snap["time"] - prev["time"]
        cpu_pct = 100.0 * (cpu - self._cpu) / wall if wall > 0 else 0.0
        self._cpu = cpu
        polls = snap["sink_polls"] - prev["sink_polls"]
        empty = snap["sink_empty_polls"] - prev["sink_empty_polls"]
        return MetricsSample(
            timestamp=snap["time"], delay_ms=delay, queue_util=util, cpu_percent=max(0.0, cpu_pct),
            sink_empty_ratio=empty / polls if polls else 0.0, rss_bytes=self._proc.memory_info().rss,
            sink_polls=polls, sink_empty_polls=empty)

    def _run(self):
        step = self.interval_ms / 1000.0
        deadline = time.perf_counter()
        while True:
            deadline += step
            pause = deadline - time.perf_counter()
            if pause > 0:
                if self._stop.acquire(timeout=pause):
                    break
            elif self._stopped:
                break
            else:
                deadline = time.perf_counter()  # fell behind; do not burst to catch up
            snap = self.pipeline.snapshot()
            s = self._sample(snap)
            self._prev = snap
            with self._lock:
                self.samples.append(s)
            if self.on_sample is not None:
                self.on_sample(s)
            if not snap["running"]:
                break

    def window(self, n: int | None = None, since: float | None = None) -> list[MetricsSample]:
        with self._lock:
            out = list(self.samples)
        if since is not None:
            out = [s for s in out if s.timestamp >= since]
        return out if n is None else out[-n:]

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def collect_metrics(pipeline, interval_ms: float = 10.0, on_sample=None) -> Monitor:
    """Start sampling ``pipeline`` every ``interval_ms``; returns the running Monitor."""
    return Monitor(pipeline, interval_ms, on_sample).start()


def detect_bottleneck(window, threshold: float = EMPTY_RATIO_THRESHOLD) -> str:
    """``data_side`` if the consumer found the device queue empty on more than ``threshold`` of its polls."""
    window = list(window)
    if len(window) < MIN_WINDOW:
        raise InsufficientSamples(f"need at least {MIN_WINDOW} samples, got {len(window)}")
    polls = sum(s.sink_polls for s in window)
    if polls:
        ratio = sum(s.sink_empty_polls for s in window) / polls
    else:
        ratio = sum(s.sink_empty_ratio for s in window) / len(window)
    return "data_side" if ratio > threshold else "network_side"


__all__ = ["EMPTY_RATIO_THRESHOLD", "MIN_WINDOW", "MetricsSample", "Monitor", "collect_metrics",
           "detect_bottleneck"]
