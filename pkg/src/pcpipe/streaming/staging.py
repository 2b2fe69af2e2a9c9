"""Local staging of streamed slice files under a disk budget.

Roles: only the download worker writes files, only the evict worker deletes
them, and the processing pipeline reads them. All three meet in
``StagingArea``, which keeps the per-file state, the byte accounting and an
access log.

Budget rules:
  * a download reserves its size before fetching and waits until
    ``staged + size <= quota`` (or nothing else is staged), so peak staged
    bytes never exceed ``quota + max slice size``;
  * the evictor runs when staged bytes pass ``quota * high_watermark`` and the
    remaining downloads of the current plan would not fit, or when a
    reservation is blocked. It deletes fully-consumed files (no pending reads)
    in the order they were consumed.
"""
from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from pcpipe.errors import IntegrityFailure, IoFailure, ObjectNotFound, PcpipeError, StoreUnreachable
from pcpipe.streaming.store import ObjectStore, crc32_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiskBudget:
    quota_bytes: int
    high_watermark: float = 0.8
    staging_dir: str = "staging"

    def __post_init__(self):
        if self.quota_bytes <= 0:
            raise ValueError("quota_bytes must be positive")
        if not 0 < self.high_watermark <= 1:
            raise ValueError("high_watermark must be in (0, 1]")


@dataclass
class FileState:
    size: int
    state: str = "downloading"  # downloading | ready | evicted
    pending: int = 0  # planned reads not yet done
    ready_epoch: int = -1
    consumed_seq: int | None = None


@dataclass(frozen=True)
class DownloadEvent:
    name: str
    bytes: int
    attempts: int
    verified: bool
    seconds: float


@dataclass
class StagingStats:
    peak_bytes: int = 0
    downloads: list = field(default_factory=list)
    evictions: list = field(default_factory=list)  # names in eviction order
    access_log: list = field(default_factory=list)  # (kind, name)
    violations: list = field(default_factory=list)  # reads of files that were not ready


class StagingArea:
    def __init__(self, budget: DiskBudget):
        self.budget = budget
        self.dir = Path(budget.staging_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, FileState] = {}
        self.staged_bytes = 0
        self.stats = StagingStats()
        self.error: BaseException | None = None
        self._cond = threading.Condition()
        self._seq = itertools.count()
        self._blocked_need = 0
        self._demand: dict[str, int] = {}  # planned objects of the current epoch not yet staged
        self._closed = False

    # -- accounting helpers (lock held)
    def _log(self, kind, name):
        self.stats.access_log.append((kind, name))

    def _demand_bytes(self) -> int:
        return sum(self._demand.values())

    def pressure(self) -> bool:
        quota = self.budget.quota_bytes
        if self._blocked_need and self.staged_bytes + self._blocked_need > quota:
            return True
        return (self.staged_bytes > quota * self.budget.high_watermark
                and self.staged_bytes + self._demand_bytes() > quota)

    def candidates(self) -> list[str]:
        done = [(st.consumed_seq, n) for n, st in self.files.items()
                if st.state == "ready" and st.pending == 0 and st.consumed_seq is not None]
        return [n for _, n in sorted(done)]

    def _check(self):
        if self.error is not None:
            raise self.error
        if self._closed:
            raise PcpipeError("staging area closed")

    # -- download side
    def set_plan(self, requests):
        with self._cond:
            self._demand = {r.object_name: r.expected_size for r in requests
                            if self.files.get(r.object_name, FileState(0, "evicted")).state != "ready"}
            self._cond.notify_all()

    def make_available(self, name: str, epoch: int, reads: int) -> bool:
        """Pin an already staged file for ``epoch``; False if it has to be downloaded."""
        with self._cond:
            st = self.files.get(name)
            if st is None or st.state != "ready":
                return False
            st.pending += reads
            st.ready_epoch = max(st.ready_epoch, epoch)
            st.consumed_seq = None if st.pending else st.consumed_seq
            self._demand.pop(name, None)
            self._cond.notify_all()
            return True

    def reserve(self, name: str, size: int):
        with self._cond:
            quota = self.budget.quota_bytes
            while not (self.staged_bytes + size <= quota or self.staged_bytes == 0):
                self._check()
                self._blocked_need = size
                self._cond.notify_all()
                self._cond.wait(0.1)
            self._check()
            self._blocked_need = 0
            self.staged_bytes += size
            self.stats.peak_bytes = max(self.stats.peak_bytes, self.staged_bytes)
            self.files[name] = FileState(size)
            self._log("reserve", name)

    def commit(self, name: str, epoch: int, reads: int):
        with self._cond:
            st = self.files[name]
            st.state, st.pending, st.ready_epoch, st.consumed_seq = "ready", reads, epoch, None
            self._demand.pop(name, None)
            self._log("ready", name)
            self._cond.notify_all()

    def release_reservation(self, name: str):
        with self._cond:
            st = self.files.pop(name, None)
            if st is not None:
                self.staged_bytes -= st.size
            self._cond.notify_all()

    # -- reader side
    def wait_ready(self, name: str, epoch: int):
        with self._cond:
            while True:
                if self.error is not None:
                    raise self.error
                st = self.files.get(name)
                if st is not None and st.state == "ready" and st.ready_epoch >= epoch:
                    return
                if self._closed:
                    raise PcpipeError("staging area closed")
                self._cond.wait(0.1)

    def done_read(self, name: str):
        with self._cond:
            st = self.files[name]
            st.pending -= 1
            if st.pending == 0:
                st.consumed_seq = next(self._seq)
                self._cond.notify_all()

    def opener(self, path, mode="rb"):
        """File opener handed to the dataset reader; logs and guards every slice read."""
        name = Path(path).name
        with self._cond:
            st = self.files.get(name)
            self._log("open", name)
            if st is None or st.state != "ready":
                self.stats.violations.append(name)
                raise IoFailure(f"read of {name} while it is {st.state if st else 'absent'}")
        return open(path, mode)

    # -- evict side
    def evict_once(self) -> list[str]:
        """Evict while under pressure; returns the names deleted."""
        out = []
        with self._cond:
            while self.pressure():
                cands = self.candidates()
                if not cands:
                    break
                name = cands[0]
                st = self.files[name]
                try:
                    os.remove(self.dir / name)
                except FileNotFoundError:
                    pass
                st.state = "evicted"
                self.staged_bytes -= st.size
                self.stats.evictions.append(name)
                self._log("evict", name)
                out.append(name)
            if out:
                self._cond.notify_all()
        return out

    def wait_for_work(self, timeout=0.05):
        with self._cond:
            if not self._closed and not (self.pressure() and self.candidates()):
                self._cond.wait(timeout)

    # -- lifecycle
    def fail(self, exc: BaseException):
        with self._cond:
            if self.error is None:
                self.error = exc
            self._cond.notify_all()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


def download_object(store: ObjectStore, request, staging: StagingArea, epoch: int = 0) -> DownloadEvent:
    """Fetch one object into the staging dir: reserve, verify size and CRC32 (one retry), then rename."""
    name = request.object_name
    staging.reserve(name, request.expected_size)
    t0 = time.perf_counter()
    try:
        for attempt in (1, 2):
            try:
                data = store.get(name)
            except (StoreUnreachable, ObjectNotFound) as exc:
                raise StoreUnreachable(f"download of {name} failed: {exc}", request=request) from exc
            if len(data) == request.expected_size and crc32_of(data) == request.expected_crc32:
                tmp = staging.dir / f".{name}.part"
                with open(tmp, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, staging.dir / name)
                ev = DownloadEvent(name, len(data), attempt, True, time.perf_counter() - t0)
                staging.commit(name, epoch, request.reads)
                staging.stats.downloads.append(ev)
                return ev
            log.warning("%s: integrity check failed on attempt %d (%d bytes, crc %08x)",
                        name, attempt, len(data), crc32_of(data))
        staging.stats.downloads.append(DownloadEvent(name, len(data), 2, False, time.perf_counter() - t0))
        raise IntegrityFailure(f"{name}: size/CRC32 mismatch after retry")
    except BaseException:
        staging.release_reservation(name)
        raise


class DownloadWorker(threading.Thread):
    """Tier 1: walks the per-epoch plans in order and stages each object."""

    def __init__(self, store: ObjectStore, staging: StagingArea, plans):
        super().__init__(name="download", daemon=True)
        self.store = store
        self.staging = staging
        self.plans = plans  # iterable of (epoch, [DownloadRequest])

    def run(self):
        try:
            for epoch, plan in self.plans:
                self.staging.set_plan(plan)
                for req in plan:
                    if self.staging.closed:
                        return
                    if not self.staging.make_available(req.object_name, epoch, req.reads):
                        download_object(self.store, req, self.staging, epoch)
        except BaseException as exc:  # noqa: BLE001 - handed to the readers
            if not self.staging.closed:
                log.error("download worker stopped: %s", exc)
            self.staging.fail(exc)


class EvictWorker(threading.Thread):
    def __init__(self, staging: StagingArea):
        super().__init__(name="evict", daemon=True)
        self.staging = staging

    def run(self):
        while not self.staging.closed:
            self.staging.wait_for_work()
            for name in self.staging.evict_once():
                log.debug("evicted %s", name)
