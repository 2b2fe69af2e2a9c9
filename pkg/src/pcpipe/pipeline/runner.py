"""Threaded execution of a linear operator graph.

Layout of one worker stage (source or map) with W workers::

    input Connector --poll--> dispatcher --round-robin--> inbox[k] -> worker k -> out_queues[k]

The dispatcher is the Connector's single polling routine. A released round
hands arrival ``i`` to worker ``i mod W``, and the next stage's Connector pops
``out_queues`` round-robin, so the stream stays in dataset order at every
hop. The batch op is a single poller that stacks items and feeds the sink
queue, which models the device-side queue the training loop reads from.

Config changes travel on a per-stage control queue and are applied by the
stage's own dispatcher at a round boundary: the old workers each forward a
Reconfigure marker carrying the new output queues, which tells the
downstream poller to switch queue sets after draining the old ones.
"""
from __future__ import annotations

import csv
import io
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

import numpy as np

from pcpipe.errors import GraphError, OutOfBounds, ShapeMismatch, Shutdown, UnknownOp, WorkerPanic
from pcpipe.pipeline.graph import MAX_CAPACITY, MAX_WORKERS, OpNode, PipelineGraph, validate_graph
from pcpipe.pipeline.queues import EOS, BoundedQueue, Connector, Reconfigure
from pcpipe.pipeline.transforms import TRANSFORMS, sample_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Task:
    epoch: int
    position: int
    entry: Any


@dataclass(frozen=True)
class Item:
    epoch: int
    position: int  # position in the index being run
    sample_id: int  # keys the per-sample random streams, so shards and full runs agree
    data: dict


@dataclass
class Batch:
    fields: dict
    epoch: int
    batch_index: int
    positions: tuple
    sample_ids: tuple

    def __len__(self):
        return len(self.positions)


def decode_sample(schema, sample: dict) -> dict:
    """Turn float32 tensor bytes into (N, row_width) arrays; other fields pass through."""
    out = dict(sample)
    for name, ft in schema.fields:
        if ft.is_tensor and isinstance(out.get(name), (bytes, bytearray)):
            out[name] = np.frombuffer(out[name], dtype="<f4").reshape(-1, ft.row_width)
    return out


def reader_loader(reader, schema=None) -> Callable:
    if schema is None:
        schema = next(iter(reader.headers.values())).schema

    def load(entry, epoch, position):
        return decode_sample(schema, reader.read_sample(entry))
    return load


def stack_samples(samples: list[dict]) -> dict:
    out = {}
    for key in samples[0]:
        values = [s[key] for s in samples]
        first = values[0]
        if isinstance(first, np.ndarray):
            shapes = {v.shape for v in values}
            if len(shapes) != 1:
                raise ShapeMismatch(f"field {key!r} has differing shapes {sorted(shapes)} within a batch")
            out[key] = np.stack(values)
        elif isinstance(first, (int, float, np.number)) and not isinstance(first, bool):
            out[key] = np.array(values)
        else:
            out[key] = list(values)
    return out


def map_fn(node: OpNode, base_seed: int) -> Callable[[Item], Item]:
    steps = [(s.op_id, TRANSFORMS[s.transform], s.params) for s in node.steps]

    def run(item: Item) -> Item:
        data = item.data
        for op_id, fn, params in steps:
            rng = np.random.default_rng(sample_seed(base_seed, item.epoch, item.sample_id, op_id))
            try:
                data = fn(data, rng, **params)
            except Exception as exc:
                raise WorkerPanic(op_id, exc) from exc
        return replace(item, data=data)
    return run


@dataclass
class OpCounters:
    busy_s: float = 0.0
    items: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, dt: float, n: int = 1):
        with self.lock:
            self.busy_s += dt
            self.items += n


class _SourceFeed(Connector):
    """Connector whose producer side is the task iterator instead of queues."""

    def __init__(self, tasks: Iterable[Task], consumer_size: int):
        super().__init__([None], consumer_size)
        self._tasks = iter(tasks)

    def pop(self, timeout=None):
        for t in self._tasks:
            return 0, t
        return EOS

    def close(self):
        pass


class _Stage:
    def __init__(self, pipe: "Pipeline", node: OpNode, fn: Callable, conn: Connector):
        self.pipe = pipe
        self.node = node
        self.fn = fn
        self.conn = conn
        self.workers = node.num_workers
        self.capacity = node.queue_capacity
        self.counters = OpCounters()
        self.control: queue.SimpleQueue = queue.SimpleQueue()
        self.out_queues = [pipe.new_queue(self.capacity) for _ in range(self.workers)]
        self.inboxes: list[BoundedQueue] = []
        self.threads: list[threading.Thread] = []

    def start(self):
        self._spawn(self.out_queues)
        t = threading.Thread(target=self.pipe.guard(self.node.id, self._dispatch), name=f"{self.node.id}-poll",
                             daemon=True)
        self.threads.append(t)
        t.start()

    def _spawn(self, outs):
        self.inboxes = [self.pipe.new_queue(1) for _ in outs]
        for k, (inbox, out) in enumerate(zip(self.inboxes, outs)):
            t = threading.Thread(target=self.pipe.guard(self.node.id, self._work, inbox, out),
                                 name=f"{self.node.id}-{k}", daemon=True)
            self.threads.append(t)
            t.start()

    def _work(self, inbox: BoundedQueue, out: BoundedQueue):
        source = self.node.kind == "source"
        while True:
            item = inbox.get()
            if item is EOS or isinstance(item, Reconfigure):
                out.put(item)
                return
            if source:
                self.pipe.track(1)
            t0 = time.perf_counter()
            result = self.fn(item)
            self.counters.add(time.perf_counter() - t0)
            out.put(result)

    def _apply_pending(self):
        workers = capacity = None
        seen = False
        while True:
            try:
                w, c = self.control.get_nowait()
            except queue.Empty:
                break
            seen = True
            workers = w if w is not None else workers
            capacity = c if c is not None else capacity
        if not seen:
            return
        workers = self.workers if workers is None else workers
        capacity = self.capacity if capacity is None else capacity
        if workers == self.workers:
            for q in self.out_queues:
                q.set_capacity(capacity)
            self.capacity = capacity
            return
        outs = [self.pipe.new_queue(capacity) for _ in range(workers)]
        for inbox in self.inboxes:
            inbox.put(Reconfigure(outs))
        self.conn.set_consumers(workers)
        self.workers, self.capacity, self.out_queues = workers, capacity, outs
        self._spawn(outs)
        self.pipe.events.append((self.node.id, "reconfigure", workers, capacity))

    def _dispatch(self):
        conn = self.conn
        while True:
            if conn.expect_consumer == 0:
                self._apply_pending()
            got = conn.poll()
            if got is EOS:
                for k, item in conn.release():
                    self.inboxes[k].put(item)
                for inbox in self.inboxes:
                    inbox.put(EOS)
                return
            for k, item in got:
                self.inboxes[k].put(item)

    def occupancy(self) -> tuple[int, int]:
        qs = list(self.out_queues)
        return sum(len(q) for q in qs), sum(q.capacity for q in qs)


class _BatchStage:
    def __init__(self, pipe: "Pipeline", node: OpNode, conn: Connector, sink: BoundedQueue):
        self.pipe = pipe
        self.node = node
        self.conn = conn
        self.sink = sink
        self.workers = 1
        self.capacity = sink.capacity
        self.counters = OpCounters()
        self.control: queue.SimpleQueue = queue.SimpleQueue()
        self.threads: list[threading.Thread] = []

    def start(self):
        t = threading.Thread(target=self.pipe.guard(self.node.id, self._run), name=f"{self.node.id}-poll",
                             daemon=True)
        self.threads.append(t)
        t.start()

    def _apply_pending(self):
        while True:
            try:
                _, capacity = self.control.get_nowait()
            except queue.Empty:
                return
            if capacity is not None:
                self.sink.set_capacity(capacity)
                self.capacity = capacity

    def _emit(self, acc: list[Item], batch_index: int):
        t0 = time.perf_counter()
        b = Batch(stack_samples([it.data for it in acc]), acc[0].epoch, batch_index,
                  tuple(it.position for it in acc), tuple(it.sample_id for it in acc))
        self.counters.add(time.perf_counter() - t0, len(acc))
        self.sink.put(b)

    def _run(self):
        bs = self.node.batch_size
        acc: list[Item] = []
        batch_index = 0
        epoch = None

        def finish_epoch():
            nonlocal batch_index
            if acc:
                if self.node.drop_remainder:
                    self.pipe.track(-len(acc))
                else:
                    self._emit(list(acc), batch_index)
                acc.clear()
            batch_index = 0

        while True:
            self._apply_pending()
            got = self.conn.poll()
            if got is EOS:
                finish_epoch()
                self.sink.put(EOS)
                return
            for _, item in got:
                if item.epoch != epoch:
                    # also resets batch_index when the last epoch ended on a full batch
                    finish_epoch()
                    epoch = item.epoch
                acc.append(item)
                if len(acc) == bs:
                    self._emit(list(acc), batch_index)
                    acc.clear()
                    batch_index += 1

    def occupancy(self) -> tuple[int, int]:
        return len(self.sink), self.sink.capacity


@dataclass
class RunStats:
    op_ids: list
    rows: list = field(default_factory=list)  # one dict per emitted batch
    busy_s: dict = field(default_factory=dict)
    items: dict = field(default_factory=dict)
    inflight_peak: int = 0
    inflight_bound: int = 0
    sink_polls: int = 0
    sink_empty_polls: int = 0
    wall_s: float = 0.0

    @property
    def items_per_sec(self) -> list[float]:
        return [r["items_per_sec"] for r in self.rows]

    def csv_columns(self) -> list[str]:
        return (["batch_index", "epoch", "items_per_sec"] + [f"busy_fraction.{o}" for o in self.op_ids]
                + [f"queue_occupancy.{o}" for o in self.op_ids])

    def write_csv(self, fh=None) -> str:
        buf = fh or io.StringIO()
        w = csv.writer(buf)
        w.writerow(self.csv_columns())
        for r in self.rows:
            w.writerow([r["batch_index"], r["epoch"], f"{r['items_per_sec']:.3f}"]
                       + [f"{r['busy_fraction'][o]:.4f}" for o in self.op_ids]
                       + [f"{r['queue_occupancy'][o]:.4f}" for o in self.op_ids])
        return buf.getvalue() if fh is None else ""


class Pipeline:
    """A running (or runnable) instance of a graph over an index.

    Iterate to receive Batch objects in dataset order. ``loader(entry, epoch,
    position)`` returns the decoded sample; by default samples come from
    ``reader``.
    """

    def __init__(self, graph: PipelineGraph, index, reader=None, sink_capacity: int | None = None, epochs: int = 1,
                 loader: Callable | None = None):
        validate_graph(graph)
        if len(index) == 0:
            raise GraphError("index is empty")
        if loader is None:
            if reader is None:
                raise GraphError("need a reader or a loader")
            loader = reader_loader(reader)
        self.graph = graph
        self.index = index
        self.epochs = epochs
        self.loader = loader
        self.events: list = []
        self.error: BaseException | None = None
        self._queues: list[BoundedQueue] = []
        self._lock = threading.Lock()
        self._inflight = 0
        self._inflight_peak = 0
        self._closed = False
        self._started = False
        self._done = False

        nodes = graph.nodes
        src = nodes[0]
        tasks = (Task(e, p, entry) for e in range(epochs) for p, entry in enumerate(index))
        load = self.loader
        src_fn = lambda t: Item(t.epoch, t.position, t.entry.sample_id, load(t.entry, t.epoch, t.position))  # noqa: E731
        self.stages: list = [_Stage(self, src, src_fn, _SourceFeed(tasks, src.num_workers))]
        for n in nodes[1:-2]:
            prev = self.stages[-1]
            self.stages.append(_Stage(self, n, map_fn(n, graph.base_seed), Connector(prev.out_queues, n.num_workers)))
        batch_node, sink_node = nodes[-2], nodes[-1]
        self.sink = self.new_queue(sink_capacity or sink_node.queue_capacity)
        self.stages.append(_BatchStage(self, batch_node, Connector(self.stages[-1].out_queues, 1), self.sink))
        self.by_id = {s.node.id: s for s in self.stages}
        self.sink_id = sink_node.id
        self.stats = RunStats([s.node.id for s in self.stages])
        self._t_last = None
        self._t_start = None
        self._last_busy: dict = {}

    # plumbing shared with stages
    def new_queue(self, capacity: int) -> BoundedQueue:
        q = BoundedQueue(capacity)
        with self._lock:
            self._queues.append(q)
            if self._closed:
                q.close()
        return q

    def track(self, n: int):
        with self._lock:
            self._inflight += n
            if self._inflight > self._inflight_peak:
                self._inflight_peak = self._inflight

    def guard(self, op_id: str, fn, *args):
        def run():
            try:
                fn(*args)
            except Shutdown:
                pass
            except WorkerPanic as exc:
                self.fail(exc)
            except BaseException as exc:  # noqa: BLE001 - any worker failure aborts the run
                self.fail(WorkerPanic(op_id, exc))
        return run

    def fail(self, exc: BaseException):
        with self._lock:
            if self.error is None:
                self.error = exc
                log.error("pipeline aborted: %s", exc)
        self._close_queues()

    def _close_queues(self):
        with self._lock:
            self._closed = True
            qs = list(self._queues)
        for q in qs:
            q.close()

    # public API
    def start(self) -> "Pipeline":
        if not self._started:
            self._started = True
            self._t_start = self._t_last = time.perf_counter()
            self._last_busy = {s.node.id: 0.0 for s in self.stages}
            for s in self.stages:
                s.start()
        return self

    def inflight_bound(self) -> int:
        """Upper bound on loaded-but-undelivered samples for the current config.

        Per worker stage: W output queues of capacity Q, plus per worker one
        inbox slot, one staging slot and the item in hand. The batch op holds
        at most one batch in hand plus a sink of ``capacity`` batches.
        """
        total = sum(s.workers * (s.capacity + 3) for s in self.stages[:-1])
        bs = self.stages[-1].node.batch_size
        return total + bs * (self.sink.capacity + 1)

    def __iter__(self):
        self.start()
        while True:
            b = self.next_batch()
            if b is None:
                return
            yield b

    def next_batch(self, timeout: float | None = None) -> Batch | None:
        """Next batch, or None at end of stream."""
        if self._done:
            return None
        self.start()
        try:
            b = self.sink.get(timeout)
        except Shutdown:
            if self.error is not None:
                raise self.error from None
            raise
        if b is EOS:
            self._finish()
            return None
        self.track(-len(b))
        self._record(b)
        return b

    def _record(self, b: Batch):
        now = time.perf_counter()
        dt = max(now - self._t_last, 1e-9)
        self._t_last = now
        busy, occ = {}, {}
        for s in self.stages:
            cur = s.counters.busy_s
            busy[s.node.id] = (cur - self._last_busy[s.node.id]) / (dt * s.workers)
            self._last_busy[s.node.id] = cur
            used, cap = s.occupancy()
            occ[s.node.id] = used / cap if cap else 0.0
        self.stats.rows.append({"batch_index": b.batch_index, "epoch": b.epoch, "items": len(b),
                                "items_per_sec": len(b) / dt, "wall_s": dt,
                                "busy_fraction": busy, "queue_occupancy": occ})

    def _finish(self):
        self._done = True
        for s in self.stages:
            for t in s.threads:
                t.join(timeout=5)
        self._fill_stats()

    def _fill_stats(self):
        st = self.stats
        st.busy_s = {s.node.id: s.counters.busy_s for s in self.stages}
        st.items = {s.node.id: s.counters.items for s in self.stages}
        st.inflight_peak = self._inflight_peak
        st.inflight_bound = self.inflight_bound()
        st.sink_polls = self.sink.polls
        st.sink_empty_polls = self.sink.empty_polls
        st.wall_s = time.perf_counter() - (self._t_start or time.perf_counter())

    @property
    def done(self) -> bool:
        return self._done

    def snapshot(self) -> dict:
        """Counters read by the monitor; never blocks the pipeline."""
        ops = {}
        for s in self.stages:
            used, cap = s.occupancy()
            ops[s.node.id] = {"busy_s": s.counters.busy_s, "items": s.counters.items, "workers": s.workers,
                              "queue_used": used, "queue_capacity": cap}
        return {"time": time.perf_counter(), "ops": ops, "sink_polls": self.sink.polls,
                "sink_empty_polls": self.sink.empty_polls, "batches": len(self.stats.rows),
                "running": self._started and not self._done and self.error is None}

    def config(self) -> dict:
        return {s.node.id: {"workers": s.workers, "queue_capacity": s.capacity} for s in self.stages}

    def update_op_config(self, op_id: str, workers: int | None = None, queue_capacity: int | None = None) -> bool:
        """Request a new worker count and/or output capacity for one op.

        The op's own poller applies it at its next round boundary; the
        output stream is unaffected.
        """
        if op_id == self.sink_id:
            op_id = self.stages[-1].node.id
            if workers not in (None, 1):
                raise OutOfBounds("the sink has no workers")
        stage = self.by_id.get(op_id)
        if stage is None:
            raise UnknownOp(f"no op {op_id!r} in this pipeline")
        if workers is not None and not 1 <= workers <= MAX_WORKERS:
            raise OutOfBounds(f"workers must be in [1, {MAX_WORKERS}], got {workers}")
        if queue_capacity is not None and not 1 <= queue_capacity <= MAX_CAPACITY:
            raise OutOfBounds(f"queue_capacity must be in [1, {MAX_CAPACITY}], got {queue_capacity}")
        if isinstance(stage, _BatchStage) and workers not in (None, 1):
            raise OutOfBounds("the batch op runs on a single poller")
        stage.control.put((workers, queue_capacity))
        return True

    def close(self):
        if not self._done:
            self._close_queues()
            self._done = True
            self._fill_stats()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


@dataclass
class RunResult:
    batches: list
    stats: RunStats


def run_pipeline(graph: PipelineGraph, index, reader=None, sink_capacity: int | None = None, epochs: int = 1,
                 loader=None, on_batch: Callable | None = None) -> RunResult:
    """Run to completion and collect every batch in order."""
    with Pipeline(graph, index, reader, sink_capacity, epochs, loader) as p:
        out = []
        for b in p:
            out.append(b)
            if on_batch is not None:
                on_batch(p, b)
        return RunResult(out, p.stats)


def batches_equal(a: Iterable[Batch], b: Iterable[Batch]) -> bool:
    """Bit-exact equality of two batch streams."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if (x.epoch, x.batch_index, x.positions, x.sample_ids) != (y.epoch, y.batch_index, y.positions, y.sample_ids):
            return False
        if set(x.fields) != set(y.fields):
            return False
        for k in x.fields:
            u, v = x.fields[k], y.fields[k]
            if isinstance(u, np.ndarray):
                if not isinstance(v, np.ndarray) or u.dtype != v.dtype or u.shape != v.shape \
                        or u.tobytes() != v.tobytes():
                    return False
            elif u != v:
                return False
    return True


__all__ = ["Batch", "Item", "Pipeline", "RunResult", "RunStats", "Task", "batches_equal", "decode_sample",
           "reader_loader", "run_pipeline", "stack_samples"]
