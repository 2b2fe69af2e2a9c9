"""Bounded blocking queues and the order-preserving Connector.

A Connector joins ``producer_size`` upstream workers to ``consumer_size``
downstream workers. Upstream worker ``k`` pushes only into ``queues[k]``; a
single polling routine pops from ``queues[pop_from]`` and advances
``pop_from`` round-robin, so items come out in global arrival order as long
as work was handed to the producers round-robin as well. Popped items are
staged in ``local_queues[expect_consumer]`` and released together when
``expect_consumer`` wraps back to zero.
"""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from pcpipe.errors import GraphError, Shutdown


class _Marker:
    __slots__ = ()


class EndOfStream(_Marker):
    def __repr__(self):
        return "EOS"


EOS = EndOfStream()


@dataclass(eq=False)
class Reconfigure(_Marker):
    """Sent by every old worker of a stage after its last item; carries the new output queues."""
    queues: list


def is_marker(item) -> bool:
    return isinstance(item, _Marker)


class BoundedQueue:
    """FIFO with a mutable capacity. ``close()`` wakes every waiter with Shutdown."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._capacity = capacity
        self._items: deque = deque()
        self._lock = threading.Lock()
        # separate wake-ups for consumers and producers sharing one lock
        self._not_empty = threading.Condition(self._lock)
        self._not_full = threading.Condition(self._lock)
        self._closed = False
        self.polls = 0
        self.empty_polls = 0  # get() calls that found nothing waiting

    @property
    def capacity(self) -> int:
        return self._capacity

    def set_capacity(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        with self._lock:
            self._capacity = capacity
            self._not_full.notify_all()

    def __len__(self):
        return len(self._items)

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, item, timeout: float | None = None) -> None:
        with self._lock:
            # markers never count against capacity, so shutdown and reconfiguration cannot deadlock
            ok = self._not_full.wait_for(
                lambda: self._closed or len(self._items) < self._capacity or is_marker(item), timeout)
            if self._closed:
                raise Shutdown("queue closed")
            if not ok:
                raise TimeoutError("queue full")
            self._items.append(item)
            self._not_empty.notify()

    def get(self, timeout: float | None = None):
        with self._lock:
            self.polls += 1
            if not self._items:
                self.empty_polls += 1
            ok = self._not_empty.wait_for(lambda: self._closed or self._items, timeout)
            if self._closed:
                raise Shutdown("queue closed")
            if not ok:
                raise TimeoutError("queue empty")
            item = self._items.popleft()
            self._not_full.notify()
            return item

    def close(self):
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()


@dataclass
class PollEvent:
    """One step of the polling routine, kept for inspection in tests."""
    source: int  # queue popped
    consumer: int  # staging slot written
    released: bool  # whether this step released the staged round


@dataclass
class Connector:
    queues: list
    consumer_size: int = 1
    pop_from: int = 0
    expect_consumer: int = 0
    local_queues: list = field(default_factory=list)
    record: bool = False
    events: list = field(default_factory=list)

    def __post_init__(self):
        if not self.queues or self.consumer_size < 1:
            raise ValueError("connector needs at least one producer and one consumer")
        self.local_queues = [deque() for _ in range(self.consumer_size)]

    @classmethod
    def create(cls, producer_size: int, consumer_size: int = 1, capacity: int = 8, record=False) -> "Connector":
        return cls([BoundedQueue(capacity) for _ in range(producer_size)], consumer_size, record=record)

    @property
    def producer_size(self) -> int:
        return len(self.queues)

    def push(self, worker_id: int, item, timeout=None):
        if not 0 <= worker_id < len(self.queues):
            raise ValueError(f"worker {worker_id} is not a producer of this connector")
        self.queues[worker_id].put(item, timeout)

    def pop(self, timeout=None):
        """Next item in global order; markers are handled here and never returned except EOS."""
        while True:
            item = self.queues[self.pop_from].get(timeout)
            if isinstance(item, Reconfigure):
                self._drain_markers(Reconfigure)
                self.queues = item.queues
                self.pop_from = 0
                continue
            if item is EOS:
                self._drain_markers(EndOfStream)
                return EOS
            source = self.pop_from
            self.pop_from = (self.pop_from + 1) % len(self.queues)
            return source, item

    def _drain_markers(self, kind):
        # every other producer finished the same round, so its next item is the same marker
        for i, q in enumerate(self.queues):
            if i == self.pop_from:
                continue
            m = q.get()
            if not isinstance(m, kind):
                raise GraphError(f"producer {i} sent {m!r} where {kind.__name__} was expected")

    def poll(self, timeout=None):
        """Pop one item and stage it. Returns EOS, or the list of (consumer, item) released by this step."""
        got = self.pop(timeout)
        if got is EOS:
            return EOS
        source, item = got
        slot = self.expect_consumer
        self.local_queues[slot].append(item)
        self.expect_consumer = (slot + 1) % self.consumer_size
        released = self.expect_consumer == 0
        if self.record:
            self.events.append(PollEvent(source, slot, released))
        return self.release() if released else []

    def release(self) -> list[tuple[int, Any]]:
        """Hand staged items out in staging order; also used to flush a partial round."""
        out = []
        for k, q in enumerate(self.local_queues):
            while q:
                out.append((k, q.popleft()))
        self.expect_consumer = 0
        return out

    def set_consumers(self, consumer_size: int):
        if self.expect_consumer != 0 or any(self.local_queues):
            raise GraphError("consumer count can only change at a round boundary")
        self.consumer_size = consumer_size
        self.local_queues = [deque() for _ in range(consumer_size)]

    def close(self):
        for q in self.queues:
            q.close()
