"""Live tuning loop: monitor, check the bottleneck side, then search and apply configs on the running pipeline."""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from pcpipe.autotune.metrics import Monitor, detect_bottleneck
from pcpipe.autotune.search import SearchSpace, SurrogateState, TuneConfig, optimize
from pcpipe.errors import InsufficientSamples, OutOfBounds, PipelineStopped
from pcpipe.pipeline import Pipeline, PipelineGraph, fuse_maps

log = logging.getLogger(__name__)

DEFAULT_MEMORY_CAP = 512 * 1024 * 1024


class Drain(threading.Thread):
    """Consumes a pipeline as fast as possible, counting delivered items (the tuner's 'device')."""

    def __init__(self, pipeline: Pipeline, keep: bool = True, delay_s: float = 0.0):
        super().__init__(name="drain", daemon=True)
        self.pipeline = pipeline
        self.keep = keep
        self.delay_s = delay_s
        self.batches: list = []
        self.items = 0
        self.item_bytes = 0
        self.error: BaseException | None = None
        self._lock = threading.Lock()
        self.first = threading.Event()

    def run(self):
        try:
            for b in self.pipeline:
                if not self.item_bytes:
                    self.item_bytes = max(1, sum(getattr(v, "nbytes", 8) for v in b.fields.values()) // len(b))
                with self._lock:
                    self.items += len(b)
                if self.keep:
                    self.batches.append(b)
                self.first.set()
                if self.delay_s:
                    time.sleep(self.delay_s)
        except BaseException as exc:  # noqa: BLE001 - reported to the tuner
            self.error = exc
        finally:
            self.first.set()

    def count(self) -> tuple[float, int]:
        with self._lock:
            return time.perf_counter(), self.items


def predicted_bytes(cfg: TuneConfig, batch_size: int, item_bytes: int, batch_op: str | None = None) -> int:
    """Worst-case resident samples under ``cfg`` (same bound the pipeline enforces) times bytes per sample."""
    n = 0
    for op, (w, c) in cfg.ops.items():
        if op == batch_op:
            n += batch_size * (c + 1)
        else:
            n += w * (c + 3)
    return n * item_bytes


def apply_config(pipeline: Pipeline, cfg: TuneConfig):
    """Send the per-op updates one after another; each lands at that op's next round boundary."""
    if cfg.fused_pairs:
        raise OutOfBounds("map fusion cannot change on a running pipeline")
    for op, (w, c) in cfg.ops.items():
        node = pipeline.graph.node(op)
        pipeline.update_op_config(op, None if node.kind == "batch" else w, c)


def apply_and_measure(pipeline: Pipeline, cfg: TuneConfig, drain: Drain, eval_window_s: float = 0.5,
                      warmup_s: float | None = None) -> float:
    """Apply ``cfg`` and return delivered items/sec over one window after a warm-up window."""
    apply_config(pipeline, cfg)
    return measure(pipeline, drain, eval_window_s, eval_window_s if warmup_s is None else warmup_s)


def measure(pipeline: Pipeline, drain: Drain, eval_window_s: float, warmup_s: float = 0.0) -> float:
    time.sleep(warmup_s)
    t0, n0 = drain.count()
    time.sleep(eval_window_s)
    t1, n1 = drain.count()
    if pipeline.error is not None:
        raise pipeline.error
    if not drain.is_alive() or pipeline.done:
        raise PipelineStopped("pipeline finished during measurement")
    return (n1 - n0) / (t1 - t0)


@dataclass
class TuneResult:
    initial: TuneConfig
    best: TuneConfig
    state: SurrogateState
    bottleneck: str | None
    tuned: bool
    history: list = field(default_factory=list)  # (iteration, ops, objective)
    wall_s: float = 0.0

    @property
    def speedup(self) -> float:
        if not self.initial.objective:
            return float("nan")
        return self.best.objective / self.initial.objective

    def to_json(self) -> dict:
        return {"initial": {"ops": self.initial.ops, "objective": self.initial.objective},
                "best": {"ops": self.best.ops, "fused_pairs": list(self.best.fused_pairs),
                         "objective": self.best.objective},
                "bottleneck": self.bottleneck, "tuned": self.tuned, "speedup": self.speedup,
                "history": [{"iteration": i, "ops": ops, "objective": v} for i, ops, v in self.history],
                "wall_s": self.wall_s}


def tune(pipeline: Pipeline, space: SearchSpace | None = None, n_iter: int = 10, eval_window_s: float = 0.5,
         warmup_s: float | None = None, interval_ms: float = 10.0, seed: int | None = 0,
         memory_cap_bytes: int = DEFAULT_MEMORY_CAP, drain: Drain | None = None, force: bool = False,
         max_workers: int = 8) -> TuneResult:
    """Tune a running pipeline in place and leave it on the best config found.

    The pipeline is consumed by ``drain`` (a fast consumer is started if none
    is given). Search is skipped when the monitor shows the consumer, not the
    data pipeline, is the bottleneck, unless ``force``.
    """
    t_start = time.perf_counter()
    space = space or SearchSpace.for_graph(pipeline.graph, max_workers=max_workers)
    if space.fuse_pairs:
        raise OutOfBounds("live tuning cannot toggle fusion; use tune_offline")
    if drain is None:
        drain = Drain(pipeline, keep=False)
        pipeline.start()
        drain.start()
    drain.first.wait(30)
    if pipeline.error is not None:
        raise pipeline.error
    rng = np.random.default_rng(seed)
    cur = pipeline.config()
    initial = TuneConfig({op: (cur[op]["workers"], cur[op]["queue_capacity"]) for op in space.ops})

    with Monitor(pipeline, interval_ms) as mon:
        t0 = time.perf_counter()
        value = measure(pipeline, drain, eval_window_s, eval_window_s if warmup_s is None else warmup_s)
        try:
            side = detect_bottleneck(mon.window(since=t0))
        except InsufficientSamples:
            side = None
    initial = initial.with_objective(value)
    state = SurrogateState()
    state.add(initial, value)
    result = TuneResult(initial, initial, state, side, False)
    if side == "network_side" and not force:
        log.info("consumer-side bottleneck; keeping the current config")
        result.wall_s = time.perf_counter() - t_start
        return result

    batch_op = pipeline.graph.batch.id
    bs = pipeline.graph.batch.batch_size
    item_bytes = drain.item_bytes or 1

    def allowed(cfg):
        return predicted_bytes(cfg, bs, item_bytes, batch_op) <= memory_cap_bytes

    def objective(cfg):
        return apply_and_measure(pipeline, cfg, drain, eval_window_s, warmup_s)

    def on_step(i, rec, st):
        result.history.append((i, rec.ops, rec.objective))
        log.info("iteration %d: %.1f items/s (best %.1f)", i, rec.objective, st.best_history[-1])

    try:
        optimize(objective, space, n_iter, rng, state, allowed, on_step)
    except PipelineStopped:
        log.warning("pipeline ended after %d iterations; keeping the best so far", len(result.history))
    best = state.best
    if not pipeline.done:
        apply_config(pipeline, best)
    result.best = best
    result.tuned = True
    result.wall_s = time.perf_counter() - t_start
    return result


def build_tuned_graph(graph: PipelineGraph, cfg: TuneConfig) -> PipelineGraph:
    """Graph with ``cfg``'s fusion applied and its per-op settings written into the nodes."""
    from dataclasses import replace

    g = fuse_maps(graph, cfg.fused_pairs) if cfg.fused_pairs else graph
    nodes = []
    for n in g.nodes:
        if n.id in cfg.ops:
            w, c = cfg.ops[n.id]
            n = replace(n, num_workers=1 if n.kind == "batch" else w, queue_capacity=c)
        elif n.kind == "sink" and g.batch.id in cfg.ops:
            n = replace(n, queue_capacity=cfg.ops[g.batch.id][1])
        nodes.append(n)
    return replace(g, nodes=tuple(nodes))


def resolve_ops(cfg: TuneConfig) -> dict:
    """Per-op settings keyed by the node ids of the fused graph ("a+b"); a fused node takes the larger values."""
    ops = dict(cfg.ops)
    for a, b in cfg.fused_pairs:
        left = next(k for k in ops if k.split("+")[-1] == a)
        (wa, ca), (wb, cb) = ops.pop(left), ops.pop(b)
        ops[f"{left}+{b}"] = (max(wa, wb), max(ca, cb))
    return ops


def tune_offline(make_pipeline, graph: PipelineGraph, space: SearchSpace, n_iter: int = 10,
                 eval_window_s: float = 0.5, warmup_s: float | None = None, seed: int | None = 0) -> TuneResult:
    """Evaluate each config on a fresh pipeline built by ``make_pipeline(graph)``; needed for fuse toggles."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)

    def objective(cfg):
        g = build_tuned_graph(graph, TuneConfig(resolve_ops(cfg), cfg.fused_pairs))
        p = make_pipeline(g)
        d = Drain(p, keep=False)
        p.start()
        d.start()
        try:
            d.first.wait(30)
            return measure(p, d, eval_window_s, eval_window_s if warmup_s is None else warmup_s)
        finally:
            p.close()

    initial = TuneConfig({op: (graph.node(op).num_workers, graph.node(op).queue_capacity) for op in space.ops})
    state = SurrogateState()
    initial = state.add(initial, objective(initial))
    result = TuneResult(initial, initial, state, None, True)
    optimize(objective, space, n_iter, rng, state,
             on_step=lambda i, rec, st: result.history.append((i, rec.ops, rec.objective)))
    result.best = state.best
    result.wall_s = time.perf_counter() - t_start
    return result


__all__ = ["DEFAULT_MEMORY_CAP", "Drain", "TuneResult", "apply_and_measure", "apply_config", "build_tuned_graph",
           "measure", "predicted_bytes", "resolve_ops", "tune", "tune_offline"]
