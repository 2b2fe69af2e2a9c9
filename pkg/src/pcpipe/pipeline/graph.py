"""Linear operator graphs: source -> map* -> batch -> sink."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from pcpipe.errors import GraphError
from pcpipe.pipeline.transforms import FUSABLE, get_transform

KINDS = ("source", "map", "batch", "sink")
MAX_WORKERS = 64
MAX_CAPACITY = 64


@dataclass(frozen=True)
class MapStep:
    """One transform inside a (possibly fused) map node. ``op_id`` keys its random stream."""
    op_id: str
    transform: str
    params: dict = field(default_factory=dict, hash=False)

    def to_json(self):
        return {"op_id": self.op_id, "transform": self.transform, "params": dict(self.params)}


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: str
    steps: tuple[MapStep, ...] = ()  # map only
    num_workers: int = 1
    queue_capacity: int = 8
    batch_size: int | None = None  # batch only
    drop_remainder: bool = True  # batch only

    @property
    def transform(self) -> str | None:
        return self.steps[0].transform if len(self.steps) == 1 else None

    @property
    def fused(self) -> bool:
        return len(self.steps) > 1

    def to_json(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "num_workers": self.num_workers,
             "queue_capacity": self.queue_capacity}
        if self.kind == "map":
            if self.fused:
                d["transforms"] = [s.to_json() for s in self.steps]
            else:
                d["transform"] = self.steps[0].transform
                d["params"] = dict(self.steps[0].params)
        if self.kind == "batch":
            d["batch_size"] = self.batch_size
            d["drop_remainder"] = self.drop_remainder
        return d

    @classmethod
    def from_json(cls, d: dict) -> "OpNode":
        try:
            op_id, kind = str(d["id"]), d["kind"]
        except KeyError as exc:
            raise GraphError(f"op entry missing {exc.args[0]!r}: {d}") from None
        steps = ()
        if kind == "map":
            if "transforms" in d:
                steps = tuple(MapStep(str(s.get("op_id", f"{op_id}.{i}")), s["transform"], dict(s.get("params", {})))
                              for i, s in enumerate(d["transforms"]))
            elif "transform" in d:
                steps = (MapStep(op_id, d["transform"], dict(d.get("params") or {})),)
        return cls(
            id=op_id,
            kind=kind,
            steps=steps,
            num_workers=int(d.get("num_workers", 1)),
            queue_capacity=int(d.get("queue_capacity", 8)),
            batch_size=None if d.get("batch_size") is None else int(d["batch_size"]),
            drop_remainder=bool(d.get("drop_remainder", True)),
        )


def map_op(op_id, transform, params=None, workers=1, capacity=8) -> OpNode:
    return OpNode(op_id, "map", (MapStep(op_id, transform, dict(params or {})),), workers, capacity)


@dataclass(frozen=True)
class PipelineGraph:
    nodes: tuple[OpNode, ...]
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def node(self, op_id: str) -> OpNode:
        for n in self.nodes:
            if n.id == op_id:
                return n
        raise KeyError(op_id)

    @property
    def maps(self) -> list[OpNode]:
        return [n for n in self.nodes if n.kind == "map"]

    @property
    def batch(self) -> OpNode:
        return next(n for n in self.nodes if n.kind == "batch")

    def with_node(self, node: OpNode) -> "PipelineGraph":
        return replace(self, nodes=tuple(node if n.id == node.id else n for n in self.nodes))

    def to_json(self) -> dict:
        return {"base_seed": self.base_seed, "ops": [n.to_json() for n in self.nodes]}

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineGraph":
        if not isinstance(doc, dict) or not isinstance(doc.get("ops"), list):
            raise GraphError("pipeline config needs an 'ops' list")
        g = cls(tuple(OpNode.from_json(d) for d in doc["ops"]), int(doc.get("base_seed", 0)))
        validate_graph(g)
        return g

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def load_graph(path) -> PipelineGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise GraphError(f"cannot read pipeline config {path}: {exc}") from exc
    return PipelineGraph.from_json(doc)


def simple_graph(maps=(), batch_size=4, workers=1, capacity=8, source_workers=1, sink_capacity=4,
                 base_seed=0, drop_remainder=True) -> PipelineGraph:
    """source -> maps -> batch -> sink. ``maps`` holds transform names or (name, params) pairs."""
    nodes = [OpNode("source", "source", num_workers=source_workers, queue_capacity=capacity)]
    for i, m in enumerate(maps):
        name, params = (m, {}) if isinstance(m, str) else m
        nodes.append(map_op(f"{name}{i}", name, params, workers, capacity))
    nodes.append(OpNode("batch", "batch", num_workers=1, queue_capacity=sink_capacity, batch_size=batch_size,
                        drop_remainder=drop_remainder))
    nodes.append(OpNode("sink", "sink", queue_capacity=sink_capacity))
    return PipelineGraph(tuple(nodes), base_seed)


def validate_graph(g: PipelineGraph) -> None:
    nodes = g.nodes
    kinds = [n.kind for n in nodes]
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise GraphError(f"unknown op kind {bad[0]!r}")
    if len(nodes) < 3 or kinds[0] != "source" or kinds[-1] != "sink" or kinds[-2] != "batch":
        raise GraphError("graph must be source, maps..., batch, sink")
    if kinds.count("source") != 1 or kinds.count("sink") != 1 or kinds.count("batch") != 1:
        raise GraphError("exactly one source, one batch and one sink are required")
    ids = [n.id for n in nodes]
    step_ids = [s.op_id for n in nodes for s in n.steps if s.op_id != n.id]
    if len(set(ids)) != len(ids) or len(set(ids + step_ids)) != len(ids) + len(step_ids):
        raise GraphError("op ids must be unique")
    for n in nodes:
        if not 1 <= n.num_workers <= MAX_WORKERS:
            raise GraphError(f"{n.id}: num_workers must be in [1, {MAX_WORKERS}]")
        if not 1 <= n.queue_capacity <= MAX_CAPACITY:
            raise GraphError(f"{n.id}: queue_capacity must be in [1, {MAX_CAPACITY}]")
        if n.kind == "map":
            if not n.steps:
                raise GraphError(f"{n.id}: map op needs a transform")
            for s in n.steps:
                get_transform(s.transform)
        if n.kind == "batch":
            if not n.batch_size or n.batch_size < 1:
                raise GraphError(f"{n.id}: batch_size must be positive")
            if n.num_workers != 1:
                raise GraphError(f"{n.id}: the batch op runs on a single poller")


def fuse_maps(g: PipelineGraph, pairs=None) -> PipelineGraph:
    """Merge adjacent stateless map nodes.

    ``pairs`` limits fusion to the given (left_id, right_id) adjacencies; by
    default every fusable run is merged. Each step keeps its original op id,
    so per-sample random streams are unchanged.
    """
    allowed = None if pairs is None else {tuple(p) for p in pairs}
    out: list[OpNode] = []
    for n in g.nodes:
        prev = out[-1] if out else None
        if (prev is not None and prev.kind == "map" and n.kind == "map"
                and all(s.transform in FUSABLE for s in prev.steps + n.steps)
                and (allowed is None or (prev.steps[-1].op_id, n.steps[0].op_id) in allowed)):
            out[-1] = replace(prev, id=f"{prev.id}+{n.id}", steps=prev.steps + n.steps,
                              num_workers=max(prev.num_workers, n.num_workers),
                              queue_capacity=max(prev.queue_capacity, n.queue_capacity))
        else:
            out.append(n)
    return replace(g, nodes=tuple(out))
