"""Best-config JSON file: written after tuning, read at pipeline startup."""
from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

from pcpipe.autotune.search import TuneConfig
from pcpipe.errors import IoFailure, SchemaMismatch
from pcpipe.pipeline import PipelineGraph

log = logging.getLogger(__name__)

BEST_VERSION = 1


def tunable_ops(graph: PipelineGraph) -> set[str]:
    return {n.id for n in graph.nodes if n.kind in ("source", "map", "batch")}


def config_to_json(cfg: TuneConfig, timestamp: float | None = None) -> dict:
    return {
        "version": BEST_VERSION,
        "ops": {op: {"workers": int(w), "queue_capacity": int(c)} for op, (w, c) in sorted(cfg.ops.items())},
        "fused_pairs": [list(p) for p in cfg.fused_pairs],
        "objective": cfg.objective,
        "timestamp": time.time() if timestamp is None else timestamp,
    }


def config_from_json(doc: dict, graph: PipelineGraph | None = None) -> TuneConfig:
    if not isinstance(doc, dict) or doc.get("version") != BEST_VERSION:
        raise SchemaMismatch(f"best-config version {doc.get('version') if isinstance(doc, dict) else None!r}, "
                             f"expected {BEST_VERSION}")
    try:
        ops = {op: (int(v["workers"]), int(v["queue_capacity"])) for op, v in doc["ops"].items()}
        pairs = tuple(tuple(p) for p in doc.get("fused_pairs", []))
        objective = doc.get("objective")
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SchemaMismatch(f"malformed best-config: {exc}") from exc
    if graph is not None:
        want = tunable_ops(graph)
        if set(ops) != want:
            raise SchemaMismatch(f"best-config ops {sorted(ops)} do not match pipeline ops {sorted(want)}")
    return TuneConfig(ops, pairs, None if objective is None else float(objective))


def persist_best(cfg: TuneConfig, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(json.dumps(config_to_json(cfg), indent=2))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_best(path, graph: PipelineGraph | None = None) -> TuneConfig | None:
    """The stored config, or None (with a warning) if there is no file yet."""
    path = Path(path)
    if not path.exists():
        log.warning("no tuned config at %s; using defaults", path)
        return None
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path} is not JSON: {exc}") from exc
    return config_from_json(doc, graph)


def apply_best(graph: PipelineGraph, path) -> PipelineGraph:
    """Startup hook: the graph rewritten with the stored config (unchanged if there is none)."""
    from pcpipe.autotune.tuner import build_tuned_graph, resolve_ops

    cfg = load_best(path, graph)
    if cfg is None:
        return graph
    return build_tuned_graph(graph, TuneConfig(resolve_ops(cfg), cfg.fused_pairs))


__all__ = ["BEST_VERSION", "apply_best", "config_from_json", "config_to_json", "load_best", "persist_best",
           "tunable_ops"]
