"""Order-preserving multi-stage loading pipeline."""
from pcpipe.pipeline.graph import (
    MAX_CAPACITY,
    MAX_WORKERS,
    MapStep,
    OpNode,
    PipelineGraph,
    fuse_maps,
    load_graph,
    map_op,
    simple_graph,
    validate_graph,
)
from pcpipe.pipeline.queues import EOS, BoundedQueue, Connector, PollEvent, Reconfigure
from pcpipe.pipeline.runner import (
    Batch,
    Item,
    Pipeline,
    RunResult,
    RunStats,
    batches_equal,
    decode_sample,
    reader_loader,
    run_pipeline,
    stack_samples,
)
from pcpipe.pipeline.transforms import TRANSFORMS, apply_map, sample_seed

__all__ = [
    "EOS", "MAX_CAPACITY", "MAX_WORKERS", "TRANSFORMS", "Batch", "BoundedQueue", "Connector", "Item", "MapStep",
    "OpNode", "Pipeline", "PipelineGraph", "PollEvent", "Reconfigure", "RunResult", "RunStats", "apply_map",
    "batches_equal", "decode_sample", "fuse_maps", "load_graph", "map_op", "reader_loader", "run_pipeline",
    "sample_seed", "simple_graph", "stack_samples", "validate_graph",
]
