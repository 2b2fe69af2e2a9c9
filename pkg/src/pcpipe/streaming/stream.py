"""Two-tier streaming: download/evict workers feed the processing pipeline.

Tier 1 stages slice files under the disk budget; tier 2 is an ordinary
pipeline whose loader waits for a sample's slice to be ready, reads it and
reports the read back so the evictor knows when a file is fully consumed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from pcpipe.distributed import ShardSpec
from pcpipe.errors import WorkerPanic
from pcpipe.pipeline import PipelineGraph, RunStats, decode_sample, run_pipeline
from pcpipe.record import DatasetReader
from pcpipe.streaming.meta import fetch_meta_index, plan_epoch_downloads, shard_of
from pcpipe.streaming.staging import DiskBudget, DownloadWorker, EvictWorker, StagingArea
from pcpipe.streaming.store import ObjectStore


@dataclass
class StreamReport:
    quota_bytes: int
    peak_staged_bytes: int
    max_slice_bytes: int
    dataset_bytes: int
    downloads: list = field(default_factory=list)
    evictions: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    access_log: list = field(default_factory=list)

    @property
    def within_budget(self) -> bool:
        return self.peak_staged_bytes <= self.quota_bytes + self.max_slice_bytes

    def to_json(self) -> dict:
        return {
            "quota_bytes": self.quota_bytes,
            "peak_staged_bytes": self.peak_staged_bytes,
            "max_slice_bytes": self.max_slice_bytes,
            "dataset_bytes": self.dataset_bytes,
            "within_budget": self.within_budget,
            "downloads": len(self.downloads),
            "evictions": list(self.evictions),
            "violations": list(self.violations),
        }


@dataclass
class StreamResult:
    batches: list
    stats: RunStats | None
    report: StreamReport


def stream_dataset(store: ObjectStore, budget: DiskBudget, spec: ShardSpec, graph: PipelineGraph, epochs: int = 1,
                   sink_capacity: int | None = None, cache_groups: int = 4, on_batch=None) -> StreamResult:
    """Same output as running ``graph`` over the local shard, but with slices streamed from ``store``."""
    summaries = fetch_meta_index(store, base_dir=budget.staging_dir)
    shard = shard_of(summaries, spec)
    staging = StagingArea(budget)
    headers = [s.header for s in summaries]
    names = {s.header.slice_id: s.name for s in summaries}
    schema = headers[0].schema
    reader = DatasetReader(headers, cache_groups=cache_groups, root=budget.staging_dir, opener=staging.opener)

    def loader(entry, epoch, position):
        name = names[entry.shard_id]
        staging.wait_ready(name, epoch)
        try:
            sample = reader.read_sample(entry)
        finally:
            staging.done_read(name)
        return decode_sample(schema, sample)

    plans = ((e, plan_epoch_downloads(summaries, spec, e, shard)) for e in range(epochs))
    downloader = DownloadWorker(store, staging, plans)
    evictor = EvictWorker(staging)
    downloader.start()
    evictor.start()
    try:
        res = run_pipeline(graph, shard, sink_capacity=sink_capacity, epochs=epochs, loader=loader,
                           on_batch=on_batch)
    except WorkerPanic as exc:
        # a tier-1 failure shows up as a loader panic; surface the original error
        if staging.error is not None:
            raise staging.error from exc
        raise
    finally:
        staging.close()
        downloader.join(timeout=5)
        evictor.join(timeout=5)
    report = StreamReport(
        quota_bytes=budget.quota_bytes,
        peak_staged_bytes=staging.stats.peak_bytes,
        max_slice_bytes=max(s.bytes for s in summaries),
        dataset_bytes=sum(s.bytes for s in summaries),
        downloads=staging.stats.downloads,
        evictions=staging.stats.evictions,
        violations=staging.stats.violations,
        access_log=staging.stats.access_log,
    )
    return StreamResult(res.batches, res.stats, report)
