"""Streaming slice files from an object store under a disk budget."""
from pcpipe.streaming.meta import (
    META_NAME,
    DownloadRequest,
    SliceSummary,
    build_meta_index,
    fetch_meta_index,
    plan_epoch_downloads,
    publish,
    shard_of,
    write_meta_index,
)
from pcpipe.streaming.staging import (
    DiskBudget,
    DownloadEvent,
    DownloadWorker,
    EvictWorker,
    StagingArea,
    download_object,
)
from pcpipe.streaming.store import HttpStore, LocalDirStore, ObjectInfo, ObjectStore, open_store
from pcpipe.streaming.stream import StreamReport, StreamResult, stream_dataset

__all__ = [
    "META_NAME", "DiskBudget", "DownloadEvent", "DownloadRequest", "DownloadWorker", "EvictWorker", "HttpStore",
    "LocalDirStore", "ObjectInfo", "ObjectStore", "SliceSummary", "StagingArea", "StreamReport", "StreamResult",
    "build_meta_index", "download_object", "fetch_meta_index", "open_store", "plan_epoch_downloads", "publish",
    "shard_of", "stream_dataset", "write_meta_index",
]
