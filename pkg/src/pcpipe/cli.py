"""pcpipe command line: convert, inspect, bench, tune, shard-sim, serve-store, stream."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pcpipe.errors import PcpipeError

log = logging.getLogger("pcpipe")

DEFAULT_MAPS = ("normalize", "translate", "jitter")


def _emit(doc, out: str | None = None):
    text = json.dumps(doc, indent=2, default=str)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _schema(value: str):
    from pcpipe.ingest import SCHEMA_PRESETS, preset_schema
    from pcpipe.record import Schema

    if value in SCHEMA_PRESETS:
        return preset_schema(value)
    try:
        return Schema.from_json(json.loads(Path(value).read_text()))
    except OSError as exc:
        raise argparse.ArgumentTypeError(f"{value!r} is neither a schema preset nor a readable file: {exc}")


def _graph(args):
    from pcpipe.pipeline import load_graph, simple_graph

    if getattr(args, "graph", None):
        return load_graph(args.graph)
    return simple_graph(args.maps or DEFAULT_MAPS, batch_size=args.batch_size, workers=args.workers,
                        base_seed=args.seed)


def _add_graph_args(p, batch_size=32):
    p.add_argument("--graph", help="pipeline config JSON; overrides --maps/--batch-size/--workers")
    p.add_argument("--maps", nargs="*", help=f"map transforms in order (default: {' '.join(DEFAULT_MAPS)})")
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--workers", type=int, default=1, help="workers per map op")
    p.add_argument("--seed", type=int, default=0, help="base seed for random transforms")


# -- subcommands

def cmd_convert(args):
    from pcpipe.ingest import convert

    _, report = convert(args.source_dir, args.kind, args.schema, slice_count=args.slices,
                        group_size=args.group_size, out_dir=args.out, num_points=args.num_points, stem=args.stem)
    _emit(report.to_json(), args.json)
    return 0


def cmd_inspect(args):
    from pcpipe.record import describe_dataset

    info = describe_dataset(args.file)
    if args.json:
        _emit(info)
        return 0
    fields = ", ".join(f"{name} {t['type']}{list(t['shape']) if t['shape'] else ''}"
                       for name, t in info["schema"]["fields"])
    print(f"{args.file}: {info['total_samples']} samples, {len(info['slices'])} slice(s), "
          f"{info['total_size_bytes']} bytes")
    print(f"schema: {fields}")
    for s in info["slices"]:
        print(f"  slice {s['slice_id']} {s['name']}: {s['samples']} samples, {s['groups']} groups, "
              f"scalar pages {s['scalar_page_size_bytes']} B, block pages {s['block_page_size_bytes']} B")
    return 0


def cmd_bench(args):
    from pcpipe.autotune import apply_best
    from pcpipe.bench import run_benchmark

    graph = _graph(args)
    if args.best:
        graph = apply_best(graph, args.best)
    report = run_benchmark(graph, args.dataset, repeats=args.repeats, sample_interval_ms=args.interval_ms,
                           epochs=args.epochs, base_seed=args.seed if args.graph is None else None)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            report.write_csv(fh)
    doc = report.to_json()
    if args.json:
        _emit(doc, args.json)
    dev = "n/a" if report.deviation is None else f"{report.deviation:.2%}"
    print(f"cost {report.cost_time_s:.3f} s  cpu {report.avg_cpu_percent:.1f}%  mem {report.avg_mem_percent:.2f}%  "
          f"peak rss {report.peak_rss_bytes / 2**20:.1f} MiB  deviation {dev}")
    return 0


def cmd_tune(args):
    from pcpipe.autotune import SearchSpace, persist_best, tune, tune_offline
    from pcpipe.index import build_index
    from pcpipe.pipeline import Pipeline
    from pcpipe.record import DatasetReader, open_dataset

    headers = open_dataset(args.dataset)
    index = build_index(headers)
    graph = _graph(args)

    def make(g):
        return Pipeline(g, index, DatasetReader(headers), epochs=args.max_epochs)

    space = SearchSpace.for_graph(graph, max_workers=args.max_workers, fuse=args.fuse)
    if args.fuse:
        res = tune_offline(make, graph, space, n_iter=args.iterations, eval_window_s=args.window_s, seed=args.seed)
    else:
        p = make(graph)
        try:
            res = tune(p, space, n_iter=args.iterations, eval_window_s=args.window_s, interval_ms=args.interval_ms,
                       seed=args.seed, force=args.force)
        finally:
            p.close()
    persist_best(res.best, args.out)
    print(f"bottleneck: {res.bottleneck or 'n/a'}  initial {res.initial.objective:.1f} items/s  "
          f"best {res.best.objective:.1f} items/s ({res.speedup:.2f}x)  -> {args.out}")
    if args.json:
        _emit(res.to_json(), args.json)
    return 0


def cmd_shard_sim(args):
    import numpy as np

    from pcpipe.distributed import ToyModel, simulate_from_dataset
    from pcpipe.record import DatasetReader, open_dataset

    headers = open_dataset(args.dataset)
    model = ToyModel.initial(args.seed, args.lr)
    kw = dict(num_epochs=args.epochs, model0=model, global_batch=args.batch_size, maps=tuple(args.maps or ()),
              base_seed=args.seed)
    multi = simulate_from_dataset(headers, DatasetReader(headers), args.num_shards, **kw)
    doc = {"devices": multi.to_json()}
    if not args.no_oracle:
        single = simulate_from_dataset(headers, DatasetReader(headers), 1, **kw)
        same = bool(np.array_equal(single.final_params, multi.final_params))
        doc["oracle"] = single.to_json()
        doc["bit_identical"] = same
    _emit(doc, args.json)
    if not args.no_oracle and not doc["bit_identical"]:
        print("pcpipe: error: multi-device parameters differ from the single-device oracle", file=sys.stderr)
        return 1
    return 0


def cmd_serve_store(args):  # pragma: no cover - blocking server
    from pcpipe.service import serve

    root = Path(args.root)
    if not root.is_dir():
        raise PcpipeError(f"store directory {root} does not exist")
    print(f"serving {root} on http://{args.host}:{args.port}/objects", flush=True)
    serve(root, args.host, args.port)
    return 0


def cmd_stream(args):
    from pcpipe.distributed import ShardSpec
    from pcpipe.streaming import DiskBudget, open_store, stream_dataset

    budget = DiskBudget(args.quota_bytes, args.watermark, args.staging_dir)
    res = stream_dataset(open_store(args.store_url), budget, ShardSpec(args.num_shards, args.shard_id), _graph(args),
                         epochs=args.epochs)
    doc = res.report.to_json()
    doc["batches"] = len(res.batches)
    doc["items"] = sum(len(b) for b in res.batches)
    _emit(doc, args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcpipe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("convert", help="convert a directory of raw clouds to .PcRecord")
    p.add_argument("source_dir")
    p.add_argument("--kind", required=True,
                   choices=["ply_ascii", "ply_binary_le", "obj", "xyz_text", "kitti_bin", "npy"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--schema", type=_schema, default="modelnet",
                   help="preset (modelnet, points, kitti) or a schema JSON file")
    p.add_argument("--slices", type=int, default=1)
    p.add_argument("--group-size", type=int, default=256)
    p.add_argument("--num-points", type=int, help="resample every cloud to this many points")
    p.add_argument("--stem", default="dataset")
    p.add_argument("--json", help="also write the report here")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("inspect", help="print schema, slices and group counts of a dataset")
    p.add_argument("file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="time full pipeline passes with CPU/memory sampling")
    p.add_argument("dataset")
    _add_graph_args(p)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--interval-ms", type=float, default=10.0, help="resource sampling interval")
    p.add_argument("--best", help="tuned config to apply before running")
    p.add_argument("--json", help="write the JSON report here")
    p.add_argument("--csv", help="write per-batch throughput rows here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("tune", help="search per-op workers and queue capacities")
    p.add_argument("dataset")
    _add_graph_args(p)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--interval-ms", type=float, default=10.0, help="monitor cadence")
    p.add_argument("--window-s", type=float, default=0.5, help="evaluation window per config")
    p.add_argument("--max-workers", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=10_000, help="epochs available to the live pipeline")
    p.add_argument("--fuse", action="store_true", help="also search map fusion (fresh pipeline per config)")
    p.add_argument("--force", action="store_true", help="tune even if the consumer is the bottleneck")
    p.add_argument("--out", default="best.json")
    p.add_argument("--json", help="write the full tuning history here")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("shard-sim", help="simulate data-parallel training over N shards")
    p.add_argument("dataset")
    p.add_argument("--num-shards", type=int, default=4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8, help="global batch (split across shards)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--maps", nargs="*")
    p.add_argument("--no-oracle", action="store_true", help="skip the single-device comparison")
    p.add_argument("--json", help="write the report here")
    p.set_defaults(func=cmd_shard_sim)

    p = sub.add_parser("serve-store", help="serve a directory as a mock object store over HTTP")
    p.add_argument("root")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve_store)

    p = sub.add_parser("stream", help="run the pipeline over slices streamed from an object store")
    p.add_argument("--store-url", required=True, help="http(s) URL of a store, or a local directory")
    p.add_argument("--quota-bytes", type=int, required=True)
    p.add_argument("--watermark", type=float, default=0.8)
    p.add_argument("--staging-dir", default="staging")
    p.add_argument("--num-shards", type=int, default=1)
    p.add_argument("--shard-id", type=int, default=0)
    p.add_argument("--epochs", type=int, default=1)
    _add_graph_args(p)
    p.add_argument("--json", help="write the report here")
    p.set_defaults(func=cmd_stream)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PcpipeError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pcpipe: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
