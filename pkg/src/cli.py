"""Command-line interface: host management, benchmarks and trace generation."""

import argparse
import json
import logging
import re
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd

from src.bench import (
    BenchReport,
    bench_config,
    emit_json,
    reports_to_frame,
    run_bmc_sim,
    run_empty_bench,
    run_map_benches,
    run_panic_storm,
    run_recursion_bench,
    run_spinlock_bench,
    summary_to_frame,
    write_csv,
    write_json,
    write_raw_samples,
)
from src.config import (
    BENCH_INNER_ITERATIONS,
    BENCH_SAMPLES,
    DEFAULT_NUM_WORKERS,
    DEFAULT_RING_LOG,
    DEFAULT_TRACE_FILE,
    LOG_FORMAT,
    PAGE_SIZE,
    RECURSION_MAX_DEPTH,
    STORM_DEFAULT_COUNT,
)
from src.core_types import HostConfig, ProgramKind, WorkerState
from src.dispatcher import dispatch, run_on_workers
from src.errors import HostError, StormInvariantBreach, UnknownExtension, describe
from src.host import Host, PanicRing
from src.loader import ExtensionHandle, load_extension, read_manifest, unload_extension
from src.programs import resolve_entry
from src.safe_interface import PacketBuffer
from src.watchdog import arm_watchdogs, disarm_watchdogs
from src.workload import generate_requests, prefill_requests, read_trace, write_trace


logger: logging.Logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_ERROR: int = 1
EXIT_INVARIANT_BREACH: int = 2

_DURATION_UNITS: Dict[str, int] = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": 1_000_000_000}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ns|us|ms|s)?\s*$")


def parse_duration(text: str) -> int:
    """
    Parse ``100ms``, ``50us``, ``2s`` or a bare nanosecond count.

    Raises:
        argparse.ArgumentTypeError: If the text is not a duration
    """
    match = _DURATION_RE.match(text)
    if match is None:
        raise argparse.ArgumentTypeError(f"not a duration: {text!r} (use ns, us, ms or s)")
    value, unit = match.groups()
    return int(round(float(value) * _DURATION_UNITS[unit or "ns"]))


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workers", type=int, default=None, help="Number of workers")
    parser.add_argument("--watchdog-period", type=parse_duration, default=None, help="Watchdog period (e.g. 50ms)")
    parser.add_argument("--termination-timeout", type=parse_duration, default=None, help="Termination timeout (e.g. 100ms)")
    parser.add_argument("--page-size", type=int, default=None, help=f"Page size in bytes (default {PAGE_SIZE})")
    parser.add_argument("--seed", type=int, default=None, help="Hash seed for maps and steering")


def _add_output_flags(parser: argparse.ArgumentParser) -> None:
    fmt = parser.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_const", dest="format", const="json", help="Emit JSON")
    fmt.add_argument("--csv", action="store_const", dest="format", const="csv", help="Emit CSV")
    parser.add_argument("--out", type=Path, default=None, help="Write the report here instead of stdout")


def config_from_args(args: argparse.Namespace, base: Optional[HostConfig] = None) -> HostConfig:
    """Apply CLI overrides to a base configuration."""
    changes: Dict[str, int] = {}
    if getattr(args, "workers", None) is not None:
        changes["num_workers"] = args.workers
    if getattr(args, "watchdog_period", None) is not None:
        changes["watchdog_period_ns"] = args.watchdog_period
    if getattr(args, "termination_timeout", None) is not None:
        changes["termination_timeout_ns"] = args.termination_timeout
    if getattr(args, "page_size", None) is not None:
        changes["page_size"] = args.page_size
    if getattr(args, "seed", None) is not None:
        changes["hash_seed"] = args.seed
    return (base or HostConfig()).replace(**changes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="User-space kernel extension host")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    groups = parser.add_subparsers(dest="group", required=True)

    host = groups.add_parser("host", help="Load, unload and run extensions")
    host_commands = host.add_subparsers(dest="command", required=True)

    load = host_commands.add_parser("load", help="Lint, classify and load manifests")
    load.add_argument("manifests", nargs="+", type=Path)
    _add_config_flags(load)

    unload = host_commands.add_parser("unload", help="Load manifests, then unload one extension")
    unload.add_argument("extension_id")
    unload.add_argument("--cascade", action="store_true", help="Also remove extensions sharing its maps")
    unload.add_argument("--manifests", nargs="+", type=Path, required=True)
    _add_config_flags(unload)

    run = host_commands.add_parser("run", help="Dispatch a frame trace through packet-ingress extensions")
    run.add_argument("--manifests", nargs="+", type=Path, required=True)
    run.add_argument("--trace", type=Path, default=DEFAULT_TRACE_FILE)
    run.add_argument("--log", type=Path, default=DEFAULT_RING_LOG, help="Panic ring output")
    _add_config_flags(run)

    log = host_commands.add_parser("log", help="Print a panic ring log")
    log.add_argument("path", type=Path)

    bench = groups.add_parser("bench", help="Run a benchmark")
    bench.add_argument("name", choices=["empty", "spinlock", "recursion", "map", "bmc", "storm"])
    bench.add_argument("--samples", type=int, default=BENCH_SAMPLES)
    bench.add_argument("--inner", type=int, default=BENCH_INNER_ITERATIONS)
    bench.add_argument("--samples-out", type=Path, default=None, help="Parquet file for raw samples")
    bench.add_argument("--max-depth", type=int, default=RECURSION_MAX_DEPTH, help="recursion: deepest level")
    bench.add_argument("--count", type=int, default=None, help="storm: injected packets; bmc: requests")
    bench.add_argument("--keys", type=int, default=1024, help="bmc: key population")
    bench.add_argument("--get-ratio", type=float, default=0.9, help="bmc: share of GET requests")
    bench.add_argument("--value-size", type=int, default=32, help="bmc: SET value size")
    bench.add_argument("--trace", type=Path, default=None, help="bmc: replay this trace instead of generating one")
    bench.add_argument("--no-prefill", action="store_true", help="bmc: start with an empty store and cache")
    bench.add_argument("--no-egress", action="store_true", help="bmc: do not load the egress fill program")
    _add_output_flags(bench)
    _add_config_flags(bench)

    gen = groups.add_parser("bmcgen", help="Write a memcached frame trace")
    gen.add_argument("--keys", type=int, required=True)
    gen.add_argument("--get-ratio", type=float, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--value-size", type=int, default=32)
    gen.add_argument("--max-key-fraction", type=float, default=0.0, help="Share of SETs using a 250-byte key")
    gen.add_argument("--out", type=Path, default=DEFAULT_TRACE_FILE)
    return parser


# host commands


def _load_manifests(host: Host, paths: Sequence[Path]) -> List[ExtensionHandle]:
    handles: List[ExtensionHandle] = []
    for path in paths:
        manifest = read_manifest(path)
        handles.append(load_extension(manifest, resolve_entry(manifest.entry_symbol), host))
    return handles


def _describe_handle(handle: ExtensionHandle) -> str:
    mode = handle.stack_mode
    stack: str = "runtime-checked" if mode.is_runtime_checked else f"statically-bounded({mode.total_bytes})"
    return (
        f"{handle.extension_id}: kind={handle.program_kind.value} stack={stack} "
        f"maps={list(handle.attached_maps)}"
    )


def cmd_host_load(args: argparse.Namespace) -> int:
    host: Host = Host(config_from_args(args))
    for handle in _load_manifests(host, args.manifests):
        print(_describe_handle(handle))
    return EXIT_OK


def cmd_host_unload(args: argparse.Namespace) -> int:
    host: Host = Host(config_from_args(args))
    _load_manifests(host, args.manifests)
    removed: List[str] = unload_extension(host, args.extension_id, cascade=args.cascade)
    print(" ".join(removed))
    return EXIT_OK


def cmd_host_run(args: argparse.Namespace) -> int:
    host: Host = Host(config_from_args(args))
    handles: List[ExtensionHandle] = _load_manifests(host, args.manifests)
    ingress: List[str] = [h.extension_id for h in handles if h.program_kind is ProgramKind.PACKET_INGRESS]
    frames: List[bytes] = read_trace(args.trace)
    lanes: int = len(host.workers)

    def serve(worker: WorkerState) -> Counter:
        counts: Counter = Counter()
        for frame in frames[worker.worker_id::lanes]:
            for extension_id in ingress:
                try:
                    outcome = dispatch(host, worker, extension_id, packet=PacketBuffer(frame))
                except UnknownExtension:
                    counts[(extension_id, "removed")] += 1
                    continue
                label: str = "panicked" if outcome.panicked else outcome.verdict.value
                counts[(extension_id, label)] += 1
        return counts

    arm_watchdogs(host)
    try:
        per_worker: List[Counter] = run_on_workers(host, serve)
    finally:
        disarm_watchdogs(host)
    totals: Counter = sum(per_worker, Counter())
    for (extension_id, label), count in sorted(totals.items()):
        print(f"{extension_id} {label} {count}")
    host.ring.write(args.log)
    print(f"{host.ring.total} panics logged to {args.log}")
    return EXIT_OK


def cmd_host_log(args: argparse.Namespace) -> int:
    for record in PanicRing.read(args.path):
        print(record.to_line())
    return EXIT_OK


# bench


def _emit_reports(reports: List[BenchReport], args: argparse.Namespace) -> None:
    if args.samples_out is not None:
        write_raw_samples(reports, args.samples_out)
    if args.out is not None:
        if args.format == "csv":
            write_csv(reports, args.out)
        else:
            write_json(reports, args.out)
        return
    if args.format == "json":
        print(emit_json(reports))
    elif args.format == "csv":
        print(reports_to_frame(reports).to_csv(index=False), end="")
    else:
        columns: List[str] = ["bench_id", "samples", "mean_ns", "stddev_ns", "p50_ns", "p99_ns"]
        print(reports_to_frame(reports)[columns].to_string(index=False))


def _emit_summary(summary: Dict[str, Any], args: argparse.Namespace) -> None:
    if args.format == "csv":
        text: str = summary_to_frame(summary).to_csv(index=False)
    else:
        text = json.dumps(summary, indent=2)
    if args.out is None:
        print(text)
        return
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="utf-8")
    logger.info(f"Wrote report to {args.out}")


def _bench_bmc(args: argparse.Namespace, config: HostConfig) -> Dict[str, Any]:
    seed: int = config.hash_seed
    count: int = args.count if args.count is not None else 100_000
    if args.trace is not None:
        frames: List[bytes] = read_trace(args.trace)
    else:
        requests = generate_requests(args.keys, args.get_ratio, seed, count, args.value_size)
        frames = [request.frame() for request in requests]
    prefill = [] if args.no_prefill else [(r.key, r.value) for r in prefill_requests(args.keys, seed, args.value_size)]
    workers: int = args.workers if args.workers is not None else DEFAULT_NUM_WORKERS
    report = run_bmc_sim(frames, workers, prefill, prefill_cache=not args.no_egress, egress=not args.no_egress, config=config)
    return report.to_dict()


def cmd_bench(args: argparse.Namespace) -> int:
    config: HostConfig = config_from_args(args, bench_config())
    name: str = args.name
    if name == "empty":
        _emit_reports([run_empty_bench(args.samples, args.inner, config)], args)
    elif name == "spinlock":
        _emit_reports([run_spinlock_bench(args.samples, args.inner, config)], args)
    elif name == "recursion":
        _emit_reports(run_recursion_bench(args.max_depth, args.samples, args.inner, config), args)
    elif name == "map":
        _emit_reports(run_map_benches(args.samples, args.inner, config), args)
    elif name == "bmc":
        _emit_summary(_bench_bmc(args, config), args)
    else:
        storm_config: HostConfig = config_from_args(args)
        count: int = args.count if args.count is not None else STORM_DEFAULT_COUNT
        _emit_summary(run_panic_storm(count, storm_config).to_dict(), args)
    return EXIT_OK


def cmd_bmcgen(args: argparse.Namespace) -> int:
    requests = generate_requests(
        args.keys,
        args.get_ratio,
        args.seed,
        args.count,
        args.value_size,
        max_key_set_fraction=args.max_key_fraction,
    )
    path: Path = write_trace(args.out, [request.frame() for request in requests])
    ops: pd.Series = pd.Series([request.op for request in requests], dtype="object")
    print(f"{len(requests)} frames ({ops.value_counts().to_dict()}) written to {path}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "load": cmd_host_load,
    "unload": cmd_host_unload,
    "run": cmd_host_run,
    "log": cmd_host_log,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run one command.

    Returns:
        0 on success, 2 on a panic-storm invariant breach, 1 on any other error
    """
    args: argparse.Namespace = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        if args.group == "host":
            return COMMANDS[args.command](args)
        if args.group == "bench":
            return cmd_bench(args)
        return cmd_bmcgen(args)
    except StormInvariantBreach as e:
        logger.error(f"Invariant breach: {e}")
        print(f"error: {describe(e)}", file=sys.stderr)
        return EXIT_INVARIANT_BREACH
    except (HostError, FileNotFoundError, ValueError) as e:
        print(f"error: {describe(e)}", file=sys.stderr)
        return EXIT_ERROR
