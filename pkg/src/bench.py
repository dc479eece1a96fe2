"""Microbenchmarks, the cache throughput simulation and the panic storm.

Timing benches run ``inner`` operations per sample on the monotonic
high-resolution clock and report per-operation nanoseconds. Published
reference numbers travel with each report as context only.
"""

import json
import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import linregress

from src.bmc import load_bmc, read_bmc_stats, serve_frame
from src.config import (
    BENCH_INNER_ITERATIONS,
    BENCH_SAMPLES,
    BENCH_TERMINATION_TIMEOUT_NS,
    BENCH_WATCHDOG_PERIOD_NS,
    MIN_TIMING_SAMPLES,
    OVERHEAD_BOUND_NS,
    PUBLISHED_REFERENCE_NS,
    RECURSION_BENCH_FRAME,
    RECURSION_MAX_DEPTH,
    RECURSION_PANIC_FRAME,
    STORM_DEFAULT_COUNT,
)
from src.core_types import (
    DispatchOutcome,
    HostConfig,
    MapKind,
    MapSpec,
    PacketVerdict,
    PanicReason,
    ProgramKind,
    WorkerState,
)
from src.dispatcher import ProgramContext, dispatch
from src.errors import StormInvariantBreach
from src.host import Host
from src.loader import ExtensionHandle, load_extension, unload_extension
from src.programs import (
    BENCH_ARRAY_MAP,
    BENCH_HASH_MAP,
    BENCH_STATIC,
    COUNTER_MAP,
    array_lookup_bench,
    counter_map_spec,
    empty_prog,
    hash_lookup_bench,
    packet_counter,
    recurse_entry,
    recursion_manifest,
    simple_manifest,
    spinlock_bench,
    static_read_bench,
)
from src.safe_interface import PacketBuffer, array_key, fnv1a_32
from src.watchdog import arm_watchdogs, disarm_watchdogs
from src.workload import (
    MemcachedStore,
    build_frame,
    build_get,
    build_server_reply,
    build_set,
    encode_value_reply,
    make_value,
    max_length_key,
    parse_frame,
)


logger: logging.Logger = logging.getLogger(__name__)

BENCH_LOCK_ID: str = "bench-lock"
MAP_KINDS: Tuple[str, ...] = ("atomic-static", "array", "hash")
LARGE_HASH_KEYS: int = 4096
RECOVERY_CHECK_REQUESTS: int = 200


@dataclass
class BenchReport:
    """
    Summary of one timing bench; durations are nanoseconds per operation.

    ``raw_samples`` is kept out of equality and of the JSON/CSV emitters; it is
    persisted separately as parquet.
    """

    bench_id: str
    samples: int
    mean_ns: float
    stddev_ns: float
    p50_ns: float
    p99_ns: float
    metadata: Dict[str, Any] = field(default_factory=dict)
    reference: Dict[str, str] = field(default_factory=dict)
    raw_samples: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = asdict(self)
        data.pop("raw_samples")
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BenchReport":
        return cls(
            bench_id=str(data["bench_id"]),
            samples=int(data["samples"]),
            mean_ns=float(data["mean_ns"]),
            stddev_ns=float(data["stddev_ns"]),
            p50_ns=float(data["p50_ns"]),
            p99_ns=float(data["p99_ns"]),
            metadata=dict(data.get("metadata") or {}),
            reference=dict(data.get("reference") or {}),
        )


def summarize(
    bench_id: str,
    per_op_ns: np.ndarray,
    metadata: Optional[Dict[str, Any]] = None,
    reference: Optional[Dict[str, str]] = None,
) -> BenchReport:
    """
    Build a report from per-sample, per-operation timings.

    Raises:
        ValueError: If there are no samples
    """
    if len(per_op_ns) == 0:
        raise ValueError(f"{bench_id}: no samples")
    stddev: float = float(np.std(per_op_ns, ddof=1)) if len(per_op_ns) > 1 else 0.0
    return BenchReport(
        bench_id=bench_id,
        samples=int(len(per_op_ns)),
        mean_ns=float(np.mean(per_op_ns)),
        stddev_ns=stddev,
        p50_ns=float(np.percentile(per_op_ns, 50)),
        p99_ns=float(np.percentile(per_op_ns, 99)),
        metadata=metadata or {},
        reference=reference or {},
        raw_samples=per_op_ns,
    )


def time_samples(op: Callable[[], Any], samples: int, inner: int) -> np.ndarray:
    """
    Time ``samples`` batches of ``inner`` calls of ``op``.

    Returns:
        Nanoseconds per call for every batch
    """
    timings: np.ndarray = np.empty(samples, dtype=np.float64)
    clock = time.perf_counter_ns
    for i in range(samples):
        start: int = clock()
        for _ in range(inner):
            op()
        timings[i] = (clock() - start) / inner
    return timings


def time_batched(op: Callable[[], Any], samples: int, inner: int) -> np.ndarray:
    """Time ``samples`` calls of ``op`` that each perform ``inner`` operations internally."""
    timings: np.ndarray = np.empty(samples, dtype=np.float64)
    clock = time.perf_counter_ns
    for i in range(samples):
        start: int = clock()
        op()
        timings[i] = (clock() - start) / inner
    return timings


def _check_sampling(samples: int, inner: int) -> None:
    if samples < MIN_TIMING_SAMPLES:
        raise ValueError(f"timing benches need at least {MIN_TIMING_SAMPLES} samples, got {samples}")
    if inner < 1:
        raise ValueError(f"inner iterations must be positive, got {inner}")


def bench_config(num_workers: int = 1, **overrides: int) -> HostConfig:
    """Host configuration for benches: long termination timeout so samples are never cut."""
    return HostConfig(
        num_workers=num_workers,
        watchdog_period_ns=BENCH_WATCHDOG_PERIOD_NS,
        termination_timeout_ns=BENCH_TERMINATION_TIMEOUT_NS,
    ).replace(**overrides)


def config_snapshot(config: HostConfig) -> Dict[str, Any]:
    return asdict(config)


class _ArmedHost:
    """Context manager: a host with watchdogs armed for the duration of a bench."""

    def __init__(self, config: HostConfig) -> None:
        self.host: Host = Host(config)

    def __enter__(self) -> Host:
        arm_watchdogs(self.host)
        return self.host

    def __exit__(self, *exc: Any) -> None:
        disarm_watchdogs(self.host)


# Microbenchmarks


def _overhead_metadata(bench_id: str, timings: np.ndarray, baseline_mean: float) -> Dict[str, Any]:
    """Overhead over the baseline and whether it meets the bench's bound."""
    overhead: float = float(np.mean(timings)) - baseline_mean
    bound: int = OVERHEAD_BOUND_NS[bench_id]
    within: bool = overhead < bound
    if not within:
        logger.warning(f"{bench_id}: overhead {overhead:.1f} ns exceeds the {bound} ns bound")
    return {"overhead_ns": overhead, "bound_ns": bound, "within_bound": within}


def run_empty_bench(
    samples: int = BENCH_SAMPLES,
    inner: int = BENCH_INNER_ITERATIONS,
    config: Optional[HostConfig] = None,
) -> BenchReport:
    """
    Round trip through the dispatcher for an extension that returns at once.

    The bare call of the same entry with a prepared context is the baseline;
    ``metadata["overhead_ns"]`` is the difference of the means.
    """
    _check_sampling(samples, inner)
    config = config or bench_config()
    with _ArmedHost(config) as host:
        handle: ExtensionHandle = load_extension(simple_manifest("empty", "empty_prog"), empty_prog, host)
        worker: WorkerState = host.workers[0]
        packet: PacketBuffer = PacketBuffer(build_frame(b""))
        ctx: ProgramContext = ProgramContext(host, handle, worker, packet)
        baseline: np.ndarray = time_samples(lambda: empty_prog(ctx), samples, inner)
        timings: np.ndarray = time_samples(lambda: dispatch(host, worker, handle, packet=packet), samples, inner)
    baseline_mean: float = float(np.mean(baseline))
    report: BenchReport = summarize(
        "empty",
        timings,
        metadata={
            "inner_iterations": inner,
            "baseline_mean_ns": baseline_mean,
            **_overhead_metadata("empty", timings, baseline_mean),
            "config": config_snapshot(config),
        },
        reference=PUBLISHED_REFERENCE_NS["empty"],
    )
    logger.info(f"empty: {report.mean_ns:.1f} ns/dispatch, overhead {report.metadata['overhead_ns']:.1f} ns")
    return report


def run_spinlock_bench(
    samples: int = BENCH_SAMPLES,
    inner: int = BENCH_INNER_ITERATIONS,
    config: Optional[HostConfig] = None,
) -> BenchReport:
    """
    Guarded acquire+release from inside an extension, against a raw lock baseline.

    The guarded path includes the helper flag transitions and the cleanup
    registry record and pop.
    """
    _check_sampling(samples, inner)
    config = config or bench_config()
    with _ArmedHost(config) as host:
        handle: ExtensionHandle = load_extension(
            simple_manifest("spinlock", "spinlock_bench", ProgramKind.TRACE_EVENT), spinlock_bench, host
        )
        worker: WorkerState = host.workers[0]
        cell = host.spinlock(BENCH_LOCK_ID)

        def raw_cycle() -> None:
            cell.raw_acquire()
            cell.raw_release()

        baseline: np.ndarray = time_samples(raw_cycle, samples, inner)
        event: Dict[str, Any] = {"lock_id": BENCH_LOCK_ID, "iterations": inner}
        timings: np.ndarray = time_batched(lambda: dispatch(host, worker, handle, event=event), samples, inner)
    baseline_mean: float = float(np.mean(baseline))
    report: BenchReport = summarize(
        "spinlock",
        timings,
        metadata={
            "inner_iterations": inner,
            "baseline_mean_ns": baseline_mean,
            **_overhead_metadata("spinlock", timings, baseline_mean),
            "registry_high_water": worker.registry_high_water,
            "config": config_snapshot(config),
        },
        reference=PUBLISHED_REFERENCE_NS["spinlock"],
    )
    logger.info(f"spinlock: {report.mean_ns:.1f} ns/cycle, overhead {report.metadata['overhead_ns']:.1f} ns")
    return report


def find_panic_depth(
    config: Optional[HostConfig] = None,
    entry_frame_bytes: int = RECURSION_PANIC_FRAME,
    frame_bytes: int = RECURSION_PANIC_FRAME,
    max_depth: int = 4 * RECURSION_MAX_DEPTH,
) -> Optional[int]:
    """
    Recursion depth at which the runtime stack check first panics.

    Returns:
        The call number that panicked with StackOverflowCheck, or None if
        ``max_depth`` calls fit under the threshold
    """
    host: Host = Host(config or bench_config())
    handle: ExtensionHandle = load_extension(
        recursion_manifest("recurse-panic", entry_frame_bytes, frame_bytes), recurse_entry, host
    )
    worker: WorkerState = host.workers[0]
    outcome: DispatchOutcome = dispatch(host, worker, handle, event={"depth": max_depth})
    if not outcome.panicked or outcome.panic.reason is not PanicReason.STACK_OVERFLOW_CHECK:
        return None
    # usage at the failed check covers the entry and every completed call
    return (worker.stack_at_last_panic - entry_frame_bytes) // frame_bytes + 1


def run_recursion_bench(
    max_depth: int = RECURSION_MAX_DEPTH,
    samples: int = BENCH_SAMPLES,
    inner: int = BENCH_INNER_ITERATIONS,
    config: Optional[HostConfig] = None,
    frame_bytes: int = RECURSION_BENCH_FRAME,
) -> List[BenchReport]:
    """
    Dispatch time of a runtime-checked recursive extension for depths 1..max_depth.

    Every report carries the affine fit of mean time against depth and the
    panic depth of a breaching configuration (1 KiB frames).

    Raises:
        ValueError: If ``max_depth`` frames would not fit under the threshold
    """
    _check_sampling(samples, inner)
    config = config or bench_config()
    if frame_bytes * (max_depth + 1) > config.stack_threshold_bytes:
        raise ValueError(
            f"depth {max_depth} with {frame_bytes}-byte frames exceeds the "
            f"{config.stack_threshold_bytes}-byte threshold"
        )
    reports: List[BenchReport] = []
    with _ArmedHost(config) as host:
        handle: ExtensionHandle = load_extension(
            recursion_manifest("recurse", frame_bytes, frame_bytes), recurse_entry, host
        )
        worker: WorkerState = host.workers[0]
        for depth in range(1, max_depth + 1):
            event: Dict[str, Any] = {"depth": depth}
            timings: np.ndarray = time_samples(
                lambda: dispatch(host, worker, handle, event=event), samples, inner
            )
            reports.append(summarize(f"recursion-{depth}", timings, metadata={"depth": depth, "inner_iterations": inner}))

    depths: np.ndarray = np.array([r.metadata["depth"] for r in reports], dtype=np.float64)
    means: np.ndarray = np.array([r.mean_ns for r in reports], dtype=np.float64)
    fit: Dict[str, float] = {"fit_slope_ns": float("nan"), "fit_intercept_ns": float(means[0]), "fit_r_squared": float("nan")}
    if len(reports) >= 2:
        slope, intercept, r_value, _, _ = linregress(depths, means)
        fit = {"fit_slope_ns": float(slope), "fit_intercept_ns": float(intercept), "fit_r_squared": float(r_value ** 2)}
    panic_depth: Optional[int] = find_panic_depth(config)
    for report in reports:
        report.metadata.update(fit)
        report.metadata["panic_depth"] = panic_depth
        report.metadata["config"] = config_snapshot(config)
        report.reference = PUBLISHED_REFERENCE_NS["recursion"]
    logger.info(
        f"recursion: slope {fit['fit_slope_ns']:.1f} ns/level, r^2 {fit['fit_r_squared']:.3f}, "
        f"panic depth {panic_depth}"
    )
    return reports


def run_map_bench(
    kind: str,
    samples: int = BENCH_SAMPLES,
    inner: int = BENCH_INNER_ITERATIONS,
    config: Optional[HostConfig] = None,
    hash_keys: int = 1,
) -> BenchReport:
    """
    Lookup latency for one map kind.

    Args:
        kind: ``array``, ``hash`` or ``atomic-static`` (read directly, no helper)
        hash_keys: Keys present in (and cycled through by) the hash bench

    Raises:
        ValueError: If ``kind`` is unknown
    """
    if kind not in MAP_KINDS:
        raise ValueError(f"unknown map kind {kind}; expected one of {MAP_KINDS}")
    _check_sampling(samples, inner)
    config = config or bench_config()
    event: Dict[str, Any] = {"iterations": inner, "keys": hash_keys}
    with _ArmedHost(config) as host:
        if kind == "array":
            spec = MapSpec(BENCH_ARRAY_MAP, MapKind.ARRAY, 4, 8, 1)
            manifest = simple_manifest("map-array", "array_lookup_bench", ProgramKind.TRACE_EVENT, maps=[spec])
            handle: ExtensionHandle = load_extension(manifest, array_lookup_bench, host)
        elif kind == "hash":
            spec = MapSpec(BENCH_HASH_MAP, MapKind.HASH, 4, 8, LARGE_HASH_KEYS)
            manifest = simple_manifest("map-hash", "hash_lookup_bench", ProgramKind.TRACE_EVENT, maps=[spec])
            handle = load_extension(manifest, hash_lookup_bench, host)
            for i in range(hash_keys):
                host.maps[BENCH_HASH_MAP].update(array_key(i), bytes(8))
        else:
            manifest = simple_manifest(
                "map-static", "static_read_bench", ProgramKind.TRACE_EVENT, static_vars=[BENCH_STATIC]
            )
            handle = load_extension(manifest, static_read_bench, host)
        worker: WorkerState = host.workers[0]
        timings: np.ndarray = time_batched(lambda: dispatch(host, worker, handle, event=event), samples, inner)
    bench_id: str = f"map-{kind}" if kind != "hash" else f"map-hash-{hash_keys}"
    report: BenchReport = summarize(
        bench_id,
        timings,
        metadata={"kind": kind, "hash_keys": hash_keys, "inner_iterations": inner, "config": config_snapshot(config)},
        reference=PUBLISHED_REFERENCE_NS["map"],
    )
    logger.info(f"{bench_id}: {report.mean_ns:.1f} ns/lookup")
    return report


def run_map_benches(
    samples: int = BENCH_SAMPLES,
    inner: int = BENCH_INNER_ITERATIONS,
    config: Optional[HostConfig] = None,
) -> List[BenchReport]:
    """Every map kind, plus the hash map with 4096 keys (its ratio to 1 key recorded)."""
    reports: List[BenchReport] = [run_map_bench(kind, samples, inner, config) for kind in MAP_KINDS]
    large: BenchReport = run_map_bench("hash", samples, inner, config, hash_keys=LARGE_HASH_KEYS)
    large.metadata["ratio_to_1_key"] = large.mean_ns / reports[-1].mean_ns
    reports.append(large)
    return reports


# Cache throughput simulation


def steer(frame: bytes, workers: int, seed: int = 0) -> int:
    """Receive-side steering: pick a worker from the hash of the request key."""
    info = parse_frame(frame)
    if info is None:
        return 0
    line: bytes = info.payload.partition(b"\r\n")[0]
    parts: List[bytes] = line.split(b" ")
    key: bytes = parts[1] if len(parts) > 1 else b""
    return fnv1a_32(key, seed) % workers


def _serve_partition(
    config: HostConfig,
    frames: Sequence[bytes],
    prefill: Sequence[Tuple[bytes, bytes]],
    prefill_cache: bool,
    egress: bool,
) -> Dict[str, Any]:
    host: Host = Host(config.replace(num_workers=1))
    ingress_id, egress_id = load_bmc(host, with_egress=egress)
    worker: WorkerState = host.workers[0]
    store: MemcachedStore = MemcachedStore()
    for key, value in prefill:
        store.set(key, value)
        if prefill_cache and egress_id is not None:
            dispatch(host, worker, egress_id, packet=PacketBuffer(build_server_reply(store.get(key))))
    verdicts: Counter = Counter()
    start: int = time.perf_counter_ns()
    for frame in frames:
        outcome, _ = serve_frame(host, worker, store, frame, ingress_id, egress_id)
        verdicts[outcome.verdict.value] += 1
    elapsed_ns: int = time.perf_counter_ns() - start
    return {
        "requests": len(frames),
        "elapsed_ns": elapsed_ns,
        "verdicts": dict(verdicts),
        "stats": read_bmc_stats(host),
        "panics": host.ring.total,
    }


@dataclass
class BmcSimReport:
    workers: int
    requests: int
    elapsed_s: float
    aggregate_rps: float
    per_worker_rps: List[float]
    hit_ratio: float
    verdicts: Dict[str, int]
    stats: Dict[str, int]
    panics: int
    reference: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def run_bmc_sim(
    frames: Sequence[bytes],
    workers: int = 1,
    prefill: Sequence[Tuple[bytes, bytes]] = (),
    prefill_cache: bool = True,
    egress: bool = True,
    config: Optional[HostConfig] = None,
) -> BmcSimReport:
    """
    Serve a trace through the cache with one OS process per worker.

    Each worker owns a full host replica and the trace partition steered to
    it by key hash. Throughput is measured inside each worker around its
    serve loop.

    Args:
        frames: Request frames in trace order
        workers: Number of worker processes
        prefill: ``(key, value)`` pairs stored before the run, in every replica
        prefill_cache: Also push each prefilled value through the egress fill
        egress: Load the egress fill program
        config: Host configuration template

    Raises:
        ValueError: If ``workers`` is not positive
    """
    if workers < 1:
        raise ValueError(f"workers must be positive: {workers}")
    config = config or bench_config()
    partitions: List[List[bytes]] = [[] for _ in range(workers)]
    for frame in frames:
        partitions[steer(frame, workers, config.hash_seed)].append(frame)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_serve_partition, config, partition, list(prefill), prefill_cache, egress)
            for partition in partitions
        ]
        results: List[Dict[str, Any]] = [future.result() for future in futures]

    verdicts: Counter = Counter()
    stats: Counter = Counter()
    for result in results:
        verdicts.update(result["verdicts"])
        stats.update(result["stats"])
    per_worker_rps: List[float] = [
        result["requests"] / (result["elapsed_ns"] / 1e9) if result["elapsed_ns"] > 0 else 0.0
        for result in results
    ]
    wall_ns: int = max(result["elapsed_ns"] for result in results)
    total: int = sum(result["requests"] for result in results)
    report: BmcSimReport = BmcSimReport(
        workers=workers,
        requests=total,
        elapsed_s=wall_ns / 1e9,
        aggregate_rps=total / (wall_ns / 1e9) if wall_ns > 0 else 0.0,
        per_worker_rps=per_worker_rps,
        hit_ratio=stats["hit"] / stats["get_recv"] if stats["get_recv"] else 0.0,
        verdicts=dict(verdicts),
        stats=dict(stats),
        panics=sum(result["panics"] for result in results),
        reference=PUBLISHED_REFERENCE_NS["bmc"],
    )
    logger.info(
        f"bmc sim: {workers} workers, {total} requests, {report.aggregate_rps:,.0f} RPS, "
        f"hit ratio {report.hit_ratio:.3f}"
    )
    return report


# Panic storm


@dataclass
class StormReport:
    count: int
    panics: int
    reasons: Dict[str, int]
    reloads: int
    healthy_served: int
    elapsed_s: float
    recovered: Optional[bool] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _audit(host: Host, refcounts: Dict[str, int], step: int) -> None:
    """
    Raises:
        StormInvariantBreach: On any held lock, leftover record or reference leak
    """
    problems: List[str] = []
    if host.locked_spinlocks():
        problems.append(f"locks held: {host.locked_spinlocks()}")
    if host.leaked_registries():
        problems.append(f"cleanup registries not empty on workers {host.leaked_registries()}")
    if host.live_map_refs():
        problems.append(f"{host.live_map_refs()} map value references still live")
    if host.refcount_snapshot() != refcounts:
        problems.append(f"refcounts {host.refcount_snapshot()} != {refcounts}")
    violations: int = sum(worker.panic_path_violations for worker in host.workers)
    if violations:
        problems.append(f"{violations} acquisitions from the panic path")
    if problems:
        raise StormInvariantBreach(f"after dispatch {step}: " + "; ".join(problems))


def _verify_recovery(host: Host, seed: int, requests: int) -> bool:
    """Reload the fixed cache and compare every reply with the store's answer."""
    for extension_id in ("bmc", "bmc_egress"):
        if host.is_loaded(extension_id):
            unload_extension(host, extension_id)
    load_bmc(host)
    store: MemcachedStore = MemcachedStore()
    rng: np.random.Generator = np.random.default_rng(seed)
    worker: WorkerState = host.workers[0]
    for i in range(requests):
        key: bytes = max_length_key(int(rng.integers(0, 8)))
        if rng.random() < 0.3:
            serve_frame(host, worker, store, build_set(key, make_value(rng, 16), i & 0xFFFF))
            continue
        item: Optional[Tuple[int, bytes]] = store.items.get(key)
        expected: bytes = b"END\r\n" if item is None else encode_value_reply(key, item[0], item[1])
        _, reply = serve_frame(host, worker, store, build_get(key, i & 0xFFFF))
        if reply != expected:
            logger.error(f"recovery mismatch on request {i}: {reply!r} != {expected!r}")
            return False
    return True


def run_panic_storm(
    count: int = STORM_DEFAULT_COUNT,
    config: Optional[HostConfig] = None,
    seed: int = 0,
    verify_recovery: bool = True,
) -> StormReport:
    """
    Drive ``count`` panic-triggering SETs through the faulty cache.

    The faulty variant is reloaded after every crash-stop. A healthy packet
    counter with its own map is dispatched after each injected packet and
    must serve every one. Locks, registries, map references and refcounts
    are audited after every dispatch.

    Raises:
        StormInvariantBreach: If any audit fails, a panic is missing or has the
            wrong reason, or the healthy extension misses a request
    """
    if count < 0:
        raise ValueError(f"count must be non-negative: {count}")
    config = config or HostConfig()
    host: Host = Host(config)
    healthy: ExtensionHandle = load_extension(
        simple_manifest("healthy", "packet_counter", maps=[counter_map_spec()]), packet_counter, host
    )
    load_bmc(host, faulty=True)
    refcounts: Dict[str, int] = host.refcount_snapshot()
    rng: np.random.Generator = np.random.default_rng(seed)
    reasons: Counter = Counter()
    reloads: int = 0
    served: int = 0
    panics_before: int = host.ring.total
    start: int = time.perf_counter_ns()

    for i in range(count):
        if not host.is_loaded("bmc"):
            load_bmc(host, faulty=True)
            reloads += 1
        worker: WorkerState = host.workers[i % len(host.workers)]
        frame: bytes = build_set(max_length_key(i), make_value(rng, 16), i & 0xFFFF)
        outcome: DispatchOutcome = dispatch(host, worker, "bmc", packet=PacketBuffer(frame))
        if not outcome.panicked:
            raise StormInvariantBreach(f"injected packet {i} did not panic")
        reasons[outcome.panic.reason.value] += 1
        if outcome.panic.reason is not PanicReason.OUT_OF_BOUNDS:
            raise StormInvariantBreach(f"injected packet {i} panicked with {outcome.panic.reason.value}")
        _audit(host, refcounts, i)

        result: DispatchOutcome = dispatch(host, worker, healthy, packet=PacketBuffer(build_get(b"probe")))
        if result.panicked or result.verdict is not PacketVerdict.PASS:
            raise StormInvariantBreach(f"healthy extension failed request {i}: {result}")
        served += 1
        _audit(host, refcounts, i)

    panics: int = host.ring.total - panics_before
    if panics != count:
        raise StormInvariantBreach(f"{panics} panic records for {count} injected packets")
    counted: int = int.from_bytes(host.maps[COUNTER_MAP].peek(array_key(0)) or b"", "little")
    if counted != served:
        raise StormInvariantBreach(f"healthy counter reads {counted}, served {served}")

    recovered: Optional[bool] = None
    if verify_recovery:
        recovered = _verify_recovery(host, seed, RECOVERY_CHECK_REQUESTS)
        if not recovered:
            raise StormInvariantBreach("reloaded cache disagrees with the store")
    report: StormReport = StormReport(
        count=count,
        panics=panics,
        reasons=dict(reasons),
        reloads=reloads,
        healthy_served=served,
        elapsed_s=(time.perf_counter_ns() - start) / 1e9,
        recovered=recovered,
    )
    logger.info(f"panic storm: {panics} panics, {reloads} reloads, healthy served {served}/{count}")
    return report


# Emitters


def reports_to_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    """One row per report; metadata and reference are JSON-encoded columns."""
    rows: List[Dict[str, Any]] = []
    for report in reports:
        row: Dict[str, Any] = report.to_dict()
        row["metadata"] = json.dumps(row["metadata"], sort_keys=True)
        row["reference"] = json.dumps(row["reference"], sort_keys=True)
        rows.append(row)
    return pd.DataFrame(rows, columns=["bench_id", "samples", "mean_ns", "stddev_ns", "p50_ns", "p99_ns", "metadata", "reference"])


def emit_json(reports: Sequence[BenchReport]) -> str:
    return json.dumps([report.to_dict() for report in reports], indent=2)


def parse_json(text: str) -> List[BenchReport]:
    return [BenchReport.from_dict(item) for item in json.loads(text)]


def write_csv(reports: Sequence[BenchReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_to_frame(reports).to_csv(path, index=False)
    logger.info(f"Wrote {len(reports)} reports to {path}")
    return path


def read_csv(path: Path) -> List[BenchReport]:
    """
    Parse a CSV written by ``write_csv``.

    Raises:
        FileNotFoundError: If the file does not exist
    """
    df: pd.DataFrame = pd.read_csv(path, float_precision="round_trip", dtype={"bench_id": str})
    reports: List[BenchReport] = []
    for row in df.to_dict("records"):
        row["metadata"] = json.loads(row["metadata"])
        row["reference"] = json.loads(row["reference"])
        reports.append(BenchReport.from_dict(row))
    return reports


def write_json(reports: Sequence[BenchReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_json(reports), encoding="utf-8")
    logger.info(f"Wrote {len(reports)} reports to {path}")
    return path


def read_json(path: Path) -> List[BenchReport]:
    return parse_json(Path(path).read_text(encoding="utf-8"))


def write_raw_samples(reports: Sequence[BenchReport], path: Path) -> Path:
    """Persist per-sample timings as parquet (long format)."""
    frames: List[pd.DataFrame] = [
        pd.DataFrame({
            "bench_id": report.bench_id,
            "sample": np.arange(len(report.raw_samples)),
            "ns_per_op": report.raw_samples,
        })
        for report in reports
        if report.raw_samples is not None
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df: pd.DataFrame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["bench_id", "sample", "ns_per_op"]
    )
    df.to_parquet(path, engine="pyarrow", index=False)
    logger.info(f"Wrote {len(df)} raw samples to {path}")
    return path


def summary_to_frame(summary: Mapping[str, Any]) -> pd.DataFrame:
    """Flatten a simulation or storm summary into a one-row frame."""
    return pd.json_normalize(dict(summary), sep=".")
