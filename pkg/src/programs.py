"""Catalog of built-in extension programs and manifest builders.

Manifests name their code by ``entry_symbol``; ``resolve_entry`` maps that
symbol to the callable the dispatcher runs. The catalog holds the cache
programs, the benchmark programs and the fault demos used by the CLI.
"""

import logging
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

from src.bmc import bmc_egress, bmc_ingress, bmc_ingress_faulty
from src.config import ARRAY_KEY_BYTES
from src.core_types import (
    CallEdge,
    CallGraph,
    CallNode,
    EdgeKind,
    ExtensionManifest,
    MapKind,
    MapSpec,
    PacketVerdict,
    ProgramKind,
)
from src.dispatcher import ProgramContext
from src.errors import ManifestError
from src.safe_interface import BoundedView, MapValueGuard, array_key, map_lookup


logger: logging.Logger = logging.getLogger(__name__)

Entry = Callable[[ProgramContext], object]

DEFAULT_FRAME_BYTES: int = 256
COUNTER_MAP: str = "pkt_counter"
BENCH_ARRAY_MAP: str = "bench_array"
BENCH_HASH_MAP: str = "bench_hash"
BENCH_STATIC: str = "bench_static"
EVENT_COUNTER: str = "events"


def empty_prog(ctx: ProgramContext) -> PacketVerdict:
    return PacketVerdict.PASS


def counter_event(ctx: ProgramContext) -> int:
    """Trace-event program: bump a static counter."""
    ctx.static(EVENT_COUNTER).add(1)
    return 0


def packet_counter(ctx: ProgramContext) -> PacketVerdict:
    """Count packets in slot 0 of its own array map."""
    slot: Optional[MapValueGuard] = map_lookup(ctx.worker, ctx.map(COUNTER_MAP), array_key(0))
    if slot is None:
        return PacketVerdict.DROP
    with slot:
        view: BoundedView = slot.view()
        view.write_uint(0, 8, view.read_uint(0, 8) + 1)
    return PacketVerdict.PASS


def spin_forever(ctx: ProgramContext) -> int:
    """Loops without ever calling a helper; only a forced unwind ends it."""
    spins: int = 0
    while True:
        spins += 1


def spin_swallow_once(ctx: ProgramContext) -> int:
    """Swallows the first forced unwind with a bare except, then spins again."""
    spins: int = 0
    try:
        while True:
            spins += 1
    except:  # noqa: E722
        pass
    while True:
        spins += 1


def lock_stall(ctx: ProgramContext) -> int:
    """Spin inside the lock helper on the lock named by the event."""
    with ctx.lock(ctx.event["lock_id"]):
        pass
    return 0


def lock_then_panic(ctx: ProgramContext) -> int:
    """Acquire a lock and an object reference, then panic while holding both."""
    ctx.get_ref(ctx.event["object_id"])
    ctx.lock(ctx.event["lock_id"])
    ctx.panic("panic while holding a lock and a reference")
    return 0


def double_lock(ctx: ProgramContext) -> int:
    with ctx.lock(ctx.event["lock_id"]):
        with ctx.lock(ctx.event["second_lock_id"]):
            pass
    return 0


def oob_read(ctx: ProgramContext) -> PacketVerdict:
    """Read one byte past the end of the packet."""
    view: BoundedView = ctx.packet.view(ctx.worker)
    view.read_u8(view.length)
    return PacketVerdict.PASS


def recurse(ctx: ProgramContext, depth: int) -> int:
    if depth <= 1:
        return 1
    return 1 + ctx.call("recurse", recurse, depth - 1)


def recurse_entry(ctx: ProgramContext) -> int:
    """Recurse ``event["depth"]`` levels below the entry."""
    depth: int = int(ctx.event["depth"])
    if depth < 1:
        return 0
    ctx.call("recurse", recurse, depth)
    return 0


def spinlock_bench(ctx: ProgramContext) -> int:
    """Take and drop one spinlock ``event["iterations"]`` times."""
    lock_id: str = ctx.event["lock_id"]
    for _ in range(int(ctx.event["iterations"])):
        ctx.lock(lock_id).release()
    return 0


def _lookup_loop(ctx: ProgramContext, map_id: str, keys: Sequence[bytes], iterations: int) -> int:
    shared_map = ctx.map(map_id)
    worker = ctx.worker
    hits: int = 0
    for i in range(iterations):
        key: bytes = keys[i % len(keys)]
        guard: Optional[MapValueGuard] = map_lookup(worker, shared_map, key)
        if guard is not None:
            guard.release()
            hits += 1
    return hits


def array_lookup_bench(ctx: ProgramContext) -> int:
    """Look up ``event["iterations"]`` times index 0 of the bench array map."""
    _lookup_loop(ctx, BENCH_ARRAY_MAP, [array_key(0)], int(ctx.event["iterations"]))
    return 0


def hash_lookup_bench(ctx: ProgramContext) -> int:
    """Cycle lookups over ``event["keys"]`` present keys of the bench hash map."""
    iterations: int = int(ctx.event["iterations"])
    keys: int = int(ctx.event["keys"])
    _lookup_loop(ctx, BENCH_HASH_MAP, [array_key(i) for i in range(keys)], iterations)
    return 0


def static_read_bench(ctx: ProgramContext) -> int:
    """Read the bench static directly, without a helper."""
    counter = ctx.static(BENCH_STATIC)
    for _ in range(int(ctx.event["iterations"])):
        counter.read()
    return 0


PROGRAMS: Dict[str, Entry] = {
    "empty_prog": empty_prog,
    "counter_event": counter_event,
    "packet_counter": packet_counter,
    "spin_forever": spin_forever,
    "spin_swallow_once": spin_swallow_once,
    "lock_stall": lock_stall,
    "lock_then_panic": lock_then_panic,
    "double_lock": double_lock,
    "oob_read": oob_read,
    "recurse_entry": recurse_entry,
    "spinlock_bench": spinlock_bench,
    "array_lookup_bench": array_lookup_bench,
    "hash_lookup_bench": hash_lookup_bench,
    "static_read_bench": static_read_bench,
    "bmc_ingress": bmc_ingress,
    "bmc_ingress_faulty": bmc_ingress_faulty,
    "bmc_egress": bmc_egress,
}


def resolve_entry(entry_symbol: str) -> Entry:
    """
    Find the code for a manifest's entry symbol.

    Raises:
        ManifestError: If no built-in program has that symbol
    """
    entry: Optional[Entry] = PROGRAMS.get(entry_symbol)
    if entry is None:
        raise ManifestError(f"no program implements entry symbol {entry_symbol}")
    return entry


# Manifest builders


def simple_manifest(
    extension_id: str,
    entry_symbol: str,
    program_kind: ProgramKind = ProgramKind.PACKET_INGRESS,
    frame_bytes: int = DEFAULT_FRAME_BYTES,
    maps: Iterable[MapSpec] = (),
    static_vars: Iterable[str] = (),
    feature_flags: Iterable[str] = (),
) -> ExtensionManifest:
    """Single-function manifest (statically bounded by its one frame)."""
    return ExtensionManifest(
        extension_id=extension_id,
        program_kind=program_kind,
        feature_flags=frozenset(feature_flags),
        callgraph=CallGraph(nodes=(CallNode(entry_symbol, frame_bytes, calls_helper=True),)),
        entry_symbol=entry_symbol,
        declared_maps=tuple(maps),
        static_vars=tuple(static_vars),
    )


def recursion_manifest(
    extension_id: str = "recurse",
    entry_frame_bytes: int = DEFAULT_FRAME_BYTES,
    frame_bytes: int = DEFAULT_FRAME_BYTES,
) -> ExtensionManifest:
    """``recurse_entry -> recurse -> recurse ...``: a cycle, so runtime-checked."""
    return ExtensionManifest(
        extension_id=extension_id,
        program_kind=ProgramKind.TRACE_EVENT,
        feature_flags=frozenset(),
        callgraph=CallGraph(
            nodes=(CallNode("recurse_entry", entry_frame_bytes), CallNode("recurse", frame_bytes)),
            edges=(CallEdge("recurse_entry", ("recurse",)), CallEdge("recurse", ("recurse",))),
        ),
        entry_symbol="recurse_entry",
    )


def indirect_manifest(extension_id: str, entry_symbol: str, targets: Tuple[str, ...] = ()) -> ExtensionManifest:
    """Entry with an indirect call over ``targets`` (empty: unknown target)."""
    nodes: Tuple[CallNode, ...] = (CallNode(entry_symbol, DEFAULT_FRAME_BYTES),) + tuple(
        CallNode(target, DEFAULT_FRAME_BYTES) for target in targets
    )
    return ExtensionManifest(
        extension_id=extension_id,
        program_kind=ProgramKind.TRACE_EVENT,
        feature_flags=frozenset(),
        callgraph=CallGraph(nodes=nodes, edges=(CallEdge(entry_symbol, targets, EdgeKind.INDIRECT),)),
        entry_symbol=entry_symbol,
    )


def counter_map_spec(map_id: str = COUNTER_MAP) -> MapSpec:
    return MapSpec(map_id, MapKind.ARRAY, ARRAY_KEY_BYTES, 8, 1)
