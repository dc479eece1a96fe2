"""In-datapath memcached cache as a single extension program.

The ingress program answers GET hits straight from a direct-mapped cache map
(rewriting the frame into a reply, verdict Tx) and invalidates entries on SET.
The egress program fills the cache from server replies. Both share the cache
map, so a crash-stop of one removes the other.

``bmc_ingress_faulty`` carries an off-by-one in key extraction that reads one
byte past the key window when a SET key has the maximum length.
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.config import (
    BMC_CACHE_ENTRIES,
    BMC_CACHE_MAP,
    BMC_LOCK_STRIPES,
    BMC_MAX_DATA_LEN,
    BMC_MAX_KEY_LEN,
    BMC_STATS_FIELDS,
    BMC_STATS_MAP,
    ETH_HLEN,
    ETH_P_IP,
    IPPROTO_UDP,
    IPV4_HLEN,
    MEMCACHED_PORT,
    MEMCACHED_UDP_HLEN,
    PAYLOAD_OFFSET,
    UDP_HLEN,
)
from src.core_types import (
    CallEdge,
    CallGraph,
    CallNode,
    DispatchOutcome,
    ExtensionManifest,
    MapKind,
    MapSpec,
    PacketVerdict,
    ProgramKind,
    WorkerState,
)
from src.dispatcher import ProgramContext, dispatch
from src.host import Host
from src.loader import load_extension
from src.safe_interface import (
    DESCRIPTORS,
    BoundedView,
    MapValueGuard,
    PacketBuffer,
    PerWorkerArrayMap,
    TypeDescriptor,
    TypedRecord,
    adjust_tail,
    array_key,
    fnv1a_32,
    map_lookup,
    transmute_checked,
)
from src.workload import MemcachedStore, build_server_reply, parse_frame


logger: logging.Logger = logging.getLogger(__name__)

ETH_HDR: TypeDescriptor = DESCRIPTORS.register(
    "ethhdr",
    [("dst", 0, 6, "u8"), ("src", 6, 6, "u8"), ("proto", 12, 2, "u16")],
    ETH_HLEN,
)
IP_HDR: TypeDescriptor = DESCRIPTORS.register(
    "iphdr",
    [
        ("version_ihl", 0, 1, "u8"),
        ("tos", 1, 1, "u8"),
        ("total_length", 2, 2, "u16"),
        ("id", 4, 2, "u16"),
        ("frag_off", 6, 2, "u16"),
        ("ttl", 8, 1, "u8"),
        ("protocol", 9, 1, "u8"),
        ("check", 10, 2, "u16"),
        ("saddr", 12, 4, "u32"),
        ("daddr", 16, 4, "u32"),
    ],
    IPV4_HLEN,
)
UDP_HDR: TypeDescriptor = DESCRIPTORS.register(
    "udphdr",
    [("source", 0, 2, "u16"), ("dest", 2, 2, "u16"), ("length", 4, 2, "u16"), ("check", 6, 2, "u16")],
    UDP_HLEN,
)
MEMCACHED_HDR: TypeDescriptor = DESCRIPTORS.register(
    "memcached_udp_hdr",
    [("request_id", 0, 2, "u16"), ("seq", 2, 2, "u16"), ("count", 4, 2, "u16"), ("reserved", 6, 2, "u16")],
    MEMCACHED_UDP_HLEN,
)
CACHE_ENTRY: TypeDescriptor = DESCRIPTORS.register(
    "bmc_cache_entry",
    [
        ("valid", 0, 1, "u8"),
        ("reserved0", 1, 3, "u8"),
        ("key_hash", 4, 4, "u32"),
        ("key_len", 8, 2, "u16"),
        ("data_len", 10, 2, "u16"),
        ("key", 12, BMC_MAX_KEY_LEN, "u8"),
        ("reserved1", 12 + BMC_MAX_KEY_LEN, 2, "u8"),
        ("data", 14 + BMC_MAX_KEY_LEN, BMC_MAX_DATA_LEN, "u8"),
    ],
    14 + BMC_MAX_KEY_LEN + BMC_MAX_DATA_LEN,
)
STATS: TypeDescriptor = DESCRIPTORS.register(
    "bmc_stats",
    [(name, 8 * i, 8, "u64") for i, name in enumerate(BMC_STATS_FIELDS)],
    8 * len(BMC_STATS_FIELDS),
)

CACHE_SPEC: MapSpec = MapSpec(BMC_CACHE_MAP, MapKind.ARRAY, 4, CACHE_ENTRY.total_bytes, BMC_CACHE_ENTRIES)
STATS_SPEC: MapSpec = MapSpec(BMC_STATS_MAP, MapKind.PER_WORKER, 4, STATS.total_bytes, 1)
STATS_KEY: bytes = array_key(0)

GET_PREFIX: bytes = b"get "
SET_PREFIX: bytes = b"set "
VALUE_PREFIX: bytes = b"VALUE "
SPACE, CR = ord(" "), ord("\r")


def cache_index(key_hash: int, entries: int = BMC_CACHE_ENTRIES) -> int:
    return key_hash % entries


def stripe_lock_id(index: int) -> str:
    return f"bmc-cache-lock-{index % BMC_LOCK_STRIPES}"


def _bump(stats: TypedRecord, name: str) -> None:
    stats[name] = stats[name] + 1


def _key_end(window: BoundedView, faulty: bool) -> int:
    """Index of the first space or CR in the key window, or the window length."""
    limit: int = window.length + 1 if faulty else window.length
    for i in range(limit):
        byte: int = window.read_u8(i)
        if byte == SPACE or byte == CR:
            return i
    return window.length


def _extract_key(payload: BoundedView, prefix_len: int, faulty: bool = False) -> Optional[bytes]:
    """Key bytes after the command prefix, or None if malformed."""
    if payload.length <= prefix_len:
        return None
    window: BoundedView = payload.subview(prefix_len, min(BMC_MAX_KEY_LEN, payload.length - prefix_len))
    end: int = _key_end(window, faulty)
    if end == 0:
        return None
    # the key must be followed by a delimiter inside the payload
    after: int = prefix_len + end
    if after >= payload.length:
        return None
    delimiter: int = payload.read_u8(after)
    if delimiter != SPACE and delimiter != CR:
        return None
    return window.read(0, end)


def invalidate_cache(ctx: ProgramContext, payload: BoundedView, stats: TypedRecord, faulty: bool = False) -> None:
    """Drop the cached entry of a SET's key if it is present and byte-equal."""
    key: Optional[bytes] = _extract_key(payload, len(SET_PREFIX), faulty)
    if key is None:
        _bump(stats, "drop")
        return
    key_hash: int = fnv1a_32(key, ctx.config.hash_seed)
    index: int = cache_index(key_hash, ctx.map(BMC_CACHE_MAP).spec.max_entries)
    with ctx.lock(stripe_lock_id(index)):
        entry_ref: Optional[MapValueGuard] = map_lookup(ctx.worker, ctx.map(BMC_CACHE_MAP), array_key(index))
        if entry_ref is None:
            return
        with entry_ref:
            entry: TypedRecord = entry_ref.transmute(CACHE_ENTRY)
            if entry["valid"] and entry["key_len"] == len(key) and entry.field_view("key").read(0, len(key)) == key:
                entry["valid"] = 0
                _bump(stats, "invalidation")


def _write_reply(ctx: ProgramContext, reply: bytes) -> bool:
    """Turn the request frame into a reply frame carrying ``reply``."""
    packet: PacketBuffer = ctx.packet
    worker: WorkerState = ctx.worker
    new_length: int = PAYLOAD_OFFSET + len(reply)
    if not adjust_tail(worker, packet, new_length - packet.length):
        return False
    view: BoundedView = packet.view(worker)
    eth: TypedRecord = transmute_checked(view, ETH_HDR)
    dst, src = eth["dst"], eth["src"]
    eth["dst"], eth["src"] = src, dst
    ip: TypedRecord = transmute_checked(view.subview(ETH_HLEN, IPV4_HLEN), IP_HDR)
    saddr, daddr = ip["saddr"], ip["daddr"]
    ip["saddr"], ip["daddr"] = daddr, saddr
    ip["total_length"] = IPV4_HLEN + UDP_HLEN + MEMCACHED_UDP_HLEN + len(reply)
    udp: TypedRecord = transmute_checked(view.subview(ETH_HLEN + IPV4_HLEN, UDP_HLEN), UDP_HDR)
    source, dest = udp["source"], udp["dest"]
    udp["source"], udp["dest"] = dest, source
    udp["length"] = UDP_HLEN + MEMCACHED_UDP_HLEN + len(reply)
    udp["check"] = 0
    memcached: TypedRecord = transmute_checked(
        view.subview(ETH_HLEN + IPV4_HLEN + UDP_HLEN, MEMCACHED_UDP_HLEN), MEMCACHED_HDR
    )
    memcached["seq"] = 0
    memcached["count"] = 1
    memcached["reserved"] = 0
    view.write(PAYLOAD_OFFSET, reply)
    return True


def handle_get(ctx: ProgramContext, payload: BoundedView, stats: TypedRecord) -> PacketVerdict:
    key: Optional[bytes] = _extract_key(payload, len(GET_PREFIX))
    if key is None:
        _bump(stats, "drop")
        return PacketVerdict.PASS
    key_hash: int = fnv1a_32(key, ctx.config.hash_seed)
    index: int = cache_index(key_hash, ctx.map(BMC_CACHE_MAP).spec.max_entries)
    reply: Optional[bytes] = None
    with ctx.lock(stripe_lock_id(index)):
        entry_ref: Optional[MapValueGuard] = map_lookup(ctx.worker, ctx.map(BMC_CACHE_MAP), array_key(index))
        if entry_ref is not None:
            with entry_ref:
                entry: TypedRecord = entry_ref.transmute(CACHE_ENTRY)
                key_len: int = entry["key_len"]
                if entry["valid"] and key_len == len(key) and entry.field_view("key").read(0, key_len) == key:
                    reply = entry.field_view("data").read(0, entry["data_len"])
    if reply is None or not ctx.call("bmc_write_reply", _write_reply, reply):
        _bump(stats, "miss")
        return PacketVerdict.PASS
    _bump(stats, "hit")
    return PacketVerdict.TX


def _ingress(ctx: ProgramContext, faulty: bool) -> PacketVerdict:
    view: BoundedView = ctx.packet.view(ctx.worker)
    stats_ref: Optional[MapValueGuard] = map_lookup(ctx.worker, ctx.map(BMC_STATS_MAP), STATS_KEY)
    if stats_ref is None:
        return PacketVerdict.PASS
    with stats_ref:
        stats: TypedRecord = stats_ref.transmute(STATS)
        if view.length < ETH_HLEN or transmute_checked(view, ETH_HDR)["proto"] != ETH_P_IP:
            return PacketVerdict.PASS
        if view.length < ETH_HLEN + IPV4_HLEN:
            _bump(stats, "drop")
            return PacketVerdict.PASS
        if transmute_checked(view.subview(ETH_HLEN, IPV4_HLEN), IP_HDR)["protocol"] != IPPROTO_UDP:
            return PacketVerdict.PASS
        if view.length < ETH_HLEN + IPV4_HLEN + UDP_HLEN:
            _bump(stats, "drop")
            return PacketVerdict.PASS
        udp: TypedRecord = transmute_checked(view.subview(ETH_HLEN + IPV4_HLEN, UDP_HLEN), UDP_HDR)
        if udp["dest"] != MEMCACHED_PORT:
            return PacketVerdict.PASS
        payload_length: int = udp["length"] - UDP_HLEN - MEMCACHED_UDP_HLEN
        if payload_length < 0 or PAYLOAD_OFFSET + payload_length > view.length:
            _bump(stats, "drop")
            return PacketVerdict.PASS
        payload: BoundedView = view.subview(PAYLOAD_OFFSET, payload_length)
        if payload_length >= 4 and payload.read(0, 4) == GET_PREFIX:
            _bump(stats, "get_recv")
            return ctx.call("bmc_handle_get", handle_get, payload, stats)
        if payload_length >= 4 and payload.read(0, 4) == SET_PREFIX:
            _bump(stats, "set_recv")
            ctx.call("bmc_invalidate_cache", invalidate_cache, payload, stats, faulty)
        return PacketVerdict.PASS


def bmc_ingress(ctx: ProgramContext) -> PacketVerdict:
    """Packet-ingress entry of the cache."""
    return _ingress(ctx, faulty=False)


def bmc_ingress_faulty(ctx: ProgramContext) -> PacketVerdict:
    """Same as ``bmc_ingress`` with the off-by-one key scan on SET."""
    return _ingress(ctx, faulty=True)


def bmc_egress_fill(ctx: ProgramContext, key: bytes, reply: bytes) -> bool:
    """
    Insert or overwrite the cache entry for ``key``.

    Returns:
        False if the key or reply does not fit an entry (not cached)
    """
    if not 0 < len(key) <= BMC_MAX_KEY_LEN or len(reply) > BMC_MAX_DATA_LEN:
        return False
    key_hash: int = fnv1a_32(key, ctx.config.hash_seed)
    index: int = cache_index(key_hash, ctx.map(BMC_CACHE_MAP).spec.max_entries)
    with ctx.lock(stripe_lock_id(index)):
        entry_ref: Optional[MapValueGuard] = map_lookup(ctx.worker, ctx.map(BMC_CACHE_MAP), array_key(index))
        if entry_ref is None:
            return False
        with entry_ref:
            entry: TypedRecord = entry_ref.transmute(CACHE_ENTRY)
            entry["valid"] = 0
            entry["key_hash"] = key_hash
            entry["key_len"] = len(key)
            entry["key"] = key.ljust(BMC_MAX_KEY_LEN, b"\0")
            entry["data_len"] = len(reply)
            entry["data"] = reply
            entry["valid"] = 1
    return True


def bmc_egress(ctx: ProgramContext) -> PacketVerdict:
    """Packet-egress entry: cache ``VALUE`` replies leaving the server."""
    view: BoundedView = ctx.packet.view(ctx.worker)
    if view.length < PAYLOAD_OFFSET:
        return PacketVerdict.PASS
    udp: TypedRecord = transmute_checked(view.subview(ETH_HLEN + IPV4_HLEN, UDP_HLEN), UDP_HDR)
    payload_length: int = udp["length"] - UDP_HLEN - MEMCACHED_UDP_HLEN
    if udp["source"] != MEMCACHED_PORT or payload_length < 0 or PAYLOAD_OFFSET + payload_length > view.length:
        return PacketVerdict.PASS
    payload: BoundedView = view.subview(PAYLOAD_OFFSET, payload_length)
    if payload_length <= len(VALUE_PREFIX) or payload.read(0, len(VALUE_PREFIX)) != VALUE_PREFIX:
        return PacketVerdict.PASS
    key: Optional[bytes] = _extract_key(payload, len(VALUE_PREFIX))
    if key is None:
        return PacketVerdict.PASS
    ctx.call("bmc_egress_fill", bmc_egress_fill, key, payload.read(0, payload_length))
    return PacketVerdict.PASS


# Manifests and loading


def ingress_manifest(extension_id: str = "bmc", faulty: bool = False) -> ExtensionManifest:
    entry: str = "bmc_ingress_faulty" if faulty else "bmc_ingress"
    return ExtensionManifest(
        extension_id=extension_id,
        program_kind=ProgramKind.PACKET_INGRESS,
        feature_flags=frozenset(),
        callgraph=CallGraph(
            nodes=(
                CallNode(entry, 256, calls_helper=True),
                CallNode("bmc_handle_get", 192, calls_helper=True),
                CallNode("bmc_write_reply", 128, calls_helper=True),
                CallNode("bmc_invalidate_cache", 160, calls_helper=True),
            ),
            edges=(
                CallEdge(entry, ("bmc_handle_get",)),
                CallEdge("bmc_handle_get", ("bmc_write_reply",)),
                CallEdge(entry, ("bmc_invalidate_cache",)),
            ),
        ),
        entry_symbol=entry,
        declared_maps=(CACHE_SPEC, STATS_SPEC),
    )


def egress_manifest(extension_id: str = "bmc_egress") -> ExtensionManifest:
    return ExtensionManifest(
        extension_id=extension_id,
        program_kind=ProgramKind.PACKET_EGRESS,
        feature_flags=frozenset(),
        callgraph=CallGraph(
            nodes=(
                CallNode("bmc_egress", 192, calls_helper=True),
                CallNode("bmc_egress_fill", 160, calls_helper=True),
            ),
            edges=(CallEdge("bmc_egress", ("bmc_egress_fill",)),),
        ),
        entry_symbol="bmc_egress",
        declared_maps=(CACHE_SPEC,),
    )


def load_bmc(
    host: Host,
    faulty: bool = False,
    with_egress: bool = True,
    ingress_id: str = "bmc",
    egress_id: str = "bmc_egress",
) -> Tuple[str, Optional[str]]:
    """Load the ingress program (and the egress filler) into a host."""
    entry = bmc_ingress_faulty if faulty else bmc_ingress
    load_extension(ingress_manifest(ingress_id, faulty), entry, host)
    if not with_egress:
        return ingress_id, None
    load_extension(egress_manifest(egress_id), bmc_egress, host)
    return ingress_id, egress_id


def read_bmc_stats(host: Host) -> Dict[str, int]:
    """Sum the per-worker stats map over all workers."""
    stats_map = host.maps.get(BMC_STATS_MAP)
    if not isinstance(stats_map, PerWorkerArrayMap):
        return {name: 0 for name in BMC_STATS_FIELDS}
    rows: List[bytes] = stats_map.values_for(STATS_KEY)
    counters: np.ndarray = np.frombuffer(b"".join(rows), dtype="<u8").reshape(len(rows), -1)
    totals: np.ndarray = counters.sum(axis=0)
    return {name: int(totals[i]) for i, name in enumerate(BMC_STATS_FIELDS)}


def serve_frame(
    host: Host,
    worker: WorkerState,
    store: MemcachedStore,
    frame: bytes,
    ingress_id: str = "bmc",
    egress_id: Optional[str] = "bmc_egress",
) -> Tuple[DispatchOutcome, Optional[bytes]]:
    """
    Push one client frame through the cache and, on Pass, the user-space store.

    Returns:
        The ingress outcome and the reply payload the client receives (None
        for dropped or non-memcached frames)
    """
    packet: PacketBuffer = PacketBuffer(frame)
    outcome: DispatchOutcome = dispatch(host, worker, ingress_id, packet=packet)
    if outcome.verdict is PacketVerdict.TX:
        info = parse_frame(packet.frame())
        return outcome, info.payload if info is not None else None
    if outcome.verdict is not PacketVerdict.PASS:
        return outcome, None
    request = parse_frame(frame)
    if request is None or request.dst_port != MEMCACHED_PORT:
        return outcome, None
    reply: bytes = store.handle(request.payload)
    if egress_id is not None and host.is_loaded(egress_id) and egress_id not in host.quarantined:
        dispatch(host, worker, egress_id, packet=PacketBuffer(build_server_reply(reply, request.request_id)))
    return outcome, reply
