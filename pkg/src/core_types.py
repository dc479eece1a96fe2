"""Domain types shared by the loader, dispatcher, helpers and watchdog."""

import dataclasses
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Deque, Dict, FrozenSet, List, Optional, Tuple, Union

from src.config import (
    ARRAY_KEY_BYTES,
    DEFAULT_HASH_SEED,
    DEFAULT_NUM_WORKERS,
    FLAG_TRACE_CAPACITY,
    PAGE_SIZE,
    RING_CAPACITY,
    SPIN_YIELD_ITERATIONS,
    STACK_THRESHOLD_PAGES,
    STACK_TOTAL_PAGES,
    TERMINATION_TIMEOUT_NS,
    WATCHDOG_PERIOD_NS,
)
from src.errors import IllegalFlagTransition, ManifestError


@dataclass(frozen=True)
class HostConfig:
    """
    Host-wide configuration.

    Durations are nanoseconds on the monotonic clock. ``per_function_frame_limit``
    defaults to one page and ``quiesce_timeout_ns`` to four termination timeouts.

    Raises:
        ValueError: If any invariant between the fields is violated
    """

    num_workers: int = DEFAULT_NUM_WORKERS
    page_size: int = PAGE_SIZE
    stack_total_pages: int = STACK_TOTAL_PAGES
    stack_threshold_pages: int = STACK_THRESHOLD_PAGES
    per_function_frame_limit: Optional[int] = None
    watchdog_period_ns: int = WATCHDOG_PERIOD_NS
    termination_timeout_ns: int = TERMINATION_TIMEOUT_NS
    ring_capacity: int = RING_CAPACITY
    hash_seed: int = DEFAULT_HASH_SEED
    spin_yield_iterations: int = SPIN_YIELD_ITERATIONS
    quiesce_timeout_ns: Optional[int] = None

    def __post_init__(self) -> None:
        if self.per_function_frame_limit is None:
            object.__setattr__(self, "per_function_frame_limit", self.page_size)
        if self.quiesce_timeout_ns is None:
            object.__setattr__(self, "quiesce_timeout_ns", 4 * self.termination_timeout_ns)

        if self.num_workers < 1:
            raise ValueError(f"num_workers must be positive: {self.num_workers}")
        if self.page_size <= 0:
            raise ValueError(f"page_size must be positive: {self.page_size}")
        if not 0 < self.stack_threshold_pages < self.stack_total_pages:
            raise ValueError(
                f"stack_threshold_pages ({self.stack_threshold_pages}) must be positive "
                f"and below stack_total_pages ({self.stack_total_pages})"
            )
        if not 0 < self.per_function_frame_limit <= self.page_size:
            raise ValueError(
                f"per_function_frame_limit ({self.per_function_frame_limit}) "
                f"must be in (0, page_size]"
            )
        if self.watchdog_period_ns <= 0:
            raise ValueError(f"watchdog_period must be positive: {self.watchdog_period_ns}")
        if self.termination_timeout_ns < self.watchdog_period_ns:
            raise ValueError("termination_timeout must be at least watchdog_period")
        if self.ring_capacity < 1 or self.spin_yield_iterations < 1:
            raise ValueError("ring_capacity and spin_yield_iterations must be positive")

    @property
    def stack_threshold_bytes(self) -> int:
        return self.stack_threshold_pages * self.page_size

    @property
    def stack_total_bytes(self) -> int:
        return self.stack_total_pages * self.page_size

    def replace(self, **changes: int) -> "HostConfig":
        """Return a copy with some fields changed (derived defaults recomputed)."""
        if "page_size" in changes and "per_function_frame_limit" not in changes:
            changes["per_function_frame_limit"] = None
        if "termination_timeout_ns" in changes and "quiesce_timeout_ns" not in changes:
            changes["quiesce_timeout_ns"] = None
        return dataclasses.replace(self, **changes)


class ProgramKind(str, Enum):
    PACKET_INGRESS = "packet-ingress"
    PACKET_EGRESS = "packet-egress"
    TRACE_EVENT = "trace-event"

    @property
    def is_packet(self) -> bool:
        return self is not ProgramKind.TRACE_EVENT


class PacketVerdict(str, Enum):
    PASS = "pass"
    DROP = "drop"
    TX = "tx"


Verdict = Union[PacketVerdict, int]

# Error code a trace-event program reports after a panic
TRACE_PANIC_CODE: int = -1


def panicked_default(kind: ProgramKind) -> Verdict:
    """Verdict the hook observes after the extension panicked."""
    if kind.is_packet:
        return PacketVerdict.DROP
    return TRACE_PANIC_CODE


def is_valid_verdict(kind: ProgramKind, value: object) -> bool:
    """Check a returned value against the program kind's verdict type."""
    if kind.is_packet:
        return isinstance(value, PacketVerdict)
    return isinstance(value, int) and not isinstance(value, bool)


class MapKind(str, Enum):
    ARRAY = "array"
    HASH = "hash"
    PER_WORKER = "per-worker"


@dataclass(frozen=True)
class MapSpec:
    """Declared shape of a shared map."""

    map_id: str
    kind: MapKind
    key_bytes: int
    value_bytes: int
    max_entries: int

    def __post_init__(self) -> None:
        if not self.map_id:
            raise ManifestError("map_id must be nonempty")
        if self.max_entries < 1:
            raise ManifestError(f"map {self.map_id}: max_entries must be at least 1")
        if self.value_bytes < 1 or self.key_bytes < 1:
            raise ManifestError(f"map {self.map_id}: key and value sizes must be positive")
        if self.kind in (MapKind.ARRAY, MapKind.PER_WORKER) and self.key_bytes != ARRAY_KEY_BYTES:
            raise ManifestError(
                f"map {self.map_id}: {self.kind.value} maps are indexed by "
                f"{ARRAY_KEY_BYTES}-byte keys, got {self.key_bytes}"
            )


class EdgeKind(str, Enum):
    DIRECT = "direct"
    INDIRECT = "indirect"


@dataclass(frozen=True)
class CallNode:
    function_id: str
    frame_bytes: int
    calls_helper: bool = False


@dataclass(frozen=True)
class CallEdge:
    """
    Call from ``caller`` to ``callees``.

    A direct edge names exactly one callee. An indirect edge names the set of
    possible targets; an empty set marks an unknown target.
    """

    caller: str
    callees: Tuple[str, ...]
    kind: EdgeKind = EdgeKind.DIRECT

    @property
    def callee(self) -> str:
        return self.callees[0]


@dataclass(frozen=True)
class CallGraph:
    nodes: Tuple[CallNode, ...]
    edges: Tuple[CallEdge, ...] = ()

    def node_ids(self) -> List[str]:
        return [node.function_id for node in self.nodes]

    def frame_table(self) -> Dict[str, int]:
        return {node.function_id: node.frame_bytes for node in self.nodes}

    def successors(self, function_id: str) -> List[str]:
        """Known callees of a function, in edge order, without duplicates."""
        seen: Dict[str, None] = {}
        for edge in self.edges:
            if edge.caller == function_id:
                for callee in edge.callees:
                    seen.setdefault(callee, None)
        return list(seen)

    def has_indirect_edge(self) -> bool:
        return any(edge.kind is EdgeKind.INDIRECT for edge in self.edges)

    def validate(self) -> None:
        """
        Check structural invariants.

        Raises:
            ManifestError: If ids repeat, an edge names a missing node, a direct
                edge does not name exactly one callee, or a frame size is invalid
        """
        ids: List[str] = self.node_ids()
        if len(set(ids)) != len(ids):
            raise ManifestError("callgraph node ids must be unique")
        known = set(ids)
        for node in self.nodes:
            if not isinstance(node.frame_bytes, int) or node.frame_bytes < 0:
                raise ManifestError(
                    f"function {node.function_id}: frame_bytes must be a non-negative integer"
                )
        for edge in self.edges:
            if edge.caller not in known:
                raise ManifestError(f"edge caller {edge.caller} is not a callgraph node")
            if edge.kind is EdgeKind.DIRECT and len(edge.callees) != 1:
                raise ManifestError(f"direct edge from {edge.caller} must name one callee")
            missing: List[str] = [c for c in edge.callees if c not in known]
            if missing:
                raise ManifestError(f"edge from {edge.caller} names unknown callees {missing}")


@dataclass(frozen=True)
class ExtensionManifest:
    """The loader's input: what the toolchain knows about an extension."""

    extension_id: str
    program_kind: ProgramKind
    feature_flags: FrozenSet[str]
    callgraph: CallGraph
    entry_symbol: str
    declared_maps: Tuple[MapSpec, ...] = ()
    static_vars: Tuple[str, ...] = ()

    def validate(self) -> None:
        """
        Raises:
            ManifestError: If the manifest is structurally invalid
        """
        if not self.extension_id:
            raise ManifestError("extension_id must be nonempty")
        self.callgraph.validate()
        if self.entry_symbol not in self.callgraph.node_ids():
            raise ManifestError(
                f"{self.extension_id}: entry symbol {self.entry_symbol} is not in the callgraph"
            )
        map_ids: List[str] = [spec.map_id for spec in self.declared_maps]
        if len(set(map_ids)) != len(map_ids):
            raise ManifestError(f"{self.extension_id}: map ids must be unique")


class StackModeKind(str, Enum):
    STATICALLY_BOUNDED = "statically-bounded"
    RUNTIME_CHECKED = "runtime-checked"


@dataclass(frozen=True)
class StackMode:
    kind: StackModeKind
    total_bytes: Optional[int] = None

    @classmethod
    def statically_bounded(cls, total_bytes: int) -> "StackMode":
        return cls(StackModeKind.STATICALLY_BOUNDED, total_bytes)

    @classmethod
    def runtime_checked(cls) -> "StackMode":
        return cls(StackModeKind.RUNTIME_CHECKED)

    @property
    def is_runtime_checked(self) -> bool:
        return self.kind is StackModeKind.RUNTIME_CHECKED


class ExecFlag(IntEnum):
    """Per-worker tristate flag; IDLE marks a worker with no extension."""

    IDLE = 0
    EXTENSION_CODE = 1
    HELPER_OR_PANIC = 2
    TERMINATION_REQUESTED = 3


LEGAL_FLAG_TRANSITIONS: FrozenSet[Tuple[ExecFlag, ExecFlag]] = frozenset({
    (ExecFlag.IDLE, ExecFlag.EXTENSION_CODE),
    (ExecFlag.EXTENSION_CODE, ExecFlag.HELPER_OR_PANIC),
    (ExecFlag.HELPER_OR_PANIC, ExecFlag.EXTENSION_CODE),
    (ExecFlag.HELPER_OR_PANIC, ExecFlag.TERMINATION_REQUESTED),
    (ExecFlag.TERMINATION_REQUESTED, ExecFlag.HELPER_OR_PANIC),
    # dispatcher epilogue clears the flag
    (ExecFlag.EXTENSION_CODE, ExecFlag.IDLE),
    (ExecFlag.HELPER_OR_PANIC, ExecFlag.IDLE),
    (ExecFlag.TERMINATION_REQUESTED, ExecFlag.IDLE),
})


class CleanupKind(str, Enum):
    LOCK = "lock"
    MAP_VALUE_REF = "map-value-ref"
    REFCOUNT = "refcount"


@dataclass(eq=False)
class CleanupRecord:
    """One acquired resource and the action that releases it."""

    kind: CleanupKind
    resource: Tuple
    release: Callable[[], None]
    seq: int = -1


class PanicReason(str, Enum):
    OUT_OF_BOUNDS = "OutOfBounds"
    STACK_OVERFLOW_CHECK = "StackOverflowCheck"
    DOUBLE_LOCK = "DoubleLock"
    TERMINATED = "Terminated"
    EXPLICIT_PANIC = "ExplicitPanic"
    TRANSMUTE_VIOLATION = "TransmuteViolation"


@dataclass(frozen=True)
class PanicRecord:
    extension_id: str
    worker_id: int
    reason: PanicReason
    message: str
    timestamp_ns: int

    def to_line(self) -> str:
        """Ring-buffer line; the message is last so it may contain spaces."""
        message: str = self.message.replace("\n", " ")
        return (
            f"ts={self.timestamp_ns} worker={self.worker_id} ext={self.extension_id} "
            f"reason={self.reason.value} msg={message}"
        )

    @classmethod
    def from_line(cls, line: str) -> "PanicRecord":
        """
        Parse a ring-buffer line.

        Raises:
            ValueError: If the line is not in ring-buffer format
        """
        head, sep, message = line.rstrip("\n").partition(" msg=")
        if not sep:
            raise ValueError(f"not a ring-buffer line: {line!r}")
        fields: Dict[str, str] = dict(part.split("=", 1) for part in head.split(" "))
        return cls(
            extension_id=fields["ext"],
            worker_id=int(fields["worker"]),
            reason=PanicReason(fields["reason"]),
            message=message,
            timestamp_ns=int(fields["ts"]),
        )


@dataclass(frozen=True)
class SavedContext:
    """Opaque pre-dispatch continuation: which dispatch, on which thread."""

    dispatch_seq: int
    thread_ident: int


class WorkerState:
    """
    Per-worker runtime state.

    ``exec_flag``, ``prog_start_ns``, ``current_extension``, ``lane_thread``,
    ``unwind_pending`` and ``unwind_sent_ns`` are shared with the watchdog and
    are only touched while holding ``flag_lock``. Everything else belongs to the worker's lane.
    """

    def __init__(self, worker_id: int, config: HostConfig) -> None:
        self.worker_id: int = worker_id
        self.stack_threshold_bytes: int = config.stack_threshold_bytes
        self.stack_total_bytes: int = config.stack_total_bytes

        self.flag_lock: threading.Lock = threading.Lock()
        self.exec_flag: ExecFlag = ExecFlag.IDLE
        self.prog_start_ns: int = 0
        self.current_extension: Optional[str] = None
        self.lane_thread: Optional[int] = None
        self.unwind_pending: bool = False
        self.unwind_sent_ns: int = 0

        self.saved_context: Optional[SavedContext] = None
        self.lock_held: bool = False
        self.shadow_stack_usage: int = 0
        self.shadow_stack_high_water: int = 0
        self.cleanup_registry: List[CleanupRecord] = []
        self.pending_panic: Optional[BaseException] = None

        # audit instrumentation
        self.record_seq: int = 0
        self.registry_high_water: int = 0
        self.last_release_order: List[int] = []
        self.in_panic_path: bool = False
        self.panic_path_violations: int = 0
        self.stack_at_last_panic: int = 0
        self.dispatch_count: int = 0
        self.flag_trace: Deque[Tuple[ExecFlag, ExecFlag]] = deque(maxlen=FLAG_TRACE_CAPACITY)

    @property
    def is_idle(self) -> bool:
        return self.current_extension is None

    def set_flag(self, new_flag: ExecFlag) -> None:
        """
        Move the tristate flag; caller holds ``flag_lock``.

        Raises:
            IllegalFlagTransition: If the edge is not part of the protocol
        """
        old_flag: ExecFlag = self.exec_flag
        if old_flag == new_flag:
            return
        if (old_flag, new_flag) not in LEGAL_FLAG_TRANSITIONS:
            raise IllegalFlagTransition(
                f"worker {self.worker_id}: illegal flag transition {old_flag.name} -> {new_flag.name}"
            )
        self.exec_flag = new_flag
        self.flag_trace.append((old_flag, new_flag))


@dataclass(frozen=True)
class DispatchOutcome:
    verdict: Verdict
    panic: Optional[PanicRecord] = None

    @property
    def panicked(self) -> bool:
        return self.panic is not None

    @classmethod
    def returned(cls, verdict: Verdict) -> "DispatchOutcome":
        return cls(verdict=verdict)

    @classmethod
    def panicked_with(cls, record: PanicRecord, kind: ProgramKind) -> "DispatchOutcome":
        return cls(verdict=panicked_default(kind), panic=record)
