"""Runs extensions on a worker: prologue, entry call, epilogue and the panic path.

The dedicated stack is modelled as shadow accounting plus an unwind boundary
here. Every panic signal (framework check, extension ``panic()``, watchdog
forced unwind) propagates to ``dispatch``, which drains the cleanup registry,
logs the panic to the ring and returns the program kind's default verdict as
if the extension had returned. Crash-stop runs after the dispatch finished.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from types import MappingProxyType
from typing import Any, Callable, List, Mapping, Optional, Tuple, TypeVar, Union

from src.core_types import (
    DispatchOutcome,
    ExecFlag,
    HostConfig,
    PanicReason,
    PanicRecord,
    ProgramKind,
    SavedContext,
    WorkerState,
    is_valid_verdict,
)
from src.errors import (
    ExtensionPanic,
    ForcedUnwind,
    HelperError,
    HostFault,
    WorkerBusy,
    describe,
)
from src.host import Host
from src.lane import cancel_async_unwind, helper_enter, helper_exit, raise_panic
from src.loader import ExtensionHandle, crash_stop
from src.resources import (
    LockGuard,
    RefcountedObject,
    RefGuard,
    SpinlockCell,
    acquire_ref,
    release_all,
    spin_lock,
)
from src.safe_interface import (
    AtomicStatic,
    PacketBuffer,
    SharedMap,
    atomic_static,
    trace_printk,
)


logger: logging.Logger = logging.getLogger(__name__)

__all__ = [
    "ProgramContext",
    "check_stack",
    "dispatch",
    "helper_enter",
    "helper_exit",
    "panic_path",
    "run_on_workers",
]

T = TypeVar("T")


def check_stack(worker: WorkerState, next_frame_bytes: int) -> None:
    """
    Account for the next extension-level call, panicking past the threshold.

    The threshold is inclusive: usage may reach it exactly.

    Raises:
        ExtensionPanic: StackOverflowCheck
    """
    projected: int = worker.shadow_stack_usage + next_frame_bytes
    if projected > worker.stack_threshold_bytes:
        raise_panic(
            worker,
            PanicReason.STACK_OVERFLOW_CHECK,
            f"usage {worker.shadow_stack_usage} + frame {next_frame_bytes} "
            f"exceeds {worker.stack_threshold_bytes}",
        )
    worker.shadow_stack_usage = projected
    if projected > worker.shadow_stack_high_water:
        worker.shadow_stack_high_water = projected


class ProgramContext:
    """
    What an extension sees while it runs.

    Read-only accessors for the worker, the packet or trace event, its maps and
    statics, plus ``call`` for extension-level calls and thin wrappers around the
    helpers.
    """

    __slots__ = ("_host", "_handle", "_worker", "_packet", "_event", "_maps")

    def __init__(
        self,
        host: Host,
        handle: ExtensionHandle,
        worker: WorkerState,
        packet: Optional[PacketBuffer] = None,
        event: Optional[Mapping[str, Any]] = None,
    ) -> None:
        self._host: Host = host
        self._handle: ExtensionHandle = handle
        self._worker: WorkerState = worker
        self._packet: Optional[PacketBuffer] = packet
        self._event: Optional[Mapping[str, Any]] = MappingProxyType(dict(event)) if event else None
        self._maps: Mapping[str, SharedMap] = MappingProxyType(
            {map_id: host.maps[map_id] for map_id in handle.attached_maps}
        )

    @property
    def worker(self) -> WorkerState:
        return self._worker

    @property
    def extension_id(self) -> str:
        return self._handle.extension_id

    @property
    def config(self) -> HostConfig:
        return self._host.config

    @property
    def packet(self) -> Optional[PacketBuffer]:
        return self._packet

    @property
    def event(self) -> Optional[Mapping[str, Any]]:
        return self._event

    @property
    def maps(self) -> Mapping[str, SharedMap]:
        return self._maps

    @property
    def statics(self) -> Mapping[str, AtomicStatic]:
        return MappingProxyType(self._host.statics)

    def map(self, map_id: str) -> SharedMap:
        return self._maps[map_id]

    def static(self, var_id: str) -> AtomicStatic:
        return atomic_static(self._host.statics, var_id)

    def call(self, function_id: str, fn: Callable[..., T], *args: Any) -> T:
        """Extension-level call with frame accounting (checked in runtime-checked mode)."""
        worker: WorkerState = self._worker
        frame: int = self._handle.frame_table[function_id]
        if self._handle.stack_mode.is_runtime_checked:
            check_stack(worker, frame)
        else:
            worker.shadow_stack_usage += frame
            if worker.shadow_stack_usage > worker.shadow_stack_high_water:
                worker.shadow_stack_high_water = worker.shadow_stack_usage
        try:
            return fn(self, *args)
        finally:
            worker.shadow_stack_usage -= frame

    def panic(self, message: str) -> None:
        """Explicit panic from extension code."""
        raise_panic(self._worker, PanicReason.EXPLICIT_PANIC, message)

    def spinlock(self, lock_id: str) -> SpinlockCell:
        return self._host.spinlock(lock_id)

    def lock(self, lock_id: str) -> LockGuard:
        return spin_lock(self._worker, self._host.spinlock(lock_id))

    def object(self, object_id: str) -> RefcountedObject:
        return self._host.objects[object_id]

    def get_ref(self, object_id: str) -> RefGuard:
        return acquire_ref(self._worker, self._host.objects[object_id])

    def printk(self, message: str) -> None:
        trace_printk(self._worker, self._host.trace_pipe, message)


def _enter_extension_code(host: Host, worker: WorkerState, handle: ExtensionHandle) -> None:
    with worker.flag_lock:
        if worker.current_extension is not None:
            raise WorkerBusy(
                f"worker {worker.worker_id} is running {worker.current_extension}"
            )
        ident: int = threading.get_ident()
        worker.saved_context = SavedContext(host.next_dispatch_seq(), ident)
        worker.lane_thread = ident
        worker.current_extension = handle.extension_id
        worker.unwind_pending = False
        worker.unwind_sent_ns = 0
        worker.pending_panic = None
        worker.shadow_stack_usage = handle.entry_frame_bytes
        worker.prog_start_ns = time.monotonic_ns()
        worker.set_flag(ExecFlag.EXTENSION_CODE)
    worker.dispatch_count += 1
    if worker.shadow_stack_usage > worker.shadow_stack_high_water:
        worker.shadow_stack_high_water = worker.shadow_stack_usage


def _leave_extension_code(worker: WorkerState, panicking: bool) -> bool:
    """
    Stop the watchdog from delivering to this lane; idempotent.

    A clean return detaches the worker from the watchdog in the same critical
    section; the lane-only fields are reset afterwards by ``_reset_lane``.

    Returns:
        True if a forced unwind had been delivered (fired or not)
    """
    with worker.flag_lock:
        delivered: bool = worker.unwind_pending
        if delivered:
            cancel_async_unwind(worker.lane_thread)
        if panicking or delivered or worker.pending_panic is not None:
            if worker.exec_flag is not ExecFlag.HELPER_OR_PANIC:
                worker.set_flag(ExecFlag.HELPER_OR_PANIC)
            return delivered
        if worker.exec_flag is not ExecFlag.IDLE:
            worker.set_flag(ExecFlag.IDLE)
        worker.current_extension = None
        worker.prog_start_ns = 0
        worker.lane_thread = None
    return False


def _reset_lane(worker: WorkerState) -> None:
    worker.saved_context = None
    worker.shadow_stack_usage = 0
    worker.pending_panic = None


def _clear_worker(worker: WorkerState) -> None:
    with worker.flag_lock:
        worker.set_flag(ExecFlag.IDLE)
        worker.current_extension = None
        worker.prog_start_ns = 0
        worker.unwind_pending = False
        worker.unwind_sent_ns = 0
        worker.lane_thread = None
    _reset_lane(worker)


def panic_path(
    host: Host, worker: WorkerState, reason: PanicReason, message: str
) -> PanicRecord:
    """
    Graceful exit after a panic: release resources, log, restore the context.

    Never acquires a lock or records a resource, and never raises.
    """
    worker.in_panic_path = True
    extension_id: str = worker.current_extension or "?"
    release_all(worker)
    record: PanicRecord = PanicRecord(
        extension_id=extension_id,
        worker_id=worker.worker_id,
        reason=reason,
        message=message,
        timestamp_ns=time.monotonic_ns(),
    )
    host.ring.append(record)
    host.quarantine(extension_id)
    worker.shadow_stack_usage = 0
    worker.in_panic_path = False
    logger.debug(f"Panic on worker {worker.worker_id}: {record.to_line()}")
    return record


def _classify(signal: BaseException) -> Tuple[PanicReason, str]:
    if isinstance(signal, ExtensionPanic):
        return signal.reason, signal.message
    if isinstance(signal, ForcedUnwind):
        return PanicReason.TERMINATED, "watchdog forced unwind"
    if isinstance(signal, HelperError):
        return PanicReason.EXPLICIT_PANIC, f"unhandled helper error: {describe(signal)}"
    return PanicReason.EXPLICIT_PANIC, f"host fault: {describe(signal)}"


def dispatch(
    host: Host,
    worker: WorkerState,
    extension: Union[str, ExtensionHandle],
    packet: Optional[PacketBuffer] = None,
    event: Optional[Mapping[str, Any]] = None,
) -> DispatchOutcome:
    """
    Run one extension invocation on a worker.

    Args:
        host: Owning host
        worker: Idle worker; the calling thread becomes its lane
        extension: Extension id or handle
        packet: Frame for packet programs
        event: Event fields for trace-event programs

    Returns:
        Returned(verdict) or Panicked(record, default verdict)

    Raises:
        UnknownExtension: If the extension is not dispatchable
        WorkerBusy: If the worker is already running an extension
        HostFault: If a foreign exception escaped extension code (after cleanup)
    """
    extension_id: str = extension if isinstance(extension, str) else extension.extension_id
    handle: ExtensionHandle = host.handle(extension_id)
    kind: ProgramKind = handle.program_kind
    ctx: ProgramContext = ProgramContext(host, handle, worker, packet, event)

    _enter_extension_code(host, worker, handle)
    signal: Optional[BaseException] = None
    result: Any = None
    try:
        try:
            result = handle.entry(ctx)
            if not is_valid_verdict(kind, result):
                raise_panic(
                    worker,
                    PanicReason.EXPLICIT_PANIC,
                    f"invalid verdict {result!r} for {kind.value}",
                )
        except BaseException as exc:
            signal = exc
        delivered: bool = _leave_extension_code(worker, signal is not None)
    except ForcedUnwind as late:
        # fired in dispatcher code between the entry returning and the flag lock
        signal = signal if signal is not None else late
        delivered = _leave_extension_code(worker, True)

    if signal is None and delivered:
        signal = ForcedUnwind()
    if signal is None and worker.pending_panic is not None:
        signal = worker.pending_panic

    if signal is None:
        if worker.cleanup_registry:
            logger.warning(
                f"{extension_id} returned holding {len(worker.cleanup_registry)} resources; released"
            )
            release_all(worker)
        _reset_lane(worker)
        return DispatchOutcome.returned(result)

    # a panic swallowed by extension code still takes the panic path
    if not isinstance(signal, (ExtensionPanic, ForcedUnwind)) and worker.pending_panic is not None:
        signal = worker.pending_panic
    reason, message = _classify(signal)
    record: PanicRecord = panic_path(host, worker, reason, message)
    _clear_worker(worker)
    crash_stop(host, extension_id)

    foreign: bool = not isinstance(signal, (ExtensionPanic, ForcedUnwind, HelperError))
    if foreign:
        logger.critical(f"Foreign exception escaped {extension_id}: {describe(signal)}")
        raise HostFault(f"{extension_id}: {describe(signal)}") from signal
    return DispatchOutcome.panicked_with(record, kind)


def run_on_workers(host: Host, work: Callable[[WorkerState], T]) -> List[T]:
    """Run ``work(worker)`` on one lane thread per worker and collect the results."""
    with ThreadPoolExecutor(max_workers=len(host.workers), thread_name_prefix="lane") as pool:
        futures = [pool.submit(work, worker) for worker in host.workers]
        return [future.result() for future in futures]
