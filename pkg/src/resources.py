"""RAII-style guards and the per-worker cleanup registry.

Every resource an extension can hold (a spinlock, a map value reference, a
reference on a refcounted object) is pushed onto the worker's LIFO cleanup
registry at acquisition. A guard released normally pops its own record; after
a panic the panic path drains whatever is left with ``release_all``. A record
is released by exactly one of the two.

Guard finalizers never run while a panic or forced unwind is propagating:
unwinding does not execute drop handlers, the registry owns those releases.
"""

import functools
import logging
import threading
import time
from typing import Any, List, Optional, Tuple, Type

from src.core_types import CleanupKind, CleanupRecord, PanicReason, WorkerState
from src.errors import ExtensionPanic, ForcedUnwind, PopMismatch
from src.lane import helper_enter, helper_exit, raise_panic


logger: logging.Logger = logging.getLogger(__name__)

_UNWIND_SIGNALS: Tuple[Type[BaseException], ...] = (ExtensionPanic, ForcedUnwind)


def record_resource(worker: WorkerState, record: CleanupRecord) -> None:
    """
    Push a record onto the worker's cleanup registry.

    Args:
        worker: Worker running the extension
        record: Record to push; its sequence number is assigned here
    """
    if worker.in_panic_path:
        # the panic path must never acquire; count it for the audit
        worker.panic_path_violations += 1
    worker.record_seq += 1
    record.seq = worker.record_seq
    worker.cleanup_registry.append(record)
    depth: int = len(worker.cleanup_registry)
    if depth > worker.registry_high_water:
        worker.registry_high_water = depth


def pop_resource(worker: WorkerState, record: CleanupRecord) -> None:
    """
    Pop a record that must be on top of the registry.

    Raises:
        PopMismatch: If the record is not the top of the registry
    """
    registry: List[CleanupRecord] = worker.cleanup_registry
    if not registry or registry[-1] is not record:
        top: str = f"{registry[-1].kind.value}{registry[-1].resource}" if registry else "empty"
        raise PopMismatch(
            f"worker {worker.worker_id}: pop of {record.kind.value}{record.resource} "
            f"but top is {top}"
        )
    registry.pop()


def release_all(worker: WorkerState) -> int:
    """
    Release every recorded resource in LIFO order.

    Called only from the panic path (and the dispatcher epilogue for guards an
    extension left unreleased). Release actions are infallible by construction.

    Args:
        worker: Worker whose registry is drained

    Returns:
        Number of records released
    """
    registry: List[CleanupRecord] = worker.cleanup_registry
    order: List[int] = []
    while registry:
        record: CleanupRecord = registry.pop()
        record.release()
        order.append(record.seq)
    worker.lock_held = False
    worker.last_release_order = order
    return len(order)


class Guard:
    """Base guard: releases its record once, normally or not at all on unwind."""

    def __init__(self, worker: WorkerState, record: CleanupRecord) -> None:
        self.worker: WorkerState = worker
        self.record: CleanupRecord = record
        self.released: bool = False

    def _release_resource(self) -> None:
        raise NotImplementedError

    def release(self) -> None:
        """Drop the guard: release the resource and pop its record (a helper call)."""
        if self.released:
            return
        helper_enter(self.worker)
        pop_resource(self.worker, self.record)
        self._release_resource()
        self.released = True
        helper_exit(self.worker)

    def __enter__(self) -> "Guard":
        return self

    def __exit__(self, exc_type: Optional[type], exc: Optional[BaseException], tb: Any) -> None:
        if exc_type is not None and issubclass(exc_type, _UNWIND_SIGNALS):
            return
        self.release()


class SpinlockCell:
    """
    Lock shared by extensions across workers.

    State is Unlocked or LockedBy(worker_id). Only the locking worker, or its
    panic path, releases it.
    """

    def __init__(self, lock_id: str, spin_yield_iterations: int = 64) -> None:
        self.lock_id: str = lock_id
        self.spin_yield_iterations: int = spin_yield_iterations
        self._lock: threading.Lock = threading.Lock()
        self.owner: Optional[int] = None
        self.acquisitions: int = 0

    @property
    def locked(self) -> bool:
        return self.owner is not None

    def spin_until_locked(self, worker_id: int) -> None:
        """Spin until the cell is LockedBy(worker_id), yielding the lane periodically."""
        lock: threading.Lock = self._lock
        spins: int = 0
        while not lock.acquire(blocking=False):
            spins += 1
            if spins % self.spin_yield_iterations == 0:
                time.sleep(0)
        self.owner = worker_id
        self.acquisitions += 1

    def unlock(self, worker_id: int) -> None:
        """
        Release the cell.

        Raises:
            PopMismatch: If the caller is not the owner (framework bug)
        """
        if self.owner != worker_id:
            raise PopMismatch(f"lock {self.lock_id} released by {worker_id}, owned by {self.owner}")
        self.owner = None
        self._lock.release()

    def raw_acquire(self) -> None:
        """Plain acquire without guard or recording (benchmark baseline and tests)."""
        self._lock.acquire()
        self.owner = -1

    def raw_release(self) -> None:
        self.owner = None
        self._lock.release()


class LockGuard(Guard):
    """Proof that a worker holds exactly one spinlock."""

    def __init__(self, worker: WorkerState, record: CleanupRecord, cell: SpinlockCell) -> None:
        super().__init__(worker, record)
        self.cell: SpinlockCell = cell

    @property
    def lock_id(self) -> str:
        return self.cell.lock_id

    def _release_resource(self) -> None:
        self.worker.lock_held = False
        self.cell.unlock(self.worker.worker_id)


def acquire_spinlock(worker: WorkerState, cell: SpinlockCell) -> LockGuard:
    """
    Acquire a spinlock for the running extension.

    Pre: called inside helper_enter/helper_exit (see ``spin_lock``).

    Args:
        worker: Calling worker
        cell: Lock to take

    Returns:
        Guard whose release unlocks the cell

    Raises:
        ExtensionPanic: DoubleLock, if the worker already holds a lock
    """
    if worker.lock_held:
        raise_panic(
            worker,
            PanicReason.DOUBLE_LOCK,
            f"lock {cell.lock_id} requested while holding another lock",
        )
    worker_id: int = worker.worker_id
    cell.spin_until_locked(worker_id)
    record: CleanupRecord = CleanupRecord(
        CleanupKind.LOCK, (cell.lock_id,), functools.partial(cell.unlock, worker_id)
    )
    record_resource(worker, record)
    worker.lock_held = True
    return LockGuard(worker, record, cell)


def spin_lock(worker: WorkerState, cell: SpinlockCell) -> LockGuard:
    """Helper: ``acquire_spinlock`` wrapped in the helper flag protocol."""
    helper_enter(worker)
    guard: LockGuard = acquire_spinlock(worker, cell)
    helper_exit(worker)
    return guard


class RefcountedObject:
    """Host object whose lifetime is tracked by a reference count."""

    def __init__(self, object_id: str, initial: int = 1) -> None:
        self.object_id: str = object_id
        self._lock: threading.Lock = threading.Lock()
        self.refcount: int = initial

    def get(self) -> None:
        with self._lock:
            self.refcount += 1

    def put(self) -> None:
        with self._lock:
            self.refcount -= 1


class RefGuard(Guard):
    def __init__(self, worker: WorkerState, record: CleanupRecord, obj: RefcountedObject) -> None:
        super().__init__(worker, record)
        self.obj: RefcountedObject = obj

    def _release_resource(self) -> None:
        self.obj.put()


def acquire_ref(worker: WorkerState, obj: RefcountedObject) -> RefGuard:
    """Helper: take a reference on a host object and record it."""
    helper_enter(worker)
    obj.get()
    record: CleanupRecord = CleanupRecord(CleanupKind.REFCOUNT, (obj.object_id,), obj.put)
    record_resource(worker, record)
    guard: RefGuard = RefGuard(worker, record, obj)
    helper_exit(worker)
    return guard
