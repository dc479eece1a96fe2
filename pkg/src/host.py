"""The host: workers, loaded extensions, shared maps and the panic ring.

Registry mutations (load, unload, crash-stop) are serialized by
``registry_lock``. The dispatch hot path only reads the registry and never
takes that lock; the panic path only appends to the ring and adds to the
quarantine set, both lock-free deque/set operations.
"""

import itertools
import logging
import threading
import time
from collections import deque
from pathlib import Path
from typing import TYPE_CHECKING, Deque, Dict, Iterable, List, Optional, Set

from src.core_types import HostConfig, MapSpec, PanicRecord, WorkerState
from src.errors import UnknownExtension
from src.resources import RefcountedObject, SpinlockCell
from src.safe_interface import AtomicStatic, SharedMap, TracePipe, create_map

if TYPE_CHECKING:
    from src.loader import ExtensionHandle
    from src.watchdog import WatchdogSet


logger: logging.Logger = logging.getLogger(__name__)


class PanicRing:
    """
    Append-only panic log with a bounded in-memory window.

    ``total`` counts every record ever appended, including ones that fell out
    of the window.
    """

    def __init__(self, capacity: int, num_workers: int) -> None:
        self.capacity: int = capacity
        self._records: Deque[PanicRecord] = deque(maxlen=capacity)
        # one counter per worker: each slot has a single writer
        self._appended: List[int] = [0] * num_workers

    @property
    def total(self) -> int:
        return sum(self._appended)

    def append(self, record: PanicRecord) -> None:
        self._records.append(record)
        self._appended[record.worker_id] += 1

    def records(self) -> List[PanicRecord]:
        return list(self._records)

    def lines(self) -> List[str]:
        return [record.to_line() for record in self._records]

    def write(self, path: Path) -> Path:
        """Write the window as ring-buffer lines."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text: str = "\n".join(self.lines())
        path.write_text(text + "\n" if text else "", encoding="utf-8")
        logger.info(f"Wrote {len(self._records)} panic records to {path}")
        return path

    @staticmethod
    def read(path: Path) -> List[PanicRecord]:
        """
        Parse a ring-buffer log.

        Raises:
            FileNotFoundError: If the log does not exist
            ValueError: If a line is not in ring-buffer format
        """
        lines: List[str] = Path(path).read_text(encoding="utf-8").splitlines()
        return [PanicRecord.from_line(line) for line in lines if line.strip()]


class Host:
    """
    One simulated kernel: ``num_workers`` worker states plus shared registries.

    Args:
        config: Host configuration; defaults from ``src.config``
    """

    def __init__(self, config: Optional[HostConfig] = None) -> None:
        self.config: HostConfig = config or HostConfig()
        self.workers: List[WorkerState] = [
            WorkerState(worker_id, self.config) for worker_id in range(self.config.num_workers)
        ]
        self.registry_lock: threading.RLock = threading.RLock()
        self.extensions: Dict[str, "ExtensionHandle"] = {}
        self.maps: Dict[str, SharedMap] = {}
        self.map_users: Dict[str, List[str]] = {}
        self.statics: Dict[str, AtomicStatic] = {}
        self.static_users: Dict[str, List[str]] = {}
        self.quarantined: Set[str] = set()
        self.ring: PanicRing = PanicRing(self.config.ring_capacity, self.config.num_workers)
        self.trace_pipe: TracePipe = TracePipe()
        self.spinlocks: Dict[str, SpinlockCell] = {}
        self.objects: Dict[str, RefcountedObject] = {}
        self.removed_log: List[List[str]] = []
        self.watchdogs: Optional["WatchdogSet"] = None
        self._dispatch_seq = itertools.count(1)

    def next_dispatch_seq(self) -> int:
        return next(self._dispatch_seq)

    def worker(self, worker_id: int) -> WorkerState:
        return self.workers[worker_id]

    # extension registry

    def handle(self, extension_id: str) -> "ExtensionHandle":
        """
        Look up a dispatchable extension.

        Raises:
            UnknownExtension: If it is not loaded or has been quarantined
        """
        handle: Optional["ExtensionHandle"] = self.extensions.get(extension_id)
        if handle is None or extension_id in self.quarantined:
            raise UnknownExtension(f"extension {extension_id} is not dispatchable")
        return handle

    def is_loaded(self, extension_id: str) -> bool:
        return extension_id in self.extensions

    def quarantine(self, extension_id: str) -> None:
        """Stop new dispatches of an extension (panic path: no locks taken)."""
        self.quarantined.add(extension_id)

    def attach_maps(self, specs: Iterable[MapSpec], extension_id: str) -> List[str]:
        """Create maps on first reference and record the extension as a user. Caller holds the registry lock."""
        attached: List[str] = []
        for spec in specs:
            if spec.map_id not in self.maps:
                self.maps[spec.map_id] = create_map(
                    spec, self.config.num_workers, self.config.hash_seed
                )
                self.map_users[spec.map_id] = []
                logger.debug(f"Created {spec.kind.value} map {spec.map_id}")
            self.map_users[spec.map_id].append(extension_id)
            attached.append(spec.map_id)
        return attached

    def detach(self, handle: "ExtensionHandle") -> List[str]:
        """
        Remove an extension and drop maps and statics it was the last user of.

        Returns:
            Map ids whose storage was dropped
        """
        dropped: List[str] = []
        self.extensions.pop(handle.extension_id, None)
        self.quarantined.discard(handle.extension_id)
        for map_id in handle.attached_maps:
            users: List[str] = self.map_users.get(map_id, [])
            if handle.extension_id in users:
                users.remove(handle.extension_id)
            if not users:
                self.maps.pop(map_id, None)
                self.map_users.pop(map_id, None)
                dropped.append(map_id)
        for var_id in handle.static_vars:
            users = self.static_users.get(var_id, [])
            if handle.extension_id in users:
                users.remove(handle.extension_id)
            if not users:
                self.statics.pop(var_id, None)
                self.static_users.pop(var_id, None)
        return dropped

    def sharing_component(self, extension_id: str) -> List[str]:
        """Extensions reachable from one through shared maps, in BFS order."""
        order: List[str] = [extension_id]
        seen: Set[str] = {extension_id}
        queue: Deque[str] = deque([extension_id])
        while queue:
            current: str = queue.popleft()
            for map_id in self.extensions[current].attached_maps:
                for user in self.map_users.get(map_id, []):
                    if user not in seen:
                        seen.add(user)
                        order.append(user)
                        queue.append(user)
        return order

    def quiesce(self, extension_ids: Iterable[str]) -> bool:
        """
        Wait until no worker runs any of the given extensions.

        Returns:
            False if the quiesce timeout elapsed first
        """
        targets: Set[str] = set(extension_ids)
        current_thread: int = threading.get_ident()
        deadline: int = time.monotonic_ns() + self.config.quiesce_timeout_ns
        while True:
            busy: List[int] = [
                worker.worker_id
                for worker in self.workers
                if worker.current_extension in targets and worker.lane_thread != current_thread
            ]
            if not busy:
                return True
            if time.monotonic_ns() > deadline:
                logger.warning(f"Quiesce timed out; workers {busy} still run {sorted(targets)}")
                return False
            time.sleep(0.0005)

    # host-side shared state

    def spinlock(self, lock_id: str) -> SpinlockCell:
        """Get or create a shared spinlock."""
        cell: Optional[SpinlockCell] = self.spinlocks.get(lock_id)
        if cell is None:
            with self.registry_lock:
                cell = self.spinlocks.setdefault(
                    lock_id, SpinlockCell(lock_id, self.config.spin_yield_iterations)
                )
        return cell

    def register_object(self, object_id: str, initial: int = 1) -> RefcountedObject:
        with self.registry_lock:
            return self.objects.setdefault(object_id, RefcountedObject(object_id, initial))

    def refcount_snapshot(self) -> Dict[str, int]:
        return {object_id: obj.refcount for object_id, obj in self.objects.items()}

    def locked_spinlocks(self) -> List[str]:
        return [lock_id for lock_id, cell in self.spinlocks.items() if cell.locked]

    def leaked_registries(self) -> List[int]:
        return [worker.worker_id for worker in self.workers if worker.cleanup_registry]

    def live_map_refs(self) -> int:
        return sum(shared_map.live_refs() for shared_map in self.maps.values())

    def summary(self) -> Dict[str, object]:
        return {
            "workers": self.config.num_workers,
            "extensions": sorted(self.extensions),
            "maps": sorted(self.maps),
            "quarantined": sorted(self.quarantined),
            "panics": self.ring.total,
            "armed": self.watchdogs is not None,
        }
