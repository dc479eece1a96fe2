"""Helper surface extensions program against.

Bounded byte views, the sealed type-descriptor registry behind safe transmute,
shared maps with reference-counted values, atomic statics, the trace pipe and
packet buffers. Every helper that touches shared host state runs inside the
helper flag protocol (``src.lane.helper``) and records what it acquires in the
worker's cleanup registry.
"""

import functools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import ARRAY_KEY_BYTES, PACKET_CAPACITY, TRACE_PIPE_CAPACITY
from src.core_types import (
    CleanupKind,
    CleanupRecord,
    MapKind,
    MapSpec,
    PanicReason,
    WorkerState,
)
from src.errors import LayoutRejected, MapFull, MapKeyOutOfRange, UnknownVar
from src.lane import helper, raise_panic
from src.resources import Guard, record_resource


logger: logging.Logger = logging.getLogger(__name__)

Buffer = Union[bytearray, memoryview]

FNV_OFFSET_BASIS: int = 0x811C9DC5
FNV_PRIME: int = 0x01000193


def fnv1a_32(data: bytes, seed: int = 0) -> int:
    """Seeded 32-bit FNV-1a; the seed is folded into the offset basis."""
    h: int = (FNV_OFFSET_BASIS ^ seed) & 0xFFFFFFFF
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# Bounded views
# ---------------------------------------------------------------------------


class BoundedView:
    """
    Length-carrying window over a host buffer.

    Every access is checked against ``length`` before the backing storage is
    touched; a violation panics with OutOfBounds on the owning worker.
    """

    __slots__ = ("_memory", "offset", "length", "worker")

    def __init__(
        self,
        origin: Buffer,
        offset: int = 0,
        length: Optional[int] = None,
        worker: Optional[WorkerState] = None,
    ) -> None:
        memory: memoryview = origin if isinstance(origin, memoryview) else memoryview(origin)
        if length is None:
            length = len(memory) - offset
        if offset < 0 or length < 0 or offset + length > len(memory):
            raise ValueError(
                f"view [{offset}, {offset + length}) does not fit origin of {len(memory)} bytes"
            )
        self._memory: memoryview = memory
        self.offset: int = offset
        self.length: int = length
        self.worker: Optional[WorkerState] = worker

    def __len__(self) -> int:
        return self.length

    def _check(self, offset: int, length: int) -> int:
        if offset < 0 or length < 0 or offset + length > self.length:
            raise_panic(
                self.worker,
                PanicReason.OUT_OF_BOUNDS,
                f"access [{offset}, {offset + length}) outside view of {self.length} bytes",
            )
        return self.offset + offset

    def read(self, offset: int, length: int) -> bytes:
        start: int = self._check(offset, length)
        return self._memory[start:start + length].tobytes()

    def write(self, offset: int, data: bytes) -> None:
        start: int = self._check(offset, len(data))
        self._memory[start:start + len(data)] = data

    def subview(self, offset: int, length: int) -> "BoundedView":
        start: int = self._check(offset, length)
        return BoundedView(self._memory, start, length, self.worker)

    def read_u8(self, offset: int) -> int:
        return self._memory[self._check(offset, 1)]

    def read_uint(self, offset: int, size: int) -> int:
        """Little-endian unsigned integer of ``size`` bytes."""
        return int.from_bytes(self.read(offset, size), "little")

    def write_uint(self, offset: int, size: int, value: int) -> None:
        self.write(offset, value.to_bytes(size, "little"))

    def buffer(self, length: int) -> memoryview:
        """Writable window over the first ``length`` bytes (framework use: transmute)."""
        start: int = self._check(0, length)
        return self._memory[start:start + length]


def view_read(view: BoundedView, offset: int, length: int) -> bytes:
    """
    Read ``length`` bytes at ``offset``.

    Raises:
        ExtensionPanic: OutOfBounds, if offset + length exceeds the view
    """
    return view.read(offset, length)


def view_write(view: BoundedView, offset: int, data: bytes) -> None:
    """
    Write ``data`` at ``offset``.

    Raises:
        ExtensionPanic: OutOfBounds, if offset + len(data) exceeds the view
    """
    view.write(offset, data)


# ---------------------------------------------------------------------------
# Safe transmute
# ---------------------------------------------------------------------------

SCALAR_KINDS: Dict[str, str] = {
    "u8": "<u1",
    "u16": "<u2",
    "u32": "<u4",
    "u64": "<u8",
    "i8": "<i1",
    "i16": "<i2",
    "i32": "<i4",
    "i64": "<i8",
}

_SEAL: object = object()


@dataclass(frozen=True)
class FieldLayout:
    name: str
    field_offset: int
    field_bytes: int
    scalar_kind: str

    @property
    def scalar_bytes(self) -> int:
        return int(SCALAR_KINDS[self.scalar_kind][-1])

    @property
    def count(self) -> int:
        return self.field_bytes // self.scalar_bytes


@dataclass(frozen=True, eq=False)
class TypeDescriptor:
    """All-scalar record layout. Only ``DescriptorRegistry.register`` can build one."""

    type_id: str
    layout: Tuple[FieldLayout, ...]
    total_bytes: int
    dtype: np.dtype = field(repr=False)
    seal: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.seal is not _SEAL:
            raise LayoutRejected(f"{self.type_id}: descriptors are built by the descriptor registry")

    def get_field(self, name: str) -> FieldLayout:
        for item in self.layout:
            if item.name == name:
                return item
        raise KeyError(f"{self.type_id} has no field {name}")


class DescriptorRegistry:
    """Framework-owned set of layouts usable with ``transmute_checked``."""

    def __init__(self) -> None:
        self._descriptors: Dict[str, TypeDescriptor] = {}
        self._lock: threading.Lock = threading.Lock()

    def register(
        self,
        type_id: str,
        fields: Sequence[Tuple[str, int, int, str]],
        total_bytes: int,
    ) -> TypeDescriptor:
        """
        Validate and seal a layout.

        Args:
            type_id: Descriptor name
            fields: ``(name, offset, bytes, scalar_kind)`` tuples; ``bytes`` may be
                a multiple of the scalar size for fixed arrays
            total_bytes: Record size

        Returns:
            The sealed descriptor (the existing one if an identical layout is
            already registered under ``type_id``)

        Raises:
            LayoutRejected: If a field kind is not a scalar, fields overlap, leave
                a gap, are unsorted or overrun ``total_bytes``
        """
        layout: Tuple[FieldLayout, ...] = tuple(FieldLayout(*item) for item in fields)
        names: List[str] = [item.name for item in layout]
        if len(set(names)) != len(names):
            raise LayoutRejected(f"{type_id}: field names must be unique")

        cursor: int = 0
        for item in layout:
            if item.scalar_kind not in SCALAR_KINDS:
                raise LayoutRejected(
                    f"{type_id}.{item.name}: kind {item.scalar_kind} is not a scalar"
                )
            if item.field_bytes <= 0 or item.field_bytes % item.scalar_bytes:
                raise LayoutRejected(
                    f"{type_id}.{item.name}: {item.field_bytes} bytes is not a whole "
                    f"number of {item.scalar_kind}"
                )
            if item.field_offset < cursor:
                raise LayoutRejected(f"{type_id}.{item.name}: overlaps or is out of order")
            if item.field_offset > cursor:
                raise LayoutRejected(
                    f"{type_id}.{item.name}: implicit padding at [{cursor}, {item.field_offset}); "
                    f"declare it as a reserved field"
                )
            cursor = item.field_offset + item.field_bytes
        if cursor != total_bytes:
            raise LayoutRejected(f"{type_id}: fields cover {cursor} of {total_bytes} bytes")

        dtype: np.dtype = np.dtype({
            "names": names,
            "formats": [
                SCALAR_KINDS[item.scalar_kind] if item.count == 1
                else (SCALAR_KINDS[item.scalar_kind], (item.count,))
                for item in layout
            ],
            "offsets": [item.field_offset for item in layout],
            "itemsize": total_bytes,
        })
        descriptor: TypeDescriptor = TypeDescriptor(type_id, layout, total_bytes, dtype, _SEAL)

        with self._lock:
            existing: Optional[TypeDescriptor] = self._descriptors.get(type_id)
            if existing is not None:
                if existing.layout != layout or existing.total_bytes != total_bytes:
                    raise LayoutRejected(f"{type_id} is already registered with another layout")
                return existing
            self._descriptors[type_id] = descriptor
        logger.debug(f"Registered descriptor {type_id} ({total_bytes} bytes, {len(layout)} fields)")
        return descriptor

    def get(self, type_id: str) -> TypeDescriptor:
        return self._descriptors[type_id]

    def __contains__(self, descriptor: object) -> bool:
        if not isinstance(descriptor, TypeDescriptor):
            return False
        return self._descriptors.get(descriptor.type_id) is descriptor


DESCRIPTORS: DescriptorRegistry = DescriptorRegistry()


class TypedRecord:
    """Scalar-only accessors over a transmuted byte window."""

    __slots__ = ("descriptor", "_array", "_view")

    def __init__(self, descriptor: TypeDescriptor, view: BoundedView) -> None:
        self.descriptor: TypeDescriptor = descriptor
        self._view: BoundedView = view
        self._array: np.ndarray = np.frombuffer(
            view.buffer(descriptor.total_bytes), dtype=descriptor.dtype, count=1
        )

    def __getitem__(self, name: str) -> Union[int, bytes]:
        value = self._array[name][0]
        if isinstance(value, np.ndarray):
            return value.tobytes()
        return int(value)

    def __setitem__(self, name: str, value: Union[int, bytes]) -> None:
        if isinstance(value, (bytes, bytearray)):
            self.field_view(name).write(0, bytes(value))
        else:
            self._array[name][0] = value

    def field_view(self, name: str) -> BoundedView:
        """Bounded view over exactly one field's bytes."""
        item: FieldLayout = self.descriptor.get_field(name)
        return self._view.subview(item.field_offset, item.field_bytes)

    def to_dict(self) -> Dict[str, Union[int, bytes]]:
        return {item.name: self[item.name] for item in self.descriptor.layout}


def transmute_checked(view: BoundedView, descriptor: TypeDescriptor) -> TypedRecord:
    """
    Reinterpret the start of a view as a registered record type.

    Raises:
        ExtensionPanic: TransmuteViolation, if the descriptor is not registered
            or does not fit inside the view
    """
    if descriptor not in DESCRIPTORS:
        raise_panic(
            view.worker,
            PanicReason.TRANSMUTE_VIOLATION,
            f"descriptor {getattr(descriptor, 'type_id', descriptor)} is not registered",
        )
    if descriptor.total_bytes > view.length:
        raise_panic(
            view.worker,
            PanicReason.TRANSMUTE_VIOLATION,
            f"{descriptor.type_id} needs {descriptor.total_bytes} bytes, view has {view.length}",
        )
    return TypedRecord(descriptor, view)


# ---------------------------------------------------------------------------
# Shared maps
# ---------------------------------------------------------------------------


class MapValue:
    """Value storage with a reference count; reclaimed once deleted and unreferenced."""

    __slots__ = ("data", "refs", "deleted", "reclaimed")

    def __init__(self, size: int, initial: Optional[bytes] = None) -> None:
        self.data: bytearray = bytearray(initial) if initial is not None else bytearray(size)
        self.refs: int = 0
        self.deleted: bool = False
        self.reclaimed: bool = False


class SharedMap:
    """Base class: internal lock, value refcounting and deferred reclamation."""

    def __init__(self, spec: MapSpec) -> None:
        self.spec: MapSpec = spec
        self._lock: threading.Lock = threading.Lock()
        self.reclaimed: int = 0
        self.deferred: int = 0

    @property
    def map_id(self) -> str:
        return self.spec.map_id

    def check_key(self, worker: Optional[WorkerState], key: bytes) -> None:
        if len(key) != self.spec.key_bytes:
            raise_panic(
                worker,
                PanicReason.OUT_OF_BOUNDS,
                f"map {self.map_id}: key of {len(key)} bytes, expected {self.spec.key_bytes}",
            )

    def check_value(self, worker: Optional[WorkerState], value: bytes) -> None:
        if len(value) != self.spec.value_bytes:
            raise_panic(
                worker,
                PanicReason.OUT_OF_BOUNDS,
                f"map {self.map_id}: value of {len(value)} bytes, expected {self.spec.value_bytes}",
            )

    def _find(self, key: bytes, worker_id: int) -> Optional[MapValue]:
        raise NotImplementedError

    def _store(self, key: bytes, value: bytes, worker_id: int) -> None:
        raise NotImplementedError

    def _remove(self, key: bytes, worker_id: int) -> bool:
        raise NotImplementedError

    def _retire(self, value: MapValue) -> None:
        """Mark a value deleted; reclaim now or when its last reference drops. Lock held."""
        value.deleted = True
        if value.refs == 0:
            value.reclaimed = True
            self.reclaimed += 1
        else:
            self.deferred += 1

    def acquire_value(self, key: bytes, worker_id: int = 0) -> Optional[MapValue]:
        with self._lock:
            value: Optional[MapValue] = self._find(key, worker_id)
            if value is not None:
                value.refs += 1
            return value

    def release_value(self, value: MapValue) -> None:
        with self._lock:
            value.refs -= 1
            if value.deleted and value.refs == 0 and not value.reclaimed:
                value.reclaimed = True
                self.reclaimed += 1
                self.deferred -= 1

    def update(self, key: bytes, value: bytes, worker_id: int = 0) -> None:
        with self._lock:
            self._store(key, value, worker_id)

    def delete(self, key: bytes, worker_id: int = 0) -> bool:
        with self._lock:
            return self._remove(key, worker_id)

    def peek(self, key: bytes, worker_id: int = 0) -> Optional[bytes]:
        """Host-side read without a guard."""
        with self._lock:
            value: Optional[MapValue] = self._find(key, worker_id)
            return bytes(value.data) if value is not None else None

    def live_refs(self) -> int:
        raise NotImplementedError


class ArrayMap(SharedMap):
    """
    Preallocated, zero-initialized values indexed by a 4-byte little-endian key.

    Entries always exist; delete never removes one and reports False.
    """

    def __init__(self, spec: MapSpec) -> None:
        super().__init__(spec)
        self._values: List[MapValue] = [MapValue(spec.value_bytes) for _ in range(spec.max_entries)]

    def _index(self, key: bytes) -> int:
        return int.from_bytes(key, "little")

    def _find(self, key: bytes, worker_id: int) -> Optional[MapValue]:
        index: int = self._index(key)
        if index >= self.spec.max_entries:
            return None
        return self._values[index]

    def _store(self, key: bytes, value: bytes, worker_id: int) -> None:
        index: int = self._index(key)
        if index >= self.spec.max_entries:
            raise MapKeyOutOfRange(f"map {self.map_id}: index {index} >= {self.spec.max_entries}")
        self._values[index].data[:] = value

    def _remove(self, key: bytes, worker_id: int) -> bool:
        return False

    def live_refs(self) -> int:
        return sum(value.refs for value in self._values)


class PerWorkerArrayMap(SharedMap):
    """One array per worker; a lookup sees the calling worker's slot."""

    def __init__(self, spec: MapSpec, num_workers: int) -> None:
        super().__init__(spec)
        self.num_workers: int = num_workers
        self._values: List[List[MapValue]] = [
            [MapValue(spec.value_bytes) for _ in range(spec.max_entries)]
            for _ in range(num_workers)
        ]

    def _find(self, key: bytes, worker_id: int) -> Optional[MapValue]:
        index: int = int.from_bytes(key, "little")
        if index >= self.spec.max_entries:
            return None
        return self._values[worker_id][index]

    def _store(self, key: bytes, value: bytes, worker_id: int) -> None:
        target: Optional[MapValue] = self._find(key, worker_id)
        if target is None:
            raise MapKeyOutOfRange(f"map {self.map_id}: key out of range")
        target.data[:] = value

    def _remove(self, key: bytes, worker_id: int) -> bool:
        return False

    def values_for(self, key: bytes) -> List[bytes]:
        """Host-side: the value stored under ``key`` on every worker."""
        index: int = int.from_bytes(key, "little")
        if index >= self.spec.max_entries:
            return []
        with self._lock:
            return [bytes(row[index].data) for row in self._values]

    def live_refs(self) -> int:
        return sum(value.refs for row in self._values for value in row)


_TOMBSTONE: bytes = b""


class HashMap(SharedMap):
    """Open addressing with linear probing and a seeded FNV-1a hash."""

    LOAD_FACTOR: float = 0.75

    def __init__(self, spec: MapSpec, seed: int = 0) -> None:
        super().__init__(spec)
        self.seed: int = seed
        capacity: int = 8
        while capacity < 2 * spec.max_entries:
            capacity *= 2
        self._mask: int = capacity - 1
        self._keys: List[Optional[bytes]] = [None] * capacity
        self._slots: List[Optional[MapValue]] = [None] * capacity
        self.count: int = 0
        self._tombstones: int = 0

    def _probe(self, key: bytes) -> Tuple[int, int]:
        """Return (slot of key or -1, first reusable slot)."""
        index: int = fnv1a_32(key, self.seed) & self._mask
        reusable: int = -1
        while True:
            stored: Optional[bytes] = self._keys[index]
            if stored is None:
                return -1, index if reusable < 0 else reusable
            if stored is _TOMBSTONE:
                if reusable < 0:
                    reusable = index
            elif stored == key:
                return index, index
            index = (index + 1) & self._mask

    def _find(self, key: bytes, worker_id: int) -> Optional[MapValue]:
        slot, _ = self._probe(key)
        return self._slots[slot] if slot >= 0 else None

    def _store(self, key: bytes, value: bytes, worker_id: int) -> None:
        slot, free = self._probe(key)
        if slot >= 0:
            # replace: readers holding the old value keep it until they drop it
            self._retire(self._slots[slot])
            self._slots[slot] = MapValue(self.spec.value_bytes, value)
            return
        if self.count >= self.spec.max_entries:
            raise MapFull(f"map {self.map_id} is full ({self.spec.max_entries} entries)")
        if self._keys[free] is _TOMBSTONE:
            self._tombstones -= 1
        self._keys[free] = bytes(key)
        self._slots[free] = MapValue(self.spec.value_bytes, value)
        self.count += 1
        if self.count + self._tombstones > self.LOAD_FACTOR * (self._mask + 1):
            self._rebuild()

    def _remove(self, key: bytes, worker_id: int) -> bool:
        slot, _ = self._probe(key)
        if slot < 0:
            return False
        self._retire(self._slots[slot])
        self._keys[slot] = _TOMBSTONE
        self._slots[slot] = None
        self.count -= 1
        self._tombstones += 1
        return True

    def _rebuild(self) -> None:
        entries: List[Tuple[bytes, MapValue]] = [
            (key, value)
            for key, value in zip(self._keys, self._slots)
            if key is not None and key is not _TOMBSTONE
        ]
        self._keys = [None] * (self._mask + 1)
        self._slots = [None] * (self._mask + 1)
        self._tombstones = 0
        for key, value in entries:
            _, free = self._probe(key)
            self._keys[free] = key
            self._slots[free] = value

    def keys(self) -> List[bytes]:
        with self._lock:
            return [key for key in self._keys if key is not None and key is not _TOMBSTONE]

    def live_refs(self) -> int:
        return sum(value.refs for value in self._slots if value is not None)


def create_map(spec: MapSpec, num_workers: int, hash_seed: int = 0) -> SharedMap:
    """Build the storage for a declared map."""
    if spec.kind is MapKind.ARRAY:
        return ArrayMap(spec)
    if spec.kind is MapKind.HASH:
        return HashMap(spec, hash_seed)
    return PerWorkerArrayMap(spec, num_workers)


def array_key(index: int) -> bytes:
    return index.to_bytes(ARRAY_KEY_BYTES, "little")


class MapValueGuard(Guard):
    """Reference to one map value; access is always exactly ``value_bytes`` wide."""

    def __init__(
        self, worker: WorkerState, record: CleanupRecord, shared_map: SharedMap, value: MapValue
    ) -> None:
        super().__init__(worker, record)
        self.map: SharedMap = shared_map
        self.value: MapValue = value

    def _release_resource(self) -> None:
        self.map.release_value(self.value)

    def read(self) -> bytes:
        return bytes(self.value.data)

    def write(self, data: bytes) -> None:
        self.map.check_value(self.worker, data)
        self.value.data[:] = data

    def view(self) -> BoundedView:
        return BoundedView(self.value.data, 0, self.map.spec.value_bytes, self.worker)

    def transmute(self, descriptor: TypeDescriptor) -> TypedRecord:
        return transmute_checked(self.view(), descriptor)


@helper
def map_lookup(worker: WorkerState, shared_map: SharedMap, key: bytes) -> Optional[MapValueGuard]:
    """
    Look up a key; a hit returns a guard recorded in the cleanup registry.

    Raises:
        ExtensionPanic: OutOfBounds, if the key size does not match the map
    """
    shared_map.check_key(worker, key)
    value: Optional[MapValue] = shared_map.acquire_value(key, worker.worker_id)
    if value is None:
        return None
    record: CleanupRecord = CleanupRecord(
        CleanupKind.MAP_VALUE_REF,
        (shared_map.map_id, bytes(key)),
        functools.partial(shared_map.release_value, value),
    )
    record_resource(worker, record)
    return MapValueGuard(worker, record, shared_map, value)


@helper
def map_update(worker: WorkerState, shared_map: SharedMap, key: bytes, value: bytes) -> None:
    """
    Insert or overwrite a value.

    Raises:
        MapFull: If a hash map is at max_entries and the key is new
        MapKeyOutOfRange: If an array index is past max_entries
        ExtensionPanic: OutOfBounds, if key or value sizes do not match the map
    """
    shared_map.check_key(worker, key)
    shared_map.check_value(worker, value)
    shared_map.update(key, value, worker.worker_id)


@helper
def map_delete(worker: WorkerState, shared_map: SharedMap, key: bytes) -> bool:
    """Delete a key; storage with live guards is reclaimed when the last guard drops."""
    shared_map.check_key(worker, key)
    return shared_map.delete(key, worker.worker_id)


# ---------------------------------------------------------------------------
# Atomic statics, trace pipe, packet buffers
# ---------------------------------------------------------------------------


class AtomicStatic:
    """Host-global integer with sequentially consistent read and add."""

    __slots__ = ("var_id", "_lock", "_value")

    def __init__(self, var_id: str, initial: int = 0) -> None:
        self.var_id: str = var_id
        self._lock: threading.Lock = threading.Lock()
        self._value: int = initial

    def read(self) -> int:
        with self._lock:
            return self._value

    def add(self, delta: int) -> int:
        with self._lock:
            self._value += delta
            return self._value


def atomic_static(statics: Mapping[str, AtomicStatic], var_id: str) -> AtomicStatic:
    """
    Direct access to a static variable registered at load (no helper wrapping).

    Raises:
        UnknownVar: If the variable was never registered
    """
    try:
        return statics[var_id]
    except KeyError:
        raise UnknownVar(f"static variable {var_id} is not registered") from None


class TracePipe:
    """Bounded debug-print sink, separate from the panic ring."""

    def __init__(self, capacity: int = TRACE_PIPE_CAPACITY) -> None:
        self._lines: Deque[str] = deque(maxlen=capacity)
        self._lock: threading.Lock = threading.Lock()

    def append(self, line: str) -> None:
        with self._lock:
            self._lines.append(line)

    def lines(self) -> List[str]:
        with self._lock:
            return list(self._lines)

    def clear(self) -> None:
        with self._lock:
            self._lines.clear()


@helper
def trace_printk(worker: WorkerState, pipe: TracePipe, message: str) -> None:
    pipe.append(f"worker={worker.worker_id} ext={worker.current_extension} {message}")


class PacketBuffer:
    """Fixed-capacity frame with a variable length, the packet hooks' data."""

    def __init__(self, frame: bytes, capacity: int = PACKET_CAPACITY) -> None:
        if len(frame) > capacity:
            raise ValueError(f"frame of {len(frame)} bytes exceeds capacity {capacity}")
        self.capacity: int = capacity
        self.data: bytearray = bytearray(capacity)
        self.data[:len(frame)] = frame
        self.length: int = len(frame)

    def view(self, worker: Optional[WorkerState] = None) -> BoundedView:
        return BoundedView(self.data, 0, self.length, worker)

    def frame(self) -> bytes:
        return bytes(self.data[:self.length])


@helper
def adjust_tail(worker: WorkerState, packet: PacketBuffer, delta: int) -> bool:
    """Grow or shrink the frame; returns False if the new length does not fit."""
    new_length: int = packet.length + delta
    if not 0 <= new_length <= packet.capacity:
        return False
    if delta > 0:
        packet.data[packet.length:new_length] = bytes(delta)
    packet.length = new_length
    return True


def register_statics(names: Iterable[str], table: Dict[str, AtomicStatic]) -> List[str]:
    """Create statics that are not registered yet; returns the names created."""
    created: List[str] = []
    for name in names:
        if name not in table:
            table[name] = AtomicStatic(name)
            created.append(name)
    return created
