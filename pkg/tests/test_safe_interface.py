import threading

import numpy as np
import pytest

from src.bmc import CACHE_ENTRY
from src.core_types import MapKind, MapSpec, PanicReason
from src.errors import ExtensionPanic, LayoutRejected, MapFull, MapKeyOutOfRange, UnknownVar
from src.safe_interface import (
    DESCRIPTORS,
    ArrayMap,
    AtomicStatic,
    BoundedView,
    HashMap,
    PacketBuffer,
    PerWorkerArrayMap,
    TracePipe,
    adjust_tail,
    array_key,
    atomic_static,
    create_map,
    fnv1a_32,
    map_delete,
    map_lookup,
    map_update,
    register_statics,
    trace_printk,
    transmute_checked,
)


CANARY = 0xA5


def test_fnv1a_known_values():
    assert fnv1a_32(b"") == 0x811C9DC5
    assert fnv1a_32(b"a") == 0xE40C292C
    assert fnv1a_32(b"a", seed=1) != fnv1a_32(b"a")


# Bounded views


def test_view_bounds_are_exact():
    view = BoundedView(bytearray(16), 4, 8)
    view.write(0, b"\x01" * 8)
    assert view.read(7, 1) == b"\x01"
    assert view.read(8, 0) == b""
    for offset, length in [(8, 1), (0, 9), (-1, 1), (4, 5)]:
        with pytest.raises(ExtensionPanic) as info:
            view.read(offset, length)
        assert info.value.reason is PanicReason.OUT_OF_BOUNDS


def test_view_must_fit_its_origin():
    with pytest.raises(ValueError):
        BoundedView(bytearray(8), 4, 8)


@pytest.mark.parametrize("iterations", [2000, pytest.param(100_000, marks=pytest.mark.slow)])
def test_fuzzed_accesses_never_touch_the_padding(iterations):
    rng = np.random.default_rng(99)
    for _ in range(iterations):
        length = int(rng.integers(0, 65))
        backing = bytearray([CANARY] * (length + 32))
        view = BoundedView(backing, 16, length)
        offset = int(rng.integers(-8, length + 9))
        size = int(rng.integers(0, 17))
        in_bounds = 0 <= offset and offset + size <= length
        try:
            view.write(offset, b"\x00" * size)
            assert in_bounds
        except ExtensionPanic as panic:
            assert not in_bounds
            assert panic.reason is PanicReason.OUT_OF_BOUNDS
        assert backing[:16] == bytearray([CANARY] * 16)
        assert backing[16 + length:] == bytearray([CANARY] * 16)


def test_subview_is_checked_against_its_parent():
    view = BoundedView(bytearray(10))
    sub = view.subview(2, 4)
    sub.write_uint(0, 4, 0x01020304)
    assert view.read(2, 4) == b"\x04\x03\x02\x01"
    with pytest.raises(ExtensionPanic):
        view.subview(8, 4)
    with pytest.raises(ExtensionPanic):
        sub.read_u8(4)


def test_panic_is_noted_on_the_worker(worker):
    view = BoundedView(bytearray(2), worker=worker)
    with pytest.raises(ExtensionPanic):
        view.read(0, 3)
    assert worker.pending_panic is not None
    worker.pending_panic = None


# Safe transmute


@pytest.mark.parametrize(
    "fields, total",
    [
        ([("a", 0, 4, "f32")], 4),
        ([("a", 0, 2, "u16"), ("b", 4, 4, "u32")], 8),
        ([("a", 0, 4, "u32"), ("b", 2, 4, "u32")], 8),
        ([("a", 0, 4, "u32")], 8),
        ([("a", 0, 3, "u16")], 3),
        ([("a", 0, 1, "u8"), ("a", 1, 1, "u8")], 2),
    ],
)
def test_descriptor_registry_rejects_bad_layouts(fields, total):
    with pytest.raises(LayoutRejected):
        DESCRIPTORS.register("rejected_layout", fields, total)


def test_descriptor_registration_is_idempotent_for_one_layout():
    fields = [("x", 0, 4, "u32"), ("y", 4, 4, "u32")]
    first = DESCRIPTORS.register("test_point", fields, 8)
    assert DESCRIPTORS.register("test_point", fields, 8) is first
    with pytest.raises(LayoutRejected):
        DESCRIPTORS.register("test_point", [("x", 0, 8, "u64")], 8)


def test_descriptors_cannot_be_forged():
    real = DESCRIPTORS.register("test_pair", [("lo", 0, 4, "u32"), ("hi", 4, 4, "u32")], 8)
    with pytest.raises(LayoutRejected):
        type(real)("forged", real.layout, 8, real.dtype)


def test_transmute_reads_and_writes_fields():
    data = bytearray(CACHE_ENTRY.total_bytes + 8)
    record = transmute_checked(BoundedView(data), CACHE_ENTRY)
    record["valid"] = 1
    record["key_len"] = 5
    record["key"] = b"hello"
    assert record["valid"] == 1
    assert record["key"][:5] == b"hello"
    assert data[0] == 1
    assert data[8:10] == b"\x05\x00"
    assert data[12:17] == b"hello"
    assert CACHE_ENTRY.dtype.itemsize == 1288
    assert record.to_dict()["data_len"] == 0


def test_transmute_field_write_is_bounded():
    record = transmute_checked(BoundedView(bytearray(CACHE_ENTRY.total_bytes)), CACHE_ENTRY)
    with pytest.raises(ExtensionPanic) as info:
        record["key"] = b"k" * 251
    assert info.value.reason is PanicReason.OUT_OF_BOUNDS


def test_transmute_into_a_short_view_is_a_violation():
    with pytest.raises(ExtensionPanic) as info:
        transmute_checked(BoundedView(bytearray(100)), CACHE_ENTRY)
    assert info.value.reason is PanicReason.TRANSMUTE_VIOLATION


def test_transmute_rejects_unregistered_descriptors():
    with pytest.raises(ExtensionPanic) as info:
        transmute_checked(BoundedView(bytearray(8)), object())
    assert info.value.reason is PanicReason.TRANSMUTE_VIOLATION


# Maps


def test_create_map_by_kind():
    assert isinstance(create_map(MapSpec("a", MapKind.ARRAY, 4, 8, 2), 2), ArrayMap)
    assert isinstance(create_map(MapSpec("h", MapKind.HASH, 8, 8, 2), 2), HashMap)
    assert isinstance(create_map(MapSpec("p", MapKind.PER_WORKER, 4, 8, 2), 2), PerWorkerArrayMap)


def test_array_map_lookup_update_delete(worker, extension_scope):
    shared = ArrayMap(MapSpec("a", MapKind.ARRAY, 4, 8, 2))
    with extension_scope(worker):
        map_update(worker, shared, array_key(1), b"\x07" * 8)
        with map_lookup(worker, shared, array_key(1)) as guard:
            assert guard.read() == b"\x07" * 8
            assert shared.live_refs() == 1
        assert shared.live_refs() == 0
        assert map_lookup(worker, shared, array_key(2)) is None
        assert map_delete(worker, shared, array_key(1)) is False
        with pytest.raises(MapKeyOutOfRange):
            map_update(worker, shared, array_key(5), b"\x00" * 8)
    assert shared.peek(array_key(1)) == b"\x07" * 8


def test_key_and_value_sizes_are_checked(worker, extension_scope):
    shared = ArrayMap(MapSpec("a", MapKind.ARRAY, 4, 8, 2))
    with extension_scope(worker):
        with pytest.raises(ExtensionPanic) as info:
            map_lookup(worker, shared, b"\x00" * 8)
        assert info.value.reason is PanicReason.OUT_OF_BOUNDS
    with extension_scope(worker):
        with pytest.raises(ExtensionPanic):
            map_update(worker, shared, array_key(0), b"\x00" * 7)


def test_guard_write_must_fill_the_value(worker, extension_scope):
    shared = ArrayMap(MapSpec("a", MapKind.ARRAY, 4, 8, 1))
    with extension_scope(worker):
        guard = map_lookup(worker, shared, array_key(0))
        guard.write(b"\x01" * 8)
        with pytest.raises(ExtensionPanic):
            guard.write(b"\x01" * 9)
        with pytest.raises(ExtensionPanic):
            guard.view().read(0, 9)


def test_hash_map_full_and_delete(worker, extension_scope):
    shared = HashMap(MapSpec("h", MapKind.HASH, 8, 4, 3), seed=5)
    with extension_scope(worker):
        for i in range(3):
            map_update(worker, shared, b"key-%04d" % i, i.to_bytes(4, "little"))
        with pytest.raises(MapFull):
            map_update(worker, shared, b"key-0003", b"\x00" * 4)
        map_update(worker, shared, b"key-0001", b"\xff" * 4)
        assert map_delete(worker, shared, b"key-0000") is True
        assert map_delete(worker, shared, b"key-0000") is False
        map_update(worker, shared, b"key-0003", b"\x03\x00\x00\x00")
    assert sorted(shared.keys()) == [b"key-0001", b"key-0002", b"key-0003"]
    assert shared.peek(b"key-0001") == b"\xff" * 4
    assert shared.count == 3


def test_hash_map_survives_rebuilds():
    shared = HashMap(MapSpec("h", MapKind.HASH, 4, 4, 64))
    for round_ in range(5):
        for i in range(64):
            shared.update(array_key(i), (i + round_).to_bytes(4, "little"))
        for i in range(0, 64, 2):
            assert shared.delete(array_key(i))
    assert shared.count == 32
    assert all(shared.peek(array_key(i)) == (i + 4).to_bytes(4, "little") for i in range(1, 64, 2))


def test_deleted_value_is_reclaimed_after_last_guard(worker, extension_scope):
    shared = HashMap(MapSpec("h", MapKind.HASH, 4, 4, 4))
    shared.update(array_key(1), b"\x01\x00\x00\x00")
    with extension_scope(worker):
        guard = map_lookup(worker, shared, array_key(1))
        assert map_delete(worker, shared, array_key(1))
        assert (shared.reclaimed, shared.deferred) == (0, 1)
        assert guard.read() == b"\x01\x00\x00\x00"
        assert map_lookup(worker, shared, array_key(1)) is None
        guard.release()
    assert (shared.reclaimed, shared.deferred) == (1, 0)


def test_per_worker_map_isolates_workers():
    shared = PerWorkerArrayMap(MapSpec("p", MapKind.PER_WORKER, 4, 8, 1), 2)
    shared.update(array_key(0), (5).to_bytes(8, "little"), worker_id=1)
    values = [int.from_bytes(v, "little") for v in shared.values_for(array_key(0))]
    assert values == [0, 5]
    assert int(np.sum(values)) == 5


MODEL_CALLS = 10_000


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hash_map_matches_a_dict_model(worker, extension_scope, seed):
    rng = np.random.default_rng(seed)
    spec = MapSpec("h", MapKind.HASH, 4, 4, 64)
    shared = HashMap(spec, seed=seed)
    keys = [array_key(i) for i in range(96)]
    model = {}
    full = 0
    ops = rng.choice(3, size=MODEL_CALLS, p=[0.3, 0.5, 0.2])
    picks = rng.integers(0, len(keys), MODEL_CALLS)
    values = rng.integers(0, 2**32, MODEL_CALLS, dtype=np.uint64)
    with extension_scope(worker):
        for op, pick, raw in zip(ops, picks, values):
            key = keys[int(pick)]
            if op == 0:
                guard = map_lookup(worker, shared, key)
                if key in model:
                    with guard:
                        assert guard.read() == model[key]
                else:
                    assert guard is None
            elif op == 1:
                value = int(raw).to_bytes(4, "little")
                if key not in model and len(model) >= spec.max_entries:
                    with pytest.raises(MapFull):
                        map_update(worker, shared, key, value)
                    full += 1
                else:
                    map_update(worker, shared, key, value)
                    model[key] = value
            else:
                assert map_delete(worker, shared, key) is (key in model)
                model.pop(key, None)
            assert shared.count == len(model)
    assert full > 0
    assert sorted(shared.keys()) == sorted(model)
    assert all(shared.peek(key) == model.get(key) for key in keys)
    assert shared.live_refs() == 0


@pytest.mark.parametrize("seed", [0, 1])
def test_array_map_matches_a_dict_model(worker, extension_scope, seed):
    rng = np.random.default_rng(seed)
    spec = MapSpec("a", MapKind.ARRAY, 4, 8, 32)
    shared = ArrayMap(spec)
    keys = [array_key(i) for i in range(40)]
    model = {key: bytes(8) for key in keys[: spec.max_entries]}
    ops = rng.integers(0, 3, MODEL_CALLS)
    picks = rng.integers(0, len(keys), MODEL_CALLS)
    values = rng.integers(0, 2**62, MODEL_CALLS)
    with extension_scope(worker):
        for op, pick, raw in zip(ops, picks, values):
            key = keys[int(pick)]
            if op == 0:
                guard = map_lookup(worker, shared, key)
                if key in model:
                    with guard:
                        assert guard.read() == model[key]
                else:
                    assert guard is None
            elif op == 1:
                value = int(raw).to_bytes(8, "little")
                if key in model:
                    map_update(worker, shared, key, value)
                    model[key] = value
                else:
                    with pytest.raises(MapKeyOutOfRange):
                        map_update(worker, shared, key, value)
            else:
                assert map_delete(worker, shared, key) is False
    assert all(shared.peek(key) == model.get(key) for key in keys)
    assert shared.live_refs() == 0


# Statics, trace pipe, packets


def test_atomic_static_lookup():
    table = {}
    assert register_statics(["a", "b"], table) == ["a", "b"]
    assert register_statics(["a"], table) == []
    assert atomic_static(table, "a").add(3) == 3
    with pytest.raises(UnknownVar):
        atomic_static(table, "missing")
    assert AtomicStatic("z", 9).read() == 9


def test_atomic_static_adds_are_not_lost_across_threads():
    counter = AtomicStatic("hits")
    start = threading.Barrier(4)

    def bump():
        start.wait()
        for _ in range(1000):
            counter.add(1)

    threads = [threading.Thread(target=bump) for _ in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert counter.read() == 4000


def test_trace_printk_needs_extension_context(worker, extension_scope):
    pipe = TracePipe(capacity=2)
    with extension_scope(worker, "tracer"):
        for word in ("one", "two", "three"):
            trace_printk(worker, pipe, word)
    assert pipe.lines() == ["worker=0 ext=tracer two", "worker=0 ext=tracer three"]


def test_adjust_tail(worker, extension_scope):
    packet = PacketBuffer(b"\x01" * 10, capacity=16)
    with extension_scope(worker):
        assert adjust_tail(worker, packet, 6)
        assert packet.frame() == b"\x01" * 10 + b"\x00" * 6
        assert not adjust_tail(worker, packet, 1)
        assert adjust_tail(worker, packet, -16)
        assert not adjust_tail(worker, packet, -1)
    assert packet.length == 0
    with pytest.raises(ValueError):
        PacketBuffer(b"\x00" * 17, capacity=16)
