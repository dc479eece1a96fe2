import random

import pytest

from src.core_types import CleanupKind, CleanupRecord, ExecFlag, MapKind, MapSpec, PanicReason, ProgramKind
from src.dispatcher import dispatch
from src.errors import ExtensionPanic, PopMismatch
from src.loader import load_extension
from src.programs import simple_manifest
from src.resources import (
    RefcountedObject,
    SpinlockCell,
    acquire_ref,
    record_resource,
    release_all,
    spin_lock,
)
from src.safe_interface import BoundedView, array_key, map_lookup


def test_second_lock_is_a_double_lock(worker, extension_scope):
    first, second = SpinlockCell("a"), SpinlockCell("b")
    with extension_scope(worker):
        spin_lock(worker, first)
        with pytest.raises(ExtensionPanic) as info:
            spin_lock(worker, second)
        assert info.value.reason is PanicReason.DOUBLE_LOCK
        assert not second.locked
        assert release_all(worker) == 1
    assert not first.locked


def test_release_all_is_lifo(worker, extension_scope):
    a, b = RefcountedObject("a"), RefcountedObject("b")
    cell = SpinlockCell("l")
    with extension_scope(worker):
        acquire_ref(worker, a)
        acquire_ref(worker, b)
        spin_lock(worker, cell)
        assert [r.kind for r in worker.cleanup_registry] == [
            CleanupKind.REFCOUNT,
            CleanupKind.REFCOUNT,
            CleanupKind.LOCK,
        ]
        assert release_all(worker) == 3
    assert worker.last_release_order == [3, 2, 1]
    assert worker.registry_high_water == 3
    assert (a.refcount, b.refcount, cell.locked, worker.lock_held) == (1, 1, False, False)


def test_guard_scope_releases_on_normal_exit_only(worker, extension_scope):
    obj = RefcountedObject("obj")
    with extension_scope(worker):
        with acquire_ref(worker, obj):
            assert obj.refcount == 2
        assert obj.refcount == 1
        assert worker.cleanup_registry == []

        with pytest.raises(ExtensionPanic):
            with acquire_ref(worker, obj):
                raise ExtensionPanic(PanicReason.EXPLICIT_PANIC, "unwinding")
        assert obj.refcount == 2
        assert len(worker.cleanup_registry) == 1
        release_all(worker)
    assert obj.refcount == 1


def test_guard_release_is_idempotent(worker, extension_scope):
    obj = RefcountedObject("obj")
    with extension_scope(worker):
        guard = acquire_ref(worker, obj)
        guard.release()
        guard.release()
    assert obj.refcount == 1


def test_out_of_order_pop_is_detected(worker, extension_scope):
    a, b = RefcountedObject("a"), RefcountedObject("b")
    with extension_scope(worker):
        first = acquire_ref(worker, a)
        acquire_ref(worker, b)
        with pytest.raises(PopMismatch):
            first.release()
        assert worker.exec_flag is ExecFlag.HELPER_OR_PANIC
        release_all(worker)
    assert (a.refcount, b.refcount) == (1, 1)


def test_only_the_owner_unlocks():
    cell = SpinlockCell("l")
    cell.spin_until_locked(3)
    with pytest.raises(PopMismatch):
        cell.unlock(4)
    cell.unlock(3)
    assert not cell.locked
    assert cell.acquisitions == 1


def test_acquisition_inside_panic_path_is_counted(worker):
    worker.in_panic_path = True
    record_resource(worker, CleanupRecord(CleanupKind.REFCOUNT, ("x",), lambda: None))
    worker.in_panic_path = False
    assert worker.panic_path_violations == 1
    release_all(worker)


# Randomized panic injection

FAULTS = {
    "panic": PanicReason.EXPLICIT_PANIC,
    "oob": PanicReason.OUT_OF_BOUNDS,
    "relock": PanicReason.DOUBLE_LOCK,
}


def scripted(ctx):
    guards = []
    for step in ctx.event["plan"]:
        if step == "ref":
            guards.append(ctx.get_ref(f"obj{len(guards) % 3}"))
        elif step == "lock":
            guards.append(ctx.lock("L"))
        elif step == "map":
            guards.append(map_lookup(ctx.worker, ctx.map("m"), array_key(0)))
        elif step == "panic":
            ctx.panic("injected")
        elif step == "oob":
            BoundedView(bytearray(4), worker=ctx.worker).read(2, 4)
        elif step == "relock":
            ctx.lock("L2")
    for guard in reversed(guards):
        guard.release()
    return 0


def _plan(rng):
    steps = [rng.choice(["ref", "map"]) for _ in range(rng.randint(0, 6))]
    if rng.random() < 0.5:
        steps.insert(rng.randint(0, len(steps)), "lock")
    fault = rng.choice([None, "panic", "oob", "relock"])
    if fault == "relock" and "lock" not in steps:
        steps.insert(0, "lock")
    if fault is not None:
        position = rng.randint(steps.index("lock") + 1 if fault == "relock" else 0, len(steps))
        steps.insert(position, fault)
    return steps, fault


def test_randomized_panic_injection_leaves_nothing_behind(host):
    rng = random.Random(1234)
    objects = [host.register_object(f"obj{i}") for i in range(3)]
    manifest = simple_manifest(
        "scripted", "scripted", ProgramKind.TRACE_EVENT,
        maps=[MapSpec("m", MapKind.ARRAY, 4, 8, 1)],
    )
    panics = 0
    for i in range(1000):
        if not host.is_loaded("scripted"):
            load_extension(manifest, scripted, host)
        worker = host.workers[i % len(host.workers)]
        plan, fault = _plan(rng)
        outcome = dispatch(host, worker, "scripted", event={"plan": plan})

        if fault is None:
            assert not outcome.panicked, plan
        else:
            panics += 1
            assert outcome.panic.reason is FAULTS[fault], plan
            acquired = sum(step in ("ref", "lock", "map") for step in plan[:plan.index(fault)])
            order = worker.last_release_order
            assert len(order) == acquired
            assert order == sorted(order, reverse=True)

        assert worker.exec_flag is ExecFlag.IDLE
        assert host.leaked_registries() == []
        assert host.locked_spinlocks() == []
        assert host.live_map_refs() == 0
        assert [obj.refcount for obj in objects] == [1, 1, 1]
        assert all(w.panic_path_violations == 0 for w in host.workers)
    assert host.ring.total == panics > 0
