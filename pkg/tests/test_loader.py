import logging
import random
from collections import deque
from typing import Dict, List

import pytest

from src.bmc import egress_manifest, ingress_manifest
from src.config import FORBIDDEN_FEATURES, MANIFEST_DIR
from src.core_types import (
    CallEdge,
    CallGraph,
    CallNode,
    ExtensionManifest,
    MapKind,
    MapSpec,
    ProgramKind,
    StackModeKind,
)
from src.errors import (
    BoundExceeded,
    CyclicGraph,
    DuplicateId,
    FrameTooLarge,
    IndirectEdge,
    LintRejected,
    ManifestError,
    MapTypeMismatch,
    UnknownExtension,
)
from src.loader import (
    classify_stack_mode,
    compute_static_bound,
    crash_stop,
    find_cycle,
    lint_manifest,
    load_extension,
    manifest_from_dict,
    read_manifest,
    unload_extension,
)
from src.programs import empty_prog, indirect_manifest, recursion_manifest, resolve_entry, simple_manifest


def _chain(frames: List[int]) -> CallGraph:
    nodes = tuple(CallNode(f"f{i}", frame) for i, frame in enumerate(frames))
    edges = tuple(CallEdge(f"f{i}", (f"f{i + 1}",)) for i in range(len(frames) - 1))
    return CallGraph(nodes=nodes, edges=edges)


def _array(map_id: str, value_bytes: int = 8) -> MapSpec:
    return MapSpec(map_id, MapKind.ARRAY, 4, value_bytes, 4)


# Lint


@pytest.mark.parametrize("feature", sorted(FORBIDDEN_FEATURES))
def test_each_forbidden_feature_is_rejected(host, feature):
    manifest = simple_manifest("bad", "empty_prog", maps=[_array("m")], feature_flags=[feature, "maps"])
    report = lint_manifest(manifest)
    assert not report.accepted
    assert [v.feature for v in report.violations] == [feature]

    with pytest.raises(LintRejected) as info:
        load_extension(manifest, empty_prog, host)
    assert info.value.report == report
    assert not host.is_loaded("bad")
    assert host.maps == {}


def test_lint_lists_every_violation_once_sorted():
    manifest = simple_manifest("bad", "empty_prog", feature_flags=["simd", "unsafe-code", "floating-point"])
    report = lint_manifest(manifest)
    assert [v.feature for v in report.violations] == ["floating-point", "simd", "unsafe-code"]
    assert all(v.reason for v in report.violations)


def test_lint_accepts_unknown_benign_flags():
    assert lint_manifest(simple_manifest("ok", "empty_prog", feature_flags=["maps", "spinlock"])).accepted


# Frame limits and static bounds


def test_frame_limit_is_inclusive(config):
    assert classify_stack_mode(_chain([4096]), config).total_bytes == 4096
    with pytest.raises(FrameTooLarge) as info:
        classify_stack_mode(_chain([128, 4097]), config)
    assert info.value.function_id == "f1"


def test_static_bound_of_chain_and_diamond():
    assert compute_static_bound(_chain([100, 200, 300])) == 600
    diamond = CallGraph(
        nodes=(CallNode("a", 10), CallNode("b", 500), CallNode("c", 20), CallNode("d", 7)),
        edges=(
            CallEdge("a", ("b",)),
            CallEdge("a", ("c",)),
            CallEdge("b", ("d",)),
            CallEdge("c", ("d",)),
        ),
    )
    assert compute_static_bound(diamond) == 517
    assert compute_static_bound(diamond, entry="c") == 27


def _heaviest_path(frames: Dict[str, int], children: Dict[str, List[str]], node: str) -> int:
    return frames[node] + max((_heaviest_path(frames, children, c) for c in children[node]), default=0)


def test_static_bound_matches_path_enumeration_on_random_dags():
    rng = random.Random(7)
    for _ in range(500):
        n = rng.randint(1, 12)
        frames = {f"f{i}": rng.randint(0, 4096) for i in range(n)}
        children: Dict[str, List[str]] = {f"f{i}": [] for i in range(n)}
        edges = []
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < 0.3:
                    children[f"f{i}"].append(f"f{j}")
                    edges.append(CallEdge(f"f{i}", (f"f{j}",)))
        cg = CallGraph(nodes=tuple(CallNode(k, v) for k, v in frames.items()), edges=tuple(edges))
        assert compute_static_bound(cg, "f0") == _heaviest_path(frames, children, "f0")


def test_threshold_is_inclusive(config):
    mode = classify_stack_mode(_chain([4096] * 4), config)
    assert mode.kind is StackModeKind.STATICALLY_BOUNDED
    assert mode.total_bytes == 16384
    with pytest.raises(BoundExceeded) as info:
        classify_stack_mode(_chain([4096] * 5), config)
    assert info.value.total_bytes == 20480
    assert info.value.limit == 16384


def test_cycle_and_indirect_edges_are_runtime_checked(config):
    recursion = recursion_manifest().callgraph
    assert find_cycle(recursion) == ["recurse", "recurse"]
    assert classify_stack_mode(recursion, config).is_runtime_checked
    with pytest.raises(CyclicGraph):
        compute_static_bound(recursion)

    indirect = indirect_manifest("ind", "empty_prog", ("counter_event",)).callgraph
    assert classify_stack_mode(indirect, config).is_runtime_checked
    with pytest.raises(IndirectEdge):
        compute_static_bound(indirect)


def test_runtime_checked_mode_still_enforces_frame_limit(config):
    with pytest.raises(FrameTooLarge):
        classify_stack_mode(recursion_manifest(frame_bytes=5000).callgraph, config)


# Load and unload


def test_load_registers_handle_and_maps(host):
    handle = load_extension(ingress_manifest(), resolve_entry("bmc_ingress"), host)
    assert handle.stack_mode.total_bytes == 256 + 192 + 128
    assert handle.attached_maps == ("bmc_cache", "bmc_stats")
    assert handle.entry_frame_bytes == 256
    assert host.handle("bmc") is handle
    assert sorted(host.maps) == ["bmc_cache", "bmc_stats"]


def test_duplicate_id_is_rejected(host):
    load_extension(simple_manifest("a", "empty_prog"), empty_prog, host)
    with pytest.raises(DuplicateId):
        load_extension(simple_manifest("a", "empty_prog"), empty_prog, host)


def test_map_redeclared_with_other_spec_is_rejected(host):
    load_extension(simple_manifest("a", "empty_prog", maps=[_array("m")]), empty_prog, host)
    with pytest.raises(MapTypeMismatch):
        load_extension(simple_manifest("b", "empty_prog", maps=[_array("m", 16)]), empty_prog, host)
    assert not host.is_loaded("b")
    assert host.map_users["m"] == ["a"]


def test_identical_specs_share_one_map(host):
    load_extension(ingress_manifest(), resolve_entry("bmc_ingress"), host)
    load_extension(egress_manifest(), resolve_entry("bmc_egress"), host)
    assert host.map_users["bmc_cache"] == ["bmc", "bmc_egress"]
    shared = host.maps["bmc_cache"]

    assert unload_extension(host, "bmc_egress") == ["bmc_egress"]
    assert host.maps["bmc_cache"] is shared
    assert unload_extension(host, "bmc") == ["bmc"]
    assert host.maps == {}


def test_unload_unknown_extension(host):
    with pytest.raises(UnknownExtension):
        unload_extension(host, "nope")


def test_statics_are_dropped_with_their_last_user(host):
    load_extension(simple_manifest("a", "counter_event", ProgramKind.TRACE_EVENT, static_vars=["events"]),
                   resolve_entry("counter_event"), host)
    load_extension(simple_manifest("b", "counter_event", ProgramKind.TRACE_EVENT, static_vars=["events"]),
                   resolve_entry("counter_event"), host)
    unload_extension(host, "a")
    assert "events" in host.statics
    unload_extension(host, "b")
    assert "events" not in host.statics


def _bfs_oracle(declared: Dict[str, List[str]], start: str) -> List[str]:
    order, seen, queue = [start], {start}, deque([start])
    while queue:
        current = queue.popleft()
        for map_id in declared[current]:
            for other, maps in declared.items():
                if map_id in maps and other not in seen:
                    seen.add(other)
                    order.append(other)
                    queue.append(other)
    return order


def test_crash_stop_cascades_over_the_sharing_component(host):
    declared = {"e1": ["m1"], "e2": ["m1", "m2"], "e3": ["m2"], "e4": ["m4"]}
    for extension_id, maps in declared.items():
        manifest = simple_manifest(extension_id, "empty_prog", maps=[_array(m) for m in maps])
        load_extension(manifest, empty_prog, host)

    assert host.sharing_component("e1") == _bfs_oracle(declared, "e1")
    removed = crash_stop(host, "e1")
    assert removed == ["e1", "e2", "e3"]
    assert sorted(host.extensions) == ["e4"]
    assert sorted(host.maps) == ["m4"]
    assert host.quarantined == set()
    assert host.removed_log == [["e1", "e2", "e3"]]
    assert crash_stop(host, "e1") == []


def test_crash_stop_of_isolated_extension_removes_only_it(host):
    load_extension(simple_manifest("a", "empty_prog", maps=[_array("ma")]), empty_prog, host)
    load_extension(simple_manifest("b", "empty_prog", maps=[_array("mb")]), empty_prog, host)
    assert crash_stop(host, "b") == ["b"]
    assert host.is_loaded("a")


def test_unreachable_functions_are_logged(host, caplog):
    manifest = ExtensionManifest(
        extension_id="orphan",
        program_kind=ProgramKind.PACKET_INGRESS,
        feature_flags=frozenset(),
        callgraph=CallGraph(nodes=(CallNode("empty_prog", 64), CallNode("dead_code", 64))),
        entry_symbol="empty_prog",
    )
    with caplog.at_level(logging.WARNING, logger="src.loader"):
        load_extension(manifest, empty_prog, host)
    assert "dead_code" in caplog.text


# Manifest files


def test_shipped_manifest_matches_builder():
    assert read_manifest(MANIFEST_DIR / "bmc.yaml") == ingress_manifest()
    assert read_manifest(MANIFEST_DIR / "bmc_egress.yaml") == egress_manifest()


def test_rejected_manifest_parses_but_fails_lint(host):
    manifest = read_manifest(MANIFEST_DIR / "rejected_unsafe.yaml")
    assert not lint_manifest(manifest).accepted
    with pytest.raises(LintRejected):
        load_extension(manifest, resolve_entry(manifest.entry_symbol), host)


def test_recursion_manifest_file_is_runtime_checked(host):
    manifest = read_manifest(MANIFEST_DIR / "recursion.yaml")
    handle = load_extension(manifest, resolve_entry(manifest.entry_symbol), host)
    assert handle.stack_mode.is_runtime_checked


@pytest.mark.parametrize(
    "data",
    [
        {"extension_id": "x"},
        {"extension_id": "x", "program_kind": "socket", "entry_symbol": "f",
         "callgraph": {"nodes": [{"function_id": "f", "frame_bytes": 8}]}},
        {"extension_id": "x", "program_kind": "trace-event", "entry_symbol": "g",
         "callgraph": {"nodes": [{"function_id": "f", "frame_bytes": 8}]}},
    ],
)
def test_malformed_manifest_dicts(data):
    with pytest.raises(ManifestError):
        manifest_from_dict(data)


def test_read_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing.yaml")
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ManifestError):
        read_manifest(listing)


def test_resolve_entry_rejects_unknown_symbol():
    with pytest.raises(ManifestError):
        resolve_entry("no_such_program")
