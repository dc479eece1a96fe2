"""Manifest lint, stack classification, and extension load/unload."""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Set, Tuple

import yaml

from src.config import FORBIDDEN_FEATURE_REASONS, FORBIDDEN_FEATURES
from src.core_types import (
    CallEdge,
    CallGraph,
    CallNode,
    EdgeKind,
    ExtensionManifest,
    HostConfig,
    MapKind,
    MapSpec,
    ProgramKind,
    StackMode,
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
from src.host import Host
from src.safe_interface import register_statics


logger: logging.Logger = logging.getLogger(__name__)

Entry = Callable[[Any], Any]


class LintVerdict(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


@dataclass(frozen=True)
class LintViolation:
    feature: str
    reason: str


@dataclass(frozen=True)
class LintReport:
    verdict: LintVerdict
    violations: Tuple[LintViolation, ...] = ()

    @property
    def accepted(self) -> bool:
        return self.verdict is LintVerdict.ACCEPTED


@dataclass(frozen=True)
class ExtensionHandle:
    """A loaded, dispatchable extension."""

    extension_id: str
    program_kind: ProgramKind
    stack_mode: StackMode
    entry: Entry
    entry_symbol: str
    attached_maps: Tuple[str, ...]
    frame_table: Mapping[str, int]
    static_vars: Tuple[str, ...] = ()

    @property
    def entry_frame_bytes(self) -> int:
        return self.frame_table[self.entry_symbol]


def lint_manifest(manifest: ExtensionManifest) -> LintReport:
    """
    Check declared features against the forbidden set.

    Rejection is a value, not an error. Violations are listed once each, in
    sorted order.
    """
    offending: List[str] = sorted(set(manifest.feature_flags) & FORBIDDEN_FEATURES)
    if not offending:
        return LintReport(LintVerdict.ACCEPTED)
    violations: Tuple[LintViolation, ...] = tuple(
        LintViolation(feature, FORBIDDEN_FEATURE_REASONS[feature]) for feature in offending
    )
    return LintReport(LintVerdict.REJECTED, violations)


def check_frame_limits(cg: CallGraph, cfg: HostConfig) -> None:
    """
    Every frame must fit the per-function limit (inclusive).

    Raises:
        FrameTooLarge: For the first offender in node order
    """
    limit: int = cfg.per_function_frame_limit
    for node in cg.nodes:
        if node.frame_bytes > limit:
            raise FrameTooLarge(node.function_id, node.frame_bytes, limit)


def find_cycle(cg: CallGraph) -> Optional[List[str]]:
    """Return one directed cycle as a node list, or None (iterative three-colour DFS)."""
    white, grey, black = 0, 1, 2
    colour: Dict[str, int] = {function_id: white for function_id in cg.node_ids()}
    successors: Dict[str, List[str]] = {
        function_id: cg.successors(function_id) for function_id in cg.node_ids()
    }
    for root in cg.node_ids():
        if colour[root] != white:
            continue
        path: List[str] = [root]
        stack: List[Tuple[str, int]] = [(root, 0)]
        colour[root] = grey
        while stack:
            node, next_index = stack[-1]
            children: List[str] = successors[node]
            if next_index < len(children):
                stack[-1] = (node, next_index + 1)
                child: str = children[next_index]
                if colour[child] == grey:
                    return path[path.index(child):] + [child]
                if colour[child] == white:
                    colour[child] = grey
                    path.append(child)
                    stack.append((child, 0))
            else:
                colour[node] = black
                path.pop()
                stack.pop()
    return None


def reachable_from(cg: CallGraph, entry: str) -> Set[str]:
    seen: Set[str] = {entry}
    frontier: List[str] = [entry]
    while frontier:
        node: str = frontier.pop()
        for child in cg.successors(node):
            if child not in seen:
                seen.add(child)
                frontier.append(child)
    return seen


def compute_static_bound(cg: CallGraph, entry: Optional[str] = None) -> int:
    """
    Worst-case stack use: the heaviest path from the entry node.

    Args:
        cg: Callgraph without cycles or indirect edges
        entry: Root node; defaults to the first node

    Returns:
        Max over all paths from ``entry`` of the summed frame sizes

    Raises:
        IndirectEdge: If any edge is indirect
        CyclicGraph: If the graph has a directed cycle
    """
    if cg.has_indirect_edge():
        raise IndirectEdge("static bound needs every call target to be known")
    cycle: Optional[List[str]] = find_cycle(cg)
    if cycle is not None:
        raise CyclicGraph(f"callgraph has a cycle: {' -> '.join(cycle)}")

    root: str = entry if entry is not None else cg.nodes[0].function_id
    frames: Dict[str, int] = cg.frame_table()
    heaviest: Dict[str, int] = {}
    # post-order over the DAG; each node's heaviest path is its frame plus its heaviest child
    stack: List[Tuple[str, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node in heaviest:
            continue
        children: List[str] = cg.successors(node)
        if expanded:
            heaviest[node] = frames[node] + max((heaviest[c] for c in children), default=0)
            continue
        stack.append((node, True))
        stack.extend((child, False) for child in children if child not in heaviest)
    return heaviest[root]


def classify_stack_mode(cg: CallGraph, cfg: HostConfig, entry: Optional[str] = None) -> StackMode:
    """
    Choose static bound or runtime checks for an extension.

    Raises:
        FrameTooLarge: If a frame exceeds the per-function limit
        BoundExceeded: If the static bound exceeds the stack threshold
    """
    check_frame_limits(cg, cfg)
    if cg.has_indirect_edge():
        logger.info("Indirect call in callgraph; stack is checked at runtime")
        return StackMode.runtime_checked()
    cycle: Optional[List[str]] = find_cycle(cg)
    if cycle is not None:
        logger.info(f"Recursion {' -> '.join(cycle)}; stack is checked at runtime")
        return StackMode.runtime_checked()
    total: int = compute_static_bound(cg, entry)
    if total > cfg.stack_threshold_bytes:
        raise BoundExceeded(total, cfg.stack_threshold_bytes)
    return StackMode.statically_bounded(total)


def load_extension(manifest: ExtensionManifest, entry: Entry, host: Host) -> ExtensionHandle:
    """
    Lint, classify and register an extension.

    Args:
        manifest: Extension manifest
        entry: Callable run by the dispatcher with a program context
        host: Host to load into

    Returns:
        Handle of the now dispatchable extension

    Raises:
        ManifestError: If the manifest is structurally invalid
        LintRejected: If it declares forbidden features
        FrameTooLarge: If a frame exceeds the per-function limit
        BoundExceeded: If the static bound exceeds the threshold
        DuplicateId: If the extension id is already loaded
        MapTypeMismatch: If a map id is already declared with another spec
    """
    manifest.validate()
    report: LintReport = lint_manifest(manifest)
    if not report.accepted:
        raise LintRejected(report)

    cg: CallGraph = manifest.callgraph
    stack_mode: StackMode = classify_stack_mode(cg, host.config, manifest.entry_symbol)
    unreachable: List[str] = sorted(set(cg.node_ids()) - reachable_from(cg, manifest.entry_symbol))
    if unreachable:
        logger.warning(f"{manifest.extension_id}: functions unreachable from entry: {unreachable}")

    with host.registry_lock:
        if manifest.extension_id in host.extensions:
            raise DuplicateId(f"extension {manifest.extension_id} is already loaded")
        for spec in manifest.declared_maps:
            existing = host.maps.get(spec.map_id)
            if existing is not None and existing.spec != spec:
                raise MapTypeMismatch(
                    f"map {spec.map_id} exists as {existing.spec}, redeclared as {spec}"
                )
        attached: List[str] = host.attach_maps(manifest.declared_maps, manifest.extension_id)
        register_statics(manifest.static_vars, host.statics)
        for var_id in manifest.static_vars:
            host.static_users.setdefault(var_id, []).append(manifest.extension_id)
        handle: ExtensionHandle = ExtensionHandle(
            extension_id=manifest.extension_id,
            program_kind=manifest.program_kind,
            stack_mode=stack_mode,
            entry=entry,
            entry_symbol=manifest.entry_symbol,
            attached_maps=tuple(attached),
            frame_table=cg.frame_table(),
            static_vars=tuple(manifest.static_vars),
        )
        host.extensions[manifest.extension_id] = handle

    if stack_mode.is_runtime_checked:
        mode: str = "runtime-checked"
    else:
        mode = f"statically bounded at {stack_mode.total_bytes} bytes"
    logger.info(f"Loaded {manifest.extension_id} ({manifest.program_kind.value}, {mode}, maps {attached})")
    return handle


def unload_extension(host: Host, extension_id: str, cascade: bool = False) -> List[str]:
    """
    Remove an extension, and with ``cascade`` every extension sharing a map with it.

    Affected extensions are quarantined first, then the host waits for workers
    still running them before storage is dropped.

    Returns:
        Removed extension ids in removal order

    Raises:
        UnknownExtension: If the extension is not loaded
    """
    with host.registry_lock:
        if extension_id not in host.extensions:
            raise UnknownExtension(f"extension {extension_id} is not loaded")
        removal: List[str] = host.sharing_component(extension_id) if cascade else [extension_id]
        for target in removal:
            host.quarantine(target)
        host.quiesce(removal)
        dropped: List[str] = []
        for target in removal:
            dropped.extend(host.detach(host.extensions[target]))
        host.removed_log.append(list(removal))
    logger.info(f"Unloaded {removal}; dropped maps {dropped}")
    return removal


def crash_stop(host: Host, extension_id: str) -> List[str]:
    """
    Cascade-unload a panicked extension after its dispatch returned.

    Returns an empty list if a concurrent crash-stop already removed it.
    """
    with host.registry_lock:
        if extension_id not in host.extensions:
            return []
        removal: List[str] = unload_extension(host, extension_id, cascade=True)
    logger.warning(f"Crash-stop of {extension_id} removed {removal}")
    return removal


# Manifest files


def _parse_edge(raw: Mapping[str, Any]) -> CallEdge:
    kind: EdgeKind = EdgeKind(raw.get("kind", EdgeKind.DIRECT.value))
    if "callees" in raw:
        callees: Tuple[str, ...] = tuple(raw["callees"] or ())
    elif "callee" in raw:
        callees = (raw["callee"],)
    else:
        callees = ()
    return CallEdge(caller=raw["caller"], callees=callees, kind=kind)


def manifest_from_dict(data: Mapping[str, Any]) -> ExtensionManifest:
    """
    Build a manifest from parsed YAML.

    Raises:
        ManifestError: If required keys are missing or values are malformed
    """
    try:
        graph: Mapping[str, Any] = data["callgraph"]
        nodes: Tuple[CallNode, ...] = tuple(
            CallNode(
                function_id=str(node["function_id"]),
                frame_bytes=node["frame_bytes"],
                calls_helper=bool(node.get("calls_helper", False)),
            )
            for node in graph["nodes"]
        )
        edges: Tuple[CallEdge, ...] = tuple(_parse_edge(edge) for edge in graph.get("edges") or ())
        maps: Tuple[MapSpec, ...] = tuple(
            MapSpec(
                map_id=str(spec["map_id"]),
                kind=MapKind(spec["kind"]),
                key_bytes=int(spec["key_bytes"]),
                value_bytes=int(spec["value_bytes"]),
                max_entries=int(spec["max_entries"]),
            )
            for spec in data.get("declared_maps") or ()
        )
        flags: FrozenSet[str] = frozenset(data.get("feature_flags") or ())
        manifest: ExtensionManifest = ExtensionManifest(
            extension_id=str(data["extension_id"]),
            program_kind=ProgramKind(data["program_kind"]),
            feature_flags=flags,
            callgraph=CallGraph(nodes=nodes, edges=edges),
            entry_symbol=str(data["entry_symbol"]),
            declared_maps=maps,
            static_vars=tuple(data.get("static_vars") or ()),
        )
    except KeyError as e:
        raise ManifestError(f"manifest is missing key {e}") from e
    except (TypeError, ValueError) as e:
        if isinstance(e, ManifestError):
            raise
        raise ManifestError(f"malformed manifest: {e}") from e
    manifest.validate()
    return manifest


def read_manifest(path: Path) -> ExtensionManifest:
    """
    Load a YAML manifest file.

    Raises:
        FileNotFoundError: If the file does not exist
        ManifestError: If the document is not a valid manifest
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        data: Any = yaml.safe_load(f)
    if not isinstance(data, Mapping):
        raise ManifestError(f"{path}: manifest must be a mapping")
    return manifest_from_dict(data)
