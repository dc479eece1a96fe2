"""Exception hierarchy for the kernel extension host.

Two families live here:

- ``HostError`` subclasses are ordinary errors reported to whoever drives the
  host (loader, CLI, tests).
- ``ExtensionPanic`` and ``ForcedUnwind`` are control-transfer signals that
  unwind extension code back to the dispatcher. They derive from
  ``BaseException`` so that ``except Exception`` in an extension cannot
  swallow them.
"""

from typing import Any, List, Optional


class HostError(Exception):
    """Base class for every error the host reports."""


class ManifestError(HostError, ValueError):
    """A manifest is structurally invalid."""


class LintRejected(HostError, ValueError):
    """A manifest declared forbidden features."""

    def __init__(self, report: Any) -> None:
        self.report = report
        features: List[str] = [v.feature for v in report.violations]
        super().__init__(f"extension uses forbidden features: {', '.join(features)}")


class FrameTooLarge(HostError, ValueError):
    """A callgraph node exceeds the per-function frame limit."""

    def __init__(self, function_id: str, frame_bytes: int, limit: int) -> None:
        self.function_id = function_id
        self.frame_bytes = frame_bytes
        self.limit = limit
        super().__init__(
            f"function {function_id} uses {frame_bytes} bytes of stack (limit {limit})"
        )


class BoundExceeded(HostError, ValueError):
    """A statically bounded extension needs more stack than the threshold."""

    def __init__(self, total_bytes: int, limit: int) -> None:
        self.total_bytes = total_bytes
        self.limit = limit
        super().__init__(f"static stack bound {total_bytes} exceeds threshold {limit}")


class CyclicGraph(HostError, ValueError):
    """A static bound was requested for a callgraph with a cycle."""


class IndirectEdge(HostError, ValueError):
    """A static bound was requested for a callgraph with an indirect call."""


class DuplicateId(HostError, ValueError):
    """An extension id is already loaded."""


class MapTypeMismatch(HostError, ValueError):
    """A map id is redeclared with a different spec."""


class UnknownExtension(HostError, KeyError):
    """No dispatchable extension with this id."""


class WorkerBusy(HostError):
    """A dispatch was attempted on a worker that is already running one."""


class IllegalFlagTransition(HostError, AssertionError):
    """The tristate flag was moved along an edge the protocol forbids."""


class PopMismatch(HostError, AssertionError):
    """A cleanup record was popped out of LIFO order."""


class HostFault(HostError):
    """A foreign exception escaped extension code; the host aborts the dispatch loudly."""


class StormInvariantBreach(HostError):
    """The panic-storm audit found a leaked resource or a lost request."""


class AlreadyArmed(HostError):
    """Watchdogs are already armed on this host."""


class NotArmed(HostError):
    """Watchdogs are not armed on this host."""


class LayoutRejected(HostError, ValueError):
    """A type descriptor is not a gap-free all-scalar layout."""


class HelperError(HostError):
    """Recoverable error returned by a helper; an extension may handle it."""


class MapFull(HelperError):
    """A hash map is at max_entries and the key is new."""


class MapKeyOutOfRange(HelperError):
    """An array map update names an index past max_entries."""


class UnknownVar(HelperError, KeyError):
    """A static variable was not registered at load."""


class ExtensionPanic(BaseException):
    """Panic signal raised by a safety check or by extension code.

    Args:
        reason: PanicReason member
        message: Human-readable detail for the ring buffer
    """

    def __init__(self, reason: Any, message: str = "") -> None:
        super().__init__(f"{reason.value}: {message}")
        self.reason = reason
        self.message = message


class ForcedUnwind(BaseException):
    """Delivered asynchronously by the watchdog into a lane running extension code."""


def describe(error: Optional[BaseException]) -> str:
    """One-line description used by the CLI and log messages."""
    if error is None:
        return ""
    return f"{type(error).__name__}: {error}"
