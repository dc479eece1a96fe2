"""Worker-lane protocol shared by the dispatcher, the helpers and the watchdog.

The watchdog and a lane only ever meet through ``WorkerState.flag_lock``:
the watchdog decides and delivers a forced unwind while holding it, and the
lane leaves extension code (helper entry, dispatcher epilogue) while holding
it. A pending asynchronous unwind therefore only exists while the flag reads
EXTENSION_CODE.
"""

import ctypes
import functools
import logging
from typing import Any, Callable, NoReturn, Tuple, TypeVar

from src.core_types import ExecFlag, PanicReason, WorkerState
from src.errors import ExtensionPanic, ForcedUnwind, HelperError, IllegalFlagTransition


logger: logging.Logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

_set_async_exc = ctypes.pythonapi.PyThreadState_SetAsyncExc


def deliver_async_unwind(thread_ident: int) -> bool:
    """
    Schedule ``ForcedUnwind`` in another thread at its next bytecode boundary.

    Args:
        thread_ident: ``threading.get_ident()`` of the target lane

    Returns:
        True if exactly one thread state was modified
    """
    modified: int = _set_async_exc(ctypes.c_ulong(thread_ident), ctypes.py_object(ForcedUnwind))
    if modified > 1:
        _set_async_exc(ctypes.c_ulong(thread_ident), None)
        logger.critical(f"async unwind hit {modified} thread states; revoked")
        return False
    return modified == 1


def cancel_async_unwind(thread_ident: int) -> None:
    """Revoke a scheduled ``ForcedUnwind`` that has not fired yet."""
    # a NULL exception clears the pending one
    _set_async_exc(ctypes.c_ulong(thread_ident), None)


def raise_panic(worker: WorkerState, reason: PanicReason, message: str) -> NoReturn:
    """
    Raise a framework panic on a worker.

    The panic is noted on the worker first so that the dispatcher still takes
    the panic path if extension code swallows the signal.

    Raises:
        ExtensionPanic: always
    """
    panic: ExtensionPanic = ExtensionPanic(reason, message)
    if worker is not None and worker.pending_panic is None:
        worker.pending_panic = panic
        worker.stack_at_last_panic = worker.shadow_stack_usage
    raise panic


_EXTENSION_CODE: ExecFlag = ExecFlag.EXTENSION_CODE
_HELPER_OR_PANIC: ExecFlag = ExecFlag.HELPER_OR_PANIC
_ENTER_EDGE: Tuple[ExecFlag, ExecFlag] = (_EXTENSION_CODE, _HELPER_OR_PANIC)
_EXIT_EDGE: Tuple[ExecFlag, ExecFlag] = (_HELPER_OR_PANIC, _EXTENSION_CODE)


def helper_enter(worker: WorkerState) -> ExecFlag:
    """
    Enter a helper: flag EXTENSION_CODE -> HELPER_OR_PANIC.

    If the watchdog already scheduled a forced unwind, the lane is still in
    extension code; the scheduled signal is revoked and raised here instead so
    that it can never fire inside the helper.

    Returns:
        The flag value before entry

    Raises:
        ForcedUnwind: If termination was already delivered to this lane
        IllegalFlagTransition: If no extension is running on the worker
    """
    with worker.flag_lock:
        previous: ExecFlag = worker.exec_flag
        if worker.unwind_pending:
            cancel_async_unwind(worker.lane_thread)
            raise ForcedUnwind()
        if previous is not _EXTENSION_CODE:
            raise IllegalFlagTransition(
                f"worker {worker.worker_id}: helper entered with flag {previous.name}"
            )
        # edge is legal; set_flag is bypassed on this path
        worker.exec_flag = _HELPER_OR_PANIC
        worker.flag_trace.append(_ENTER_EDGE)
    return previous


def helper_exit(worker: WorkerState) -> None:
    """
    Leave a helper: HELPER_OR_PANIC -> EXTENSION_CODE, or unwind if termination
    was requested while the helper ran.

    Raises:
        ExtensionPanic: Terminated, if the watchdog requested termination
        IllegalFlagTransition: If the worker is not inside a helper
    """
    with worker.flag_lock:
        flag: ExecFlag = worker.exec_flag
        if flag is _HELPER_OR_PANIC:
            worker.exec_flag = _EXTENSION_CODE
            worker.flag_trace.append(_EXIT_EDGE)
            return
        if flag is not ExecFlag.TERMINATION_REQUESTED:
            raise IllegalFlagTransition(
                f"worker {worker.worker_id}: helper exit with flag {flag.name}"
            )
    raise_panic(worker, PanicReason.TERMINATED, "termination requested during helper")


def helper(func: F) -> F:
    """
    Wrap a helper whose first argument is the calling worker.

    Panics raised inside the helper propagate with the flag left at
    HELPER_OR_PANIC (the panic path takes over). Recoverable helper errors
    leave the helper properly before propagating.
    """

    @functools.wraps(func)
    def wrapper(worker: WorkerState, *args: Any, **kwargs: Any) -> Any:
        helper_enter(worker)
        try:
            result: Any = func(worker, *args, **kwargs)
        except HelperError:
            helper_exit(worker)
            raise
        helper_exit(worker)
        return result

    return wrapper  # type: ignore[return-value]
