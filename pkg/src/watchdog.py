"""Per-worker watchdog timers implementing the tristate termination protocol.

A tick that finds a worker past its termination timeout either delivers a
forced unwind (extension code) or marks termination as requested (helper or
panic path), in which case the lane unwinds at helper exit. A forced unwind
that extension code swallows is delivered again one period later. Ticks and lanes
synchronize only through ``WorkerState.flag_lock``.
"""

import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from src.core_types import ExecFlag, WorkerState
from src.errors import AlreadyArmed, IllegalFlagTransition, NotArmed
from src.host import Host
from src.lane import deliver_async_unwind


logger: logging.Logger = logging.getLogger(__name__)

EVENT_LOG_CAPACITY: int = 65_536


class WatchdogAction(str, Enum):
    NONE = "none"
    FORCED_UNWIND = "forced-unwind"
    DEFERRED = "deferred"


@dataclass(frozen=True)
class WatchdogEvent:
    """A tick that acted; ``flag`` is the flag value the tick observed."""

    worker_id: int
    action: WatchdogAction
    flag: ExecFlag
    extension_id: Optional[str]
    timestamp_ns: int


def _tick(
    worker: WorkerState,
    now_ns: int,
    termination_timeout_ns: int,
    redeliver_after_ns: Optional[int] = None,
) -> Tuple[WatchdogAction, ExecFlag]:
    with worker.flag_lock:
        flag: ExecFlag = worker.exec_flag
        if worker.current_extension is None or flag is ExecFlag.IDLE:
            return WatchdogAction.NONE, flag
        if now_ns - worker.prog_start_ns <= termination_timeout_ns:
            return WatchdogAction.NONE, flag
        if flag is ExecFlag.EXTENSION_CODE:
            if worker.lane_thread is None:
                return WatchdogAction.NONE, flag
            if worker.unwind_pending:
                # still in extension code: the last unwind was swallowed
                if redeliver_after_ns is None or now_ns - worker.unwind_sent_ns < redeliver_after_ns:
                    return WatchdogAction.NONE, flag
            worker.unwind_pending = True
            if not deliver_async_unwind(worker.lane_thread):
                worker.unwind_pending = False
                return WatchdogAction.NONE, flag
            worker.unwind_sent_ns = now_ns
            return WatchdogAction.FORCED_UNWIND, flag
        if flag is ExecFlag.HELPER_OR_PANIC:
            worker.set_flag(ExecFlag.TERMINATION_REQUESTED)
            return WatchdogAction.DEFERRED, flag
        return WatchdogAction.NONE, flag


def watchdog_tick(
    worker: WorkerState,
    now_ns: int,
    termination_timeout_ns: int,
    redeliver_after_ns: Optional[int] = None,
) -> WatchdogAction:
    """
    One watchdog firing for one worker.

    Args:
        worker: Worker to inspect
        now_ns: Monotonic timestamp of the firing
        termination_timeout_ns: Allowed runtime per dispatch
        redeliver_after_ns: Deliver the forced unwind again if the lane is still
            in extension code this long after the last delivery; None never redelivers

    Returns:
        NONE if idle, within budget or already requested; FORCED_UNWIND if the
        lane was in extension code; DEFERRED if it was in a helper or the panic path
    """
    action, _ = _tick(worker, now_ns, termination_timeout_ns, redeliver_after_ns)
    return action


class WatchdogTimer:
    """Periodic timer bound to one worker, re-armed after every firing."""

    def __init__(
        self,
        worker: WorkerState,
        period_ns: int,
        termination_timeout_ns: int,
        events: Deque[WatchdogEvent],
    ) -> None:
        self.worker: WorkerState = worker
        self.period_ns: int = period_ns
        self.termination_timeout_ns: int = termination_timeout_ns
        self.armed_at: int = time.monotonic_ns()
        self.ticks: int = 0
        self.actions: Counter = Counter()
        self._events: Deque[WatchdogEvent] = events
        self._stop: threading.Event = threading.Event()
        self._thread: threading.Thread = threading.Thread(
            target=self._run, name=f"watchdog-{worker.worker_id}", daemon=True
        )

    @property
    def worker_id(self) -> int:
        return self.worker.worker_id

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join()

    def _run(self) -> None:
        period_s: float = self.period_ns / 1e9
        while not self._stop.wait(period_s):
            now: int = time.monotonic_ns()
            extension_id: Optional[str] = self.worker.current_extension
            try:
                action, flag = _tick(self.worker, now, self.termination_timeout_ns, self.period_ns)
            except IllegalFlagTransition as e:
                logger.critical(f"Watchdog {self.worker_id}: {e}")
                action, flag = WatchdogAction.NONE, self.worker.exec_flag
            self.ticks += 1
            self.actions[action] += 1
            if action is not WatchdogAction.NONE:
                self._events.append(
                    WatchdogEvent(self.worker_id, action, flag, extension_id, now)
                )
                logger.debug(f"Watchdog {self.worker_id}: {action.value} on {extension_id}")
            self.armed_at = time.monotonic_ns()


class WatchdogSet:
    """The armed timers of one host."""

    def __init__(self, host: Host, period_ns: int, termination_timeout_ns: int) -> None:
        self.period_ns: int = period_ns
        self.termination_timeout_ns: int = termination_timeout_ns
        self.events: Deque[WatchdogEvent] = deque(maxlen=EVENT_LOG_CAPACITY)
        self.timers: List[WatchdogTimer] = [
            WatchdogTimer(worker, period_ns, termination_timeout_ns, self.events)
            for worker in host.workers
        ]

    def action_counts(self) -> Dict[str, int]:
        totals: Counter = Counter()
        for timer in self.timers:
            totals.update(timer.actions)
        return {action.value: totals.get(action, 0) for action in WatchdogAction}


def arm_watchdogs(
    host: Host,
    period_ns: Optional[int] = None,
    termination_timeout_ns: Optional[int] = None,
) -> WatchdogSet:
    """
    Start one periodic timer per worker.

    Raises:
        AlreadyArmed: If the host's watchdogs are running
    """
    if host.watchdogs is not None:
        raise AlreadyArmed("watchdogs are already armed")
    period: int = period_ns if period_ns is not None else host.config.watchdog_period_ns
    timeout: int = (
        termination_timeout_ns
        if termination_timeout_ns is not None
        else host.config.termination_timeout_ns
    )
    if period <= 0 or timeout < period:
        raise ValueError("watchdog period must be positive and at most the termination timeout")
    watchdogs: WatchdogSet = WatchdogSet(host, period, timeout)
    for timer in watchdogs.timers:
        timer.start()
    host.watchdogs = watchdogs
    logger.info(
        f"Armed {len(watchdogs.timers)} watchdogs (period {period / 1e6:.1f} ms, "
        f"timeout {timeout / 1e6:.1f} ms)"
    )
    return watchdogs


def disarm_watchdogs(host: Host) -> WatchdogSet:
    """
    Stop every timer, waiting for in-flight ticks.

    Returns:
        The stopped set, for inspecting counters and events

    Raises:
        NotArmed: If no watchdogs are running
    """
    watchdogs: Optional[WatchdogSet] = host.watchdogs
    if watchdogs is None:
        raise NotArmed("watchdogs are not armed")
    for timer in watchdogs.timers:
        timer.stop()
    host.watchdogs = None
    logger.info(f"Disarmed watchdogs: {watchdogs.action_counts()}")
    return watchdogs
