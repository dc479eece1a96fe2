"""Shared fixtures for the host tests."""

import threading
from contextlib import contextmanager
from typing import Callable, ContextManager, Iterator

import pytest

from src.core_types import ExecFlag, HostConfig, WorkerState
from src.host import Host
from src.watchdog import disarm_watchdogs


@pytest.fixture
def config() -> HostConfig:
    return HostConfig(num_workers=2)


@pytest.fixture
def host(config: HostConfig) -> Iterator[Host]:
    host = Host(config)
    yield host
    if host.watchdogs is not None:
        disarm_watchdogs(host)


@pytest.fixture
def worker(host: Host) -> WorkerState:
    return host.workers[0]


@contextmanager
def _extension_scope(worker: WorkerState, extension_id: str = "test") -> Iterator[WorkerState]:
    """Put a worker in extension code on the calling thread without a dispatch."""
    with worker.flag_lock:
        worker.current_extension = extension_id
        worker.lane_thread = threading.get_ident()
        worker.set_flag(ExecFlag.EXTENSION_CODE)
    try:
        yield worker
    finally:
        with worker.flag_lock:
            worker.exec_flag = ExecFlag.IDLE
            worker.current_extension = None
            worker.lane_thread = None
            worker.unwind_pending = False
            worker.unwind_sent_ns = 0
        worker.pending_panic = None


@pytest.fixture
def extension_scope() -> Callable[..., ContextManager[WorkerState]]:
    return _extension_scope
