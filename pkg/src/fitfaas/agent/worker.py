"""Worker loop: lease, mark running, execute, report; back off while the coordinator is away."""

from __future__ import annotations

import logging
import signal
import threading
from dataclasses import dataclass

from .. import errors
from .functions import error_report, execute_function

log = logging.getLogger(__name__)

BACKOFF_BASE = 0.5
BACKOFF_CAP = 30.0


@dataclass(frozen=True)
class WorkerIdentity:
    block_id: str
    index: int

    def __str__(self):
        return f"{self.block_id}/{self.index}"


def backoff_delay(attempt: int, base=BACKOFF_BASE, cap=BACKOFF_CAP) -> float:
    """Delay before retry number ``attempt`` (0-based): base * 2**attempt, capped."""
    return min(cap, base * 2.0 ** min(attempt, 64))


class _LeaseKeeper:
    """Renews a task lease in the background while it executes."""

    def __init__(self, client, task_id, lease_id, period):
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._run, args=(client, task_id, lease_id, period), name=f"renew-{task_id[:8]}", daemon=True
        )

    def _run(self, client, task_id, lease_id, period):
        while not self._stop.wait(period):
            try:
                client.mark_running(task_id, lease_id)
            except errors.StaleLease:
                return
            except errors.FitFaaSError as exc:
                log.warning("lease renewal for %s failed: %s", task_id, exc)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()


def _report(status, identity, event, task_id=None):
    if status is not None:
        try:
            status.put((identity.block_id, identity.index, event, task_id))
        except Exception:  # noqa: BLE001 - the controller may be gone during shutdown
            pass


def _post(client, task, outcome, stop, sleep_event):
    """Post an outcome, retrying through outages until it lands or shutdown is requested."""
    attempt = 0
    while True:
        try:
            if "error" in outcome:
                client.post_result(task["task_id"], error=outcome["error"], lease_id=task.get("lease_id"))
            else:
                client.post_result(task["task_id"], result=outcome["result"], lease_id=task.get("lease_id"))
            return True
        except errors.StaleLease:
            log.info("result for %s discarded: lease superseded", task["task_id"])
            return False
        except errors.CoordinatorUnreachable:
            if stop.is_set() and attempt >= 3:
                return False
            sleep_event.wait(backoff_delay(attempt))
            attempt += 1


def run_task(client, task, renew_seconds, execute=execute_function):
    """Mark running, execute under a lease keeper, and return the outcome dict."""
    client.mark_running(task["task_id"], task.get("lease_id"))
    with _LeaseKeeper(client, task["task_id"], task.get("lease_id"), renew_seconds):
        try:
            return {"result": execute(task["function"], task["payload"])}
        except Exception as exc:  # noqa: BLE001 - every task failure becomes a report
            return {"error": error_report(exc)}


def worker_loop(identity, cfg, client, stop, status=None, execute=execute_function):
    """Serve tasks for ``cfg.endpoint_id`` until ``stop`` is set.

    Args:
        identity: :class:`WorkerIdentity` used in status messages.
        cfg: :class:`EndpointConfig` with ``endpoint_id`` filled in.
        client: coordinator client.
        stop: event-like object; once set, the in-flight task finishes and the loop exits.
        status: optional queue receiving ``(block_id, index, event, task_id)`` tuples,
            ``event`` one of ``idle``, ``busy``, ``exit``.
    """
    pause = threading.Event()  # never set; interruptible sleeps
    attempt = 0
    _report(status, identity, "idle")
    try:
        while not stop.is_set():
            try:
                tasks = client.lease_tasks(cfg.endpoint_id, cfg.lease_batch)
                attempt = 0
            except errors.CoordinatorUnreachable:
                delay = backoff_delay(attempt)
                attempt += 1
                log.warning("%s: coordinator unreachable, retrying in %.1fs", identity, delay)
                _wait(stop, pause, delay)
                continue
            except errors.FitFaaSError as exc:
                log.error("%s: lease failed: %s", identity, exc)
                _wait(stop, pause, backoff_delay(attempt))
                attempt += 1
                continue
            if not tasks:
                _wait(stop, pause, cfg.idle_poll_seconds)
                continue
            for task in tasks:
                if stop.is_set():
                    break  # unstarted leases expire back to pending
                _report(status, identity, "busy", task["task_id"])
                try:
                    outcome = run_task(client, task, cfg.lease_renew_seconds, execute)
                except errors.StaleLease:
                    _report(status, identity, "idle")
                    continue
                except errors.CoordinatorUnreachable:
                    _report(status, identity, "idle")
                    break
                _post(client, task, outcome, stop, pause)
                _report(status, identity, "idle")
    finally:
        _report(status, identity, "exit")


def _wait(stop, pause, seconds):
    # poll the stop flag so multiprocessing events also interrupt promptly
    step = min(seconds, 0.1)
    waited = 0.0
    while waited < seconds and not stop.is_set():
        pause.wait(step)
        waited += step


class _Either:
    def __init__(self, *events):
        self.events = events

    def is_set(self):
        return any(e.is_set() for e in self.events)


def process_main(identity, cfg, stop, status):
    """Entry point of a worker process.

    ``stop`` is the block-wide shutdown event; SIGTERM stops only this worker.
    Both let the in-flight task finish.
    """
    from ..coordinator.client import CoordinatorClient

    logging.basicConfig(level=logging.WARNING)
    local = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: local.set())
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    worker_loop(identity, cfg, CoordinatorClient(cfg.coordinator_url), _Either(stop, local), status)
