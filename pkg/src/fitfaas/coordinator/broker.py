"""In-memory task broker: function and endpoint registries, per-endpoint FIFO queues, leases.

Every mutation is expressed as an event dict and applied by :meth:`Broker._apply`,
so the optional append-only journal replays to the same state after a restart.
A single re-entrant lock serializes all operations.
"""

from __future__ import annotations

import heapq
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

from .. import errors

CATALOG = ("hypotest_workspace", "fit_workspace", "echo")
CATALOG_VERSION = "1"
PAYLOAD_LIMIT = 8 * 1024 * 1024
DEFAULT_LEASE_TTL = 60.0
DEFAULT_HEARTBEAT = 10.0
MISSED_HEARTBEATS = 3

PENDING, LEASED, RUNNING, SUCCESS, FAILED = "pending", "leased", "running", "success", "failed"
TERMINAL = (SUCCESS, FAILED)


@dataclass
class FunctionRecord:
    function_id: str
    name: str
    catalog_version: str
    registered_at: float


@dataclass
class EndpointRecord:
    endpoint_id: str
    name: str
    description: str
    registered_at: float
    last_heartbeat: float | None = None
    reported_capacity: int = 0


@dataclass
class TaskRecord:
    task_id: str
    function_id: str
    function: str
    endpoint_id: str
    payload: object
    seq: int
    created: float
    updated: float
    status: str = PENDING
    result: object = None
    error: dict | None = None
    lease_id: str | None = None
    lease_expiry: float | None = None
    n_leases: int = 0

    def public(self) -> dict:
        out = {"task_id": self.task_id, "status": self.status}
        if self.status == SUCCESS:
            out["result"] = self.result
        elif self.status == FAILED:
            out["error"] = self.error
        return out


def _payload_size(payload) -> int:
    return len(json.dumps(payload, separators=(",", ":"), allow_nan=False).encode("utf-8"))


def _new_id() -> str:
    return uuid.uuid4().hex


@dataclass
class _Queue:
    heap: list = field(default_factory=list)
    pending: set = field(default_factory=set)


class Broker:
    """Thread-safe broker state.

    Args:
        lease_ttl: seconds a lease stays valid without renewal.
        heartbeat_period: expected agent heartbeat interval; an endpoint silent
            for more than three periods is listed as offline.
        clock: callable returning seconds; wall-clock by default so journaled
            expiries survive a restart.
        journal: optional path of an append-only JSONL event log. Existing
            events are replayed on construction.
    """

    def __init__(self, lease_ttl=DEFAULT_LEASE_TTL, heartbeat_period=DEFAULT_HEARTBEAT, clock=time.time, journal=None):
        if lease_ttl <= 0 or heartbeat_period <= 0:
            raise ValueError("lease_ttl and heartbeat_period must be positive")
        self.lease_ttl = float(lease_ttl)
        self.heartbeat_period = float(heartbeat_period)
        self.clock = clock
        self._lock = threading.RLock()
        self.functions: dict[str, FunctionRecord] = {}
        self.endpoints: dict[str, EndpointRecord] = {}
        self.tasks: dict[str, TaskRecord] = {}
        self._queues: dict[str, _Queue] = {}
        self._inflight: set[str] = set()
        self._seq = 0
        self._journal_path = journal
        self._journal = None
        if journal:
            self._replay(journal)
            self._journal = open(journal, "a", encoding="utf-8")

    # ---- event sourcing -------------------------------------------------

    def _replay(self, path):
        if not os.path.exists(path):
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    event = json.loads(line)
                except json.JSONDecodeError:
                    break  # torn final write
                self._apply(event)

    def _emit(self, event: dict):
        self._apply(event)
        if self._journal is not None:
            self._journal.write(json.dumps(event, separators=(",", ":")) + "\n")
            self._journal.flush()

    def _apply(self, ev: dict):
        kind = ev["e"]
        at = ev["at"]
        if kind == "function":
            self.functions[ev["function_id"]] = FunctionRecord(ev["function_id"], ev["name"], CATALOG_VERSION, at)
        elif kind == "endpoint":
            self.endpoints[ev["endpoint_id"]] = EndpointRecord(ev["endpoint_id"], ev["name"], ev["description"], at)
            self._queues[ev["endpoint_id"]] = _Queue()
        elif kind == "submit":
            name = self.functions[ev["function_id"]].name
            queue = self._queues[ev["endpoint_id"]]
            for task_id, payload in zip(ev["task_ids"], ev["payloads"]):
                self._seq += 1
                rec = TaskRecord(task_id, ev["function_id"], name, ev["endpoint_id"], payload, self._seq, at, at)
                self.tasks[task_id] = rec
                heapq.heappush(queue.heap, (rec.seq, task_id))
                queue.pending.add(task_id)
        elif kind == "lease":
            for task_id, lease_id in zip(ev["task_ids"], ev["lease_ids"]):
                rec = self.tasks[task_id]
                self._queues[rec.endpoint_id].pending.discard(task_id)
                rec.status = LEASED
                rec.lease_id = lease_id
                rec.lease_expiry = ev["expiry"]
                rec.n_leases += 1
                rec.updated = at
                self._inflight.add(task_id)
        elif kind == "running":
            rec = self.tasks[ev["task_id"]]
            rec.status = RUNNING
            rec.lease_expiry = ev["expiry"]
            rec.updated = at
        elif kind == "expire":
            for task_id in ev["task_ids"]:
                rec = self.tasks[task_id]
                rec.status = PENDING
                rec.lease_expiry = None
                rec.updated = at
                self._inflight.discard(task_id)
                queue = self._queues[rec.endpoint_id]
                heapq.heappush(queue.heap, (rec.seq, task_id))
                queue.pending.add(task_id)
        elif kind == "result":
            rec = self.tasks[ev["task_id"]]
            rec.status = ev["status"]
            rec.result = ev.get("result")
            rec.error = ev.get("error")
            rec.lease_expiry = None
            rec.updated = at
            self._inflight.discard(rec.task_id)
            self._queues[rec.endpoint_id].pending.discard(rec.task_id)
        else:  # pragma: no cover - journal written by this class only
            raise ValueError(f"unknown journal event {kind!r}")

    def close(self):
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None

    # ---- helpers --------------------------------------------------------

    def _expire(self, now):
        due = sorted(
            (t for t in self._inflight if self.tasks[t].lease_expiry is not None and self.tasks[t].lease_expiry <= now),
            key=lambda t: self.tasks[t].seq,
        )
        if due:
            self._emit({"e": "expire", "task_ids": due, "at": now})

    def _endpoint(self, endpoint_id) -> EndpointRecord:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise errors.UnknownEndpoint(f"no endpoint {endpoint_id!r}") from None

    def _task(self, task_id) -> TaskRecord:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise errors.UnknownTask(f"no task {task_id!r}") from None

    # ---- registries -----------------------------------------------------

    def register_function(self, name: str) -> str:
        if name not in CATALOG:
            raise errors.UnknownFunction(f"{name!r} is not in the catalog {list(CATALOG)}")
        with self._lock:
            function_id = _new_id()
            self._emit({"e": "function", "function_id": function_id, "name": name, "at": self.clock()})
            return function_id

    def register_endpoint(self, name: str, description: str = "") -> str:
        with self._lock:
            endpoint_id = _new_id()
            self._emit(
                {"e": "endpoint", "endpoint_id": endpoint_id, "name": name, "description": description, "at": self.clock()}
            )
            return endpoint_id

    def heartbeat(self, endpoint_id: str, capacity: int = 0) -> None:
        # heartbeats are volatile and deliberately not journaled
        with self._lock:
            ep = self._endpoint(endpoint_id)
            ep.last_heartbeat = self.clock()
            ep.reported_capacity = int(capacity)

    def _endpoint_view(self, ep: EndpointRecord, now) -> dict:
        online = ep.last_heartbeat is not None and now - ep.last_heartbeat <= MISSED_HEARTBEATS * self.heartbeat_period
        return {
            "endpoint_id": ep.endpoint_id,
            "name": ep.name,
            "description": ep.description,
            "last_heartbeat": ep.last_heartbeat,
            "reported_capacity": ep.reported_capacity,
            "status": "online" if online else "offline",
        }

    def list_endpoints(self) -> list[dict]:
        """Endpoints that have sent at least one heartbeat, with online/offline status."""
        with self._lock:
            now = self.clock()
            return [self._endpoint_view(ep, now) for ep in self.endpoints.values() if ep.last_heartbeat is not None]

    def endpoint_status(self, endpoint_id: str) -> dict:
        """Listing entry plus queue counts (pending/leased/running) for the scaling controller."""
        with self._lock:
            now = self.clock()
            self._expire(now)
            ep = self._endpoint(endpoint_id)
            counts = {PENDING: 0, LEASED: 0, RUNNING: 0}
            counts[PENDING] = len(self._queues[endpoint_id].pending)
            for task_id in self._inflight:
                rec = self.tasks[task_id]
                if rec.endpoint_id == endpoint_id:
                    counts[rec.status] += 1
            return {**self._endpoint_view(ep, now), **counts}

    # ---- tasks ----------------------------------------------------------

    def submit_tasks(self, function_id: str, endpoint_id: str, payloads: list) -> list[str]:
        """Queue one pending task per payload. All-or-nothing."""
        payloads = list(payloads)
        for i, payload in enumerate(payloads):
            try:
                size = _payload_size(payload)
            except (TypeError, ValueError) as exc:
                raise errors.BadRequest(f"payload {i} is not JSON-serializable: {exc}") from None
            if size > PAYLOAD_LIMIT:
                raise errors.PayloadTooLarge(f"payload {i} is {size} bytes; limit is {PAYLOAD_LIMIT}")
        with self._lock:
            if function_id not in self.functions:
                raise errors.UnknownFunction(f"no function {function_id!r}")
            self._endpoint(endpoint_id)
            if not payloads:
                return []
            task_ids = [_new_id() for _ in payloads]
            self._emit(
                {
                    "e": "submit",
                    "function_id": function_id,
                    "endpoint_id": endpoint_id,
                    "task_ids": task_ids,
                    "payloads": payloads,
                    "at": self.clock(),
                }
            )
            return task_ids

    def poll_result(self, task_id: str) -> dict:
        with self._lock:
            self._expire(self.clock())
            return self._task(task_id).public()

    def lease_tasks(self, endpoint_id: str, max_n: int) -> list[dict]:
        """Lease up to ``max_n`` of the oldest pending tasks bound to ``endpoint_id``."""
        with self._lock:
            now = self.clock()
            self._expire(now)
            self._endpoint(endpoint_id)
            queue = self._queues[endpoint_id]
            picked = []
            while queue.heap and len(picked) < max_n:
                _, task_id = heapq.heappop(queue.heap)
                if task_id in queue.pending and task_id not in picked:
                    picked.append(task_id)
            if not picked:
                return []
            lease_ids = [_new_id() for _ in picked]
            self._emit(
                {"e": "lease", "task_ids": picked, "lease_ids": lease_ids, "expiry": now + self.lease_ttl, "at": now}
            )
            return [
                {
                    "task_id": t,
                    "function": self.tasks[t].function,
                    "payload": self.tasks[t].payload,
                    "lease_id": lid,
                }
                for t, lid in zip(picked, lease_ids)
            ]

    def _check_holder(self, rec: TaskRecord, lease_id):
        if lease_id is not None and lease_id != rec.lease_id:
            raise errors.StaleLease(f"task {rec.task_id} lease {lease_id} was superseded")

    def mark_running(self, task_id: str, lease_id: str | None = None) -> dict:
        """Move a leased task to running and renew its lease; renews again if already running."""
        with self._lock:
            now = self.clock()
            self._expire(now)
            rec = self._task(task_id)
            if rec.status in TERMINAL:
                return {"status": rec.status}
            self._check_holder(rec, lease_id)
            if rec.status == PENDING:
                raise errors.StaleLease(f"task {task_id} lease expired")
            self._emit({"e": "running", "task_id": task_id, "expiry": now + self.lease_ttl, "at": now})
            return {"status": rec.status, "lease_expiry": rec.lease_expiry}

    def post_result(self, task_id: str, result=None, error: dict | None = None, lease_id: str | None = None) -> str:
        """Record a terminal outcome exactly once; later posts return the recorded status.

        Exactly one of ``result`` (success) or ``error`` (failure report) is used;
        ``error`` wins when both are given. A post whose lease was superseded by a
        later lease raises StaleLease. A post after expiry but before any re-lease
        is accepted, since no other holder exists.
        """
        if error is not None:
            error = {
                "code": str(error.get("code", "InternalError")),
                "message": str(error.get("message", "")),
                "retriable": bool(error.get("retriable", False)),
            }
        else:
            try:
                _payload_size(result)
            except (TypeError, ValueError) as exc:
                raise errors.BadRequest(f"result is not JSON-serializable: {exc}") from None
        with self._lock:
            now = self.clock()
            self._expire(now)
            rec = self._task(task_id)
            if rec.status in TERMINAL:
                return rec.status
            if rec.n_leases == 0:
                raise errors.StaleLease(f"task {task_id} was never leased")
            self._check_holder(rec, lease_id)
            event = {"e": "result", "task_id": task_id, "at": now}
            if error is not None:
                event.update(status=FAILED, error=error)
            else:
                event.update(status=SUCCESS, result=result)
            self._emit(event)
            return rec.status

    def snapshot(self) -> dict:
        """Counts of tasks by status, for diagnostics."""
        with self._lock:
            self._expire(self.clock())
            counts: dict[str, int] = {}
            for rec in self.tasks.values():
                counts[rec.status] = counts.get(rec.status, 0) + 1
            return counts
