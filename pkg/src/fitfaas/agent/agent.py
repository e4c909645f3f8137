"""Endpoint controller: heartbeat, scaling decisions, and the block registry.

Only the controller mutates the block registry. Workers report ``idle``/``busy``/
``exit`` events through the provider's status queue.
"""

from __future__ import annotations

import logging
import queue
import threading
import time

from .. import errors
from ..coordinator.client import CoordinatorClient
from .config import EndpointConfig
from .providers import ACTIVE, DRAINING, TERMINATED, BlockState, Provider, make_provider
from .scaling import Action, ScalingSnapshot, scaling_decision

log = logging.getLogger(__name__)


class EndpointAgent:
    def __init__(self, cfg: EndpointConfig, client=None, provider: Provider | None = None, clock=time.monotonic):
        self.cfg = cfg
        self.client = client or CoordinatorClient(cfg.coordinator_url)
        self._provider = provider
        self.clock = clock
        self.blocks: dict[str, BlockState] = {}
        self.retired: list[BlockState] = []
        self._busy: dict[str, set] = {}
        self._idle_since: dict[str, float] = {}
        self._last_heartbeat = None
        self.last_action: Action | None = None

    @property
    def provider(self) -> Provider:
        if self._provider is None:
            self._provider = make_provider(self.cfg)
        return self._provider

    @property
    def endpoint_id(self):
        return self.cfg.endpoint_id

    def start(self) -> str:
        """Register (unless an endpoint id is configured) and send the first heartbeat."""
        if self.cfg.endpoint_id is None:
            eid = self.client.register_endpoint(self.cfg.name, self.cfg.description)
            self.cfg = self.cfg.replace(endpoint_id=eid)
        self.provider.cfg = self.cfg
        self._heartbeat(force=True)
        return self.cfg.endpoint_id

    # ---- accounting -----------------------------------------------------

    def capacity(self) -> int:
        return sum(b.workers_live for b in self.blocks.values() if b.status == ACTIVE)

    def _drain_status(self, now):
        q = self.provider.status_queue
        if q is None:
            return
        while True:
            try:
                block_id, index, event, _task = q.get_nowait()
            except (queue.Empty, EOFError, OSError):
                return
            busy = self._busy.get(block_id)
            if busy is None:
                continue
            if event == "busy":
                busy.add(index)
            else:
                busy.discard(index)
                if not busy:
                    self._idle_since[block_id] = now

    def _reconcile(self, now):
        for block_id, block in list(self.blocks.items()):
            block.workers_live = self.provider.live_workers(block_id)
            if block.workers_live == 0:
                log.warning("block %s has no live workers; dropping it", block_id)
                block.status = TERMINATED
                self._forget(block_id)

    def _forget(self, block_id):
        block = self.blocks.pop(block_id)
        self.retired.append(block)
        self._busy.pop(block_id, None)
        self._idle_since.pop(block_id, None)

    def snapshot(self, now) -> ScalingSnapshot:
        status = self.client.endpoint_status(self.cfg.endpoint_id)
        idle = tuple(
            (b, now - self._idle_since[b]) for b in self.blocks if not self._busy.get(b) and b in self._idle_since
        )
        return ScalingSnapshot(
            pending=int(status["pending"]),
            running=int(status["leased"]) + int(status["running"]),
            capacity=self.capacity(),
            active_blocks=len(self.blocks),
            idle_blocks=idle,
        )

    # ---- actions --------------------------------------------------------

    def _provision(self, k, now):
        for _ in range(k):
            if len(self.blocks) >= self.cfg.max_blocks:
                break
            try:
                block = self.provider.launch_block(self.cfg.nodes_per_block)
            except errors.ProviderFailure as exc:
                log.error("block launch failed: %s", exc)
                break
            self.blocks[block.block_id] = block
            self._busy[block.block_id] = set()
            self._idle_since[block.block_id] = now

    def _retire(self, block_ids):
        for block_id in block_ids:
            block = self.blocks.get(block_id)
            if block is None:
                continue
            block.status = DRAINING
            self.provider.terminate_block(block_id)
            block.status = TERMINATED
            block.workers_live = 0
            self._forget(block_id)

    def _heartbeat(self, force=False):
        now = self.clock()
        if force or self._last_heartbeat is None or now - self._last_heartbeat >= self.cfg.heartbeat_seconds:
            self.client.heartbeat(self.cfg.endpoint_id, self.capacity())
            self._last_heartbeat = now

    def tick(self) -> Action:
        """One controller iteration; returns the action taken."""
        now = self.clock()
        self._drain_status(now)
        self._reconcile(now)
        try:
            snap = self.snapshot(now)
        except errors.CoordinatorUnreachable as exc:
            log.warning("coordinator unreachable: %s", exc)
            return Action("hold")
        action = scaling_decision(snap, self.cfg)
        if action.kind == "provision":
            self._provision(action.count, now)
        elif action.kind == "retire":
            self._retire(action.block_ids)
        try:
            self._heartbeat()
        except errors.CoordinatorUnreachable as exc:
            log.warning("heartbeat failed: %s", exc)
        self.last_action = action
        return action

    def run(self, stop: threading.Event):
        """Register, then tick until ``stop`` is set; retire every block on the way out."""
        self.start()
        try:
            while not stop.is_set():
                try:
                    self.tick()
                except Exception:  # noqa: BLE001 - the controller outlives a bad tick
                    log.exception("controller tick failed")
                stop.wait(self.cfg.scaling_interval_seconds)
        finally:
            self.shutdown()

    def shutdown(self):
        self._retire(list(self.blocks))
        self.provider.shutdown()


class AgentThread:
    """Runs an :class:`EndpointAgent` in a background thread (tests, CLI helpers)."""

    def __init__(self, agent: EndpointAgent):
        self.agent = agent
        self.stop_event = threading.Event()
        self.thread = threading.Thread(target=self.agent.run, args=(self.stop_event,), name="agent", daemon=True)

    def start(self, timeout=10.0):
        self.thread.start()
        deadline = time.monotonic() + timeout
        while self.agent.cfg.endpoint_id is None and time.monotonic() < deadline:
            time.sleep(0.01)
        return self

    def stop(self, timeout=120.0):
        self.stop_event.set()
        self.thread.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
