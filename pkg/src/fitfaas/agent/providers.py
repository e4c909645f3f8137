"""Execution providers: the seam between the scaling controller and real resources."""

from __future__ import annotations

import logging
import multiprocessing as mp
import time
import uuid
from dataclasses import dataclass, field

from .. import errors
from .config import EndpointConfig
from .worker import WorkerIdentity, process_main

log = logging.getLogger(__name__)

REQUESTED, ACTIVE, DRAINING, TERMINATED = "requested", "active", "draining", "terminated"


@dataclass
class BlockState:
    block_id: str
    nodes: int
    workers_live: int
    status: str
    launched_at: float
    workers_per_node: int = 1

    def __post_init__(self):
        if self.workers_live > self.nodes * self.workers_per_node:
            raise ValueError("workers_live exceeds nodes * workers_per_node")


class Provider:
    """Interface: ``launch_block``, ``terminate_block``, ``live_workers``, ``shutdown``."""

    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg
        self.status_queue = None

    def launch_block(self, n_nodes: int) -> BlockState:
        raise NotImplementedError

    def terminate_block(self, block_id: str) -> None:
        raise NotImplementedError

    def live_workers(self, block_id: str) -> int:
        raise NotImplementedError

    def shutdown(self):
        pass


@dataclass
class _LocalBlock:
    stop: object
    processes: list = field(default_factory=list)


class LocalProcessProvider(Provider):
    """Runs ``n_nodes * workers_per_node`` worker processes on this machine per block.

    Workers are started from a forkserver that has already imported the
    inference stack, so each worker starts in milliseconds.
    """

    def __init__(self, cfg: EndpointConfig, start_method="forkserver"):
        super().__init__(cfg)
        self.ctx = mp.get_context(start_method)
        if start_method == "forkserver":
            self.ctx.set_forkserver_preload(["fitfaas.agent.worker", "fitfaas.coordinator.client"])
        self.status_queue = self.ctx.Queue()
        self.blocks: dict[str, _LocalBlock] = {}

    def launch_block(self, n_nodes: int) -> BlockState:
        block_id = uuid.uuid4().hex[:12]
        stop = self.ctx.Event()
        block = _LocalBlock(stop)
        n_workers = n_nodes * self.cfg.workers_per_node
        try:
            for i in range(n_workers):
                proc = self.ctx.Process(
                    target=process_main,
                    args=(WorkerIdentity(block_id, i), self.cfg, stop, self.status_queue),
                    name=f"worker-{block_id}-{i}",
                    daemon=True,
                )
                proc.start()
                block.processes.append(proc)
        except Exception as exc:  # noqa: BLE001 - any spawn problem is a provider failure
            stop.set()
            for proc in block.processes:
                proc.terminate()
            raise errors.ProviderFailure(f"could not start worker process: {exc}") from exc
        self.blocks[block_id] = block
        return BlockState(block_id, n_nodes, n_workers, ACTIVE, time.time(), self.cfg.workers_per_node)

    def live_workers(self, block_id: str) -> int:
        block = self.blocks.get(block_id)
        return 0 if block is None else sum(p.is_alive() for p in block.processes)

    def processes(self, block_id: str) -> list:
        return list(self.blocks[block_id].processes)

    def terminate_block(self, block_id: str, grace: float = 60.0) -> None:
        """Ask workers to finish their in-flight task, then reap; force-kill after ``grace``."""
        block = self.blocks.pop(block_id, None)
        if block is None:
            return
        block.stop.set()
        deadline = time.monotonic() + grace
        for proc in block.processes:
            proc.join(max(0.0, deadline - time.monotonic()))
        for proc in block.processes:
            if proc.is_alive():
                log.warning("worker %s ignored shutdown; killing", proc.name)
                proc.kill()
                proc.join(5)

    def shutdown(self):
        for block_id in list(self.blocks):
            self.terminate_block(block_id)


class StubBatchProvider(Provider):
    """Records launches without spawning anything; stands in for a batch scheduler.

    Args:
        fail_launches: indices (0-based, counting every launch attempt) that raise ProviderFailure.
    """

    def __init__(self, cfg: EndpointConfig, fail_launches=()):
        super().__init__(cfg)
        self.fail_launches = set(fail_launches)
        self.attempts = 0
        self.launches: list[BlockState] = []
        self.terminated: list[str] = []
        self._live: dict[str, int] = {}

    def launch_block(self, n_nodes: int) -> BlockState:
        attempt = self.attempts
        self.attempts += 1
        if attempt in self.fail_launches:
            raise errors.ProviderFailure(f"scripted launch failure on attempt {attempt}")
        n_workers = n_nodes * self.cfg.workers_per_node
        state = BlockState(uuid.uuid4().hex[:12], n_nodes, n_workers, ACTIVE, time.time(), self.cfg.workers_per_node)
        self.launches.append(state)
        self._live[state.block_id] = n_workers
        return state

    def live_workers(self, block_id: str) -> int:
        return self._live.get(block_id, 0)

    def terminate_block(self, block_id: str) -> None:
        if self._live.pop(block_id, None) is not None:
            self.terminated.append(block_id)


def make_provider(cfg: EndpointConfig) -> Provider:
    if cfg.provider == "local_process":
        return LocalProcessProvider(cfg)
    return StubBatchProvider(cfg)
