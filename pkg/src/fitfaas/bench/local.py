"""A coordinator and one endpoint agent in this process, for desk-scale runs and tests."""

from __future__ import annotations

import time

from ..agent.agent import AgentThread, EndpointAgent
from ..agent.config import EndpointConfig
from ..coordinator.broker import Broker
from ..coordinator.client import CoordinatorClient
from ..coordinator.server import CoordinatorServer


class LocalStack:
    """Coordinator on a free loopback port plus an agent with the given block shape.

    Args:
        cfg: agent config; ``coordinator_url`` and ``endpoint_id`` are filled in.
        lease_ttl: broker lease time-to-live in seconds.
        warm: provision blocks up front (``max_blocks`` of them) instead of
            waiting for the first scaling tick after tasks arrive.
    """

    def __init__(self, cfg: EndpointConfig | None = None, lease_ttl=60.0, provider=None, warm=False):
        self.cfg = cfg or EndpointConfig()
        self.lease_ttl = lease_ttl
        self.provider = provider
        self.warm = warm
        self.server = None
        self.agent_thread = None
        self.client = None

    @property
    def endpoint_id(self):
        return self.agent_thread.agent.endpoint_id

    @property
    def agent(self) -> EndpointAgent:
        return self.agent_thread.agent

    def start(self) -> "LocalStack":
        self.server = CoordinatorServer(Broker(lease_ttl=self.lease_ttl, heartbeat_period=self.cfg.heartbeat_seconds)).start()
        self.client = CoordinatorClient(self.server.url)
        cfg = self.cfg.replace(coordinator_url=self.server.url, endpoint_id=None)
        agent = EndpointAgent(cfg, provider=self.provider)
        if self.warm:
            agent.start()  # run() sees the endpoint id and does not re-register
            agent._provision(cfg.max_blocks, agent.clock())
        self.agent_thread = AgentThread(agent).start()
        return self

    def wait_for_workers(self, n, timeout=30.0):
        """Block until ``n`` worker slots are live (warm stacks report immediately)."""
        deadline = time.monotonic() + timeout
        while self.agent.capacity() < n:
            if time.monotonic() > deadline:
                raise TimeoutError(f"only {self.agent.capacity()} of {n} workers live")
            time.sleep(0.02)

    def stop(self):
        if self.agent_thread is not None:
            self.agent_thread.stop()
        if self.server is not None:
            self.server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
