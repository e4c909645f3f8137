"""Endpoint agent configuration: a JSON file with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

PROVIDERS = ("local_process", "stub_batch")


@dataclass(frozen=True)
class EndpointConfig:
    """Provisioning and loop knobs for one endpoint.

    A block is ``nodes_per_block`` nodes, each running ``workers_per_node``
    worker loops. ``parallelism`` is the target ratio of worker slots to
    outstanding (pending + running) tasks.
    """

    coordinator_url: str = "http://127.0.0.1:8765"
    name: str = "endpoint"
    description: str = ""
    endpoint_id: str | None = None
    max_blocks: int = 4
    nodes_per_block: int = 1
    workers_per_node: int = 8
    parallelism: float = 1.0
    provider: str = "local_process"
    heartbeat_seconds: float = 10.0
    lease_batch: int = 1
    idle_block_timeout_seconds: float = 30.0
    scaling_interval_seconds: float = 0.5
    idle_poll_seconds: float = 0.1
    lease_renew_seconds: float = 20.0

    def __post_init__(self):
        for key in ("max_blocks", "nodes_per_block", "workers_per_node", "lease_batch"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{key} must be a positive integer, got {value!r}")
        if not 0.0 < self.parallelism <= 1.0:
            raise ValueError(f"parallelism must be in (0, 1], got {self.parallelism}")
        for key in ("heartbeat_seconds", "scaling_interval_seconds", "idle_poll_seconds", "lease_renew_seconds"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.idle_block_timeout_seconds < 0:
            raise ValueError("idle_block_timeout_seconds must be non-negative")
        if self.provider not in PROVIDERS:
            raise ValueError(f"provider must be one of {PROVIDERS}, got {self.provider!r}")

    @property
    def block_capacity(self) -> int:
        return self.nodes_per_block * self.workers_per_node

    def replace(self, **changes) -> "EndpointConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path=None, **overrides) -> EndpointConfig:
    """Read a JSON config file, then apply non-None keyword overrides."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
        if not isinstance(values, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(EndpointConfig)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return EndpointConfig(**values)
