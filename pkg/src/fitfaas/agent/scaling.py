"""Block-based elastic scaling policy (pure)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import EndpointConfig


@dataclass(frozen=True)
class ScalingSnapshot:
    pending: int
    running: int
    capacity: int  # live worker slots, idle or busy
    active_blocks: int
    idle_blocks: tuple = ()  # ((block_id, idle_seconds), ...)

    def __post_init__(self):
        if min(self.pending, self.running, self.capacity, self.active_blocks) < 0:
            raise ValueError("snapshot counts must be non-negative")


@dataclass(frozen=True)
class Action:
    kind: str  # provision | retire | hold
    count: int = 0
    block_ids: tuple = ()


HOLD = Action("hold")


def target_capacity(demand: int, parallelism: float) -> int:
    # round away float noise first: 0.3 * 10 must give 3, not 4
    return math.ceil(round(parallelism * demand, 9))


def scaling_decision(s: ScalingSnapshot, cfg: EndpointConfig) -> Action:
    """Decide how many blocks to provision or retire.

    Provision ``ceil((target - capacity) / block_capacity)`` blocks, limited by
    ``max_blocks``, when capacity falls short of ``ceil(parallelism * demand)``.
    With no demand, retire blocks idle longer than the timeout.
    """
    demand = s.running + s.pending
    target = target_capacity(demand, cfg.parallelism)
    if s.capacity < target:
        k = min(math.ceil((target - s.capacity) / cfg.block_capacity), cfg.max_blocks - s.active_blocks)
        return Action("provision", k) if k > 0 else HOLD
    if demand == 0:
        stale = tuple(b for b, idle in s.idle_blocks if idle > cfg.idle_block_timeout_seconds)
        if stale:
            return Action("retire", len(stale), stale)
    return HOLD
