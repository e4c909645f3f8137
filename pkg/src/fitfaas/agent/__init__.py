"""Endpoint agent: configuration, scaling policy, providers, worker loop and controller."""

from .agent import AgentThread, EndpointAgent
from .config import EndpointConfig, load_config
from .functions import execute_function
from .providers import BlockState, LocalProcessProvider, StubBatchProvider
from .scaling import Action, ScalingSnapshot, scaling_decision

__all__ = [
    "Action",
    "AgentThread",
    "BlockState",
    "EndpointAgent",
    "EndpointConfig",
    "LocalProcessProvider",
    "ScalingSnapshot",
    "StubBatchProvider",
    "execute_function",
    "load_config",
    "scaling_decision",
]
