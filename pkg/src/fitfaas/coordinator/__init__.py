"""Task broker, its HTTP server, and the matching client."""

from .broker import CATALOG, Broker
from .client import CoordinatorClient
from .server import CoordinatorServer

__all__ = ["CATALOG", "Broker", "CoordinatorClient", "CoordinatorServer"]
