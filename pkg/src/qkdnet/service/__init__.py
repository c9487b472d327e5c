"""HTTP layer: per-node key-delivery APIs and the network service."""

from .kmm_api import make_kmm_app
from .app import make_network_app

__all__ = ["make_kmm_app", "make_network_app"]
