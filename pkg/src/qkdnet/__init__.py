"""Desk-scale QKD network simulator.

Simulates a quantum-key-distribution network end to end: point-to-point
links producing identical key blocks at both endpoints, per-node key
management modules with multi-hop trusted-node relay, a logically
centralized controller with topology discovery and key-aware routing, a
message broker carrying all control-plane traffic, and application
simulators consuming keys over an ETSI-014-shaped HTTP interface.

Everything runs under a single virtual clock, so a run is a pure
function of (scenario, seed).
"""

__version__ = "0.1.0"

from .scenario import ScenarioConfig, load_scenario, parse_scenario
from .engine import Simulation, compare_delivery_modes

__all__ = [
    "ScenarioConfig",
    "Simulation",
    "compare_delivery_modes",
    "load_scenario",
    "parse_scenario",
]
