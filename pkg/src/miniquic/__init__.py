"""A small QUIC-style transport over UDP-like datagrams, plus a deterministic simulator."""

from __future__ import annotations

from .connection import Connection, ConnectionConfig, Endpoint
from .scenarios import Scenario, ScenarioResult, run_scenario, rtt_comparison
from .simnet import SimConfig, Simulator

__version__ = "0.1.0"

__all__ = [
    "Connection",
    "ConnectionConfig",
    "Endpoint",
    "Scenario",
    "ScenarioResult",
    "SimConfig",
    "Simulator",
    "run_scenario",
    "rtt_comparison",
    "__version__",
]
