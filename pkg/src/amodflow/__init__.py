"""Congestion-aware routing and rebalancing of autonomous mobility-on-demand
fleets in mixed traffic."""

__version__ = "0.1.0"

from .netcore import NetworkError, ODPair, SuperGraph, build_supergraph  # noqa: E402,F401
from .sysopt import AmodProblem, solve_amod  # noqa: E402,F401


def data_path(name: str):
    """Path to a bundled example network, e.g. ``data_path("grid4.json")``."""
    from importlib.resources import files
    return files("amodflow") / "data" / name
