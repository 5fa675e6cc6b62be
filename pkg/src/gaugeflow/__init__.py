"""Gauge-transformation heat flow on the unit square and torus."""

from .domain import Grid, Topology, make_grid
from .flow import FlowConfig, FlowState, Status, run

__all__ = ["FlowConfig", "FlowState", "Grid", "Status", "Topology", "make_grid", "run"]
__version__ = "0.1.0"
