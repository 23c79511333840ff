"""Deterministic mesoscopic traffic simulator with snapshot/resume."""

from .engine import (KERNEL, SensorFrame, SharedCounter, Simulator,
                     SimulatorSnapshot, kernel_name)
from .network import (MPH_TO_MS, DemandTable, Network, Route, Segment,
                      Sensor)
from .scenarios import (DemandModel, Scenario, build_congested_toy,
                        build_delay_toy, build_medium_grid)

__all__ = [
    "KERNEL", "kernel_name", "Simulator", "SimulatorSnapshot", "SensorFrame",
    "SharedCounter", "Network", "Segment", "Sensor", "Route", "DemandTable",
    "MPH_TO_MS", "DemandModel", "Scenario", "build_delay_toy",
    "build_congested_toy", "build_medium_grid",
]
