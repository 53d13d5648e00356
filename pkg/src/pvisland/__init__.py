"""Islanded PV microgrid simulator: droop-sharing inverters with central
voltage-quality compensation, unbalanced and nonlinear loads."""

from .errors import (
    AnalysisError,
    ConfigurationError,
    FrameError,
    PvIslandError,
    SimulationDivergence,
)

__all__ = [
    "AnalysisError",
    "ConfigurationError",
    "FrameError",
    "PvIslandError",
    "SimulationDivergence",
]

__version__ = "0.1.0"
