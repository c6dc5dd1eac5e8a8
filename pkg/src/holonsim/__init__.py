"""Deterministic multi-agent soundscape simulator.

Composer agents sing into unoccupied frequency bands, collectors keep the
recordings that diversify their archive, and disruptors capture, transform
and re-emit what they hear.  Every run is seeded end to end and can be
replayed bit for bit from its event log.
"""

from holonsim.environment import load_scenario, replay_run, run_scenario
from holonsim.telemetry import analyze_run

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "analyze_run",
    "load_scenario",
    "replay_run",
    "run_scenario",
]
