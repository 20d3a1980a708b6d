"""Rain-aware lane-level speed guidance for an expressway main line and off-ramp."""

from .domain import ScenarioConfig, load_scenario, reference_scenario, validate

__version__ = "0.1.0"

__all__ = ["ScenarioConfig", "load_scenario", "reference_scenario", "validate", "__version__"]
