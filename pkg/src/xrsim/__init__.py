"""System-level simulator for mixed XR and full-buffer eMBB traffic on a multi-cell TDD downlink."""
from .config import ScenarioConfig, default_scenario, load_config, validate
from .engine import RunResult, run, run_campaign

__all__ = ["RunResult", "ScenarioConfig", "default_scenario", "load_config", "run", "run_campaign", "validate"]
__version__ = "0.1.0"
