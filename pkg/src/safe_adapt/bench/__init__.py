"""Benchmark harness: scenario files, closed-loop runs, reports and CLI."""
from .config import ConfigError, ScenarioConfig, load_config
from .scenarios import SCENARIO_REGISTRY, RunAborted, SummaryMetrics, chatter_switches, compare, run, shipped_config

__all__ = ["ConfigError", "ScenarioConfig", "load_config", "SCENARIO_REGISTRY", "RunAborted",
           "SummaryMetrics", "chatter_switches", "compare", "run", "shipped_config"]
