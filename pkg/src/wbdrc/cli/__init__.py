"""Scenario runner, paired comparisons and the ``wbdrc`` command line."""
from .runner import RunReport, run_scenario, write_trace
from .scenario import ConfigError, Scenario, bundled_scenarios, load_scenario, parse_scenario

__all__ = ["ConfigError", "RunReport", "Scenario", "bundled_scenarios", "load_scenario", "parse_scenario",
           "run_scenario", "write_trace"]
