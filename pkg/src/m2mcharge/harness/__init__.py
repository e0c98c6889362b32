"""Simulation harness: scenarios, the tick loop, run reports and their verifier."""

from .report import RunReport, SessionRecord
from .scenario import Scenario, load_scenario, parse_scenario, scenario_schema
from .sim import Simulation, derive_keys, run
from .verify import Verdict, verify_report, verify_run

__all__ = ["RunReport", "Scenario", "SessionRecord", "Simulation", "Verdict", "derive_keys", "load_scenario",
           "parse_scenario", "run", "scenario_schema", "verify_report", "verify_run"]
