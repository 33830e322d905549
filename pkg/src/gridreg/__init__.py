"""Distributed frequency regulation of power networks with wind generation,
battery storage filtering and elastic demand.

Modules
-------
grid            network topology, scenarios and assumption checks
plant           bus dynamics, wind and storage models, RK4 stepping
internal_model  Sylvester solution and internal-model design
robust          internal-model controller and its local gain design
adaptive        adaptive controller with a projected estimator
network         the closed loop, its linear structure and spectral checks
stability       gain graphs, small-gain verdicts and ISS bounds
sim             simulation runs, comparison experiment and CSV output
"""
from .grid import Scenario, load_scenario, random_scenario, validate_assumptions
from .network import ClosedLoop, assemble_A, hurwitz_certificate, is_hurwitz
from .sim import RunRecord, compare, export_csv, run

__all__ = [
    "ClosedLoop", "RunRecord", "Scenario", "assemble_A", "compare", "export_csv", "hurwitz_certificate",
    "is_hurwitz", "load_scenario", "random_scenario", "run", "validate_assumptions",
]
__version__ = "0.1.0"
