"""glucotrial: virtual clinical trials of closed-loop diabetes treatments.

The package simulates large populations of stochastic virtual patients over
long horizons under compositional lifestyle protocols, runs a pluggable
feedback controller in closed loop, and streams mergeable performance
statistics (time in glycemic ranges, BG distributions, dose distributions,
worst-case retention) so trials of a million patient-years fit in memory.
"""

__version__ = "0.1.0"

from . import analytics, controller, hovorka, physiology, population, protocol, rng, simulation, storage
from .analytics import TrialAccumulator, classify_bg, compare_trials, merge
from .controller import ControllerHyperparameters, DualHormoneController, load_profile
from .physiology import ModelDefinition, get_model, registered_models
from .population import DemographicsConfig, ParameterSet, Patient, generate_population
from .protocol import AnnouncementPolicy, Disturbance, Protocol, compose_year, meal_grams
from .simulation import (
    NorthernYearProtocol,
    SimulationConfig,
    SimulationResult,
    run_trial,
    simulate_closed_loop,
)
from .storage import Store, TrialRecord

__all__ = [
    "__version__",
    "AnnouncementPolicy",
    "ControllerHyperparameters",
    "DemographicsConfig",
    "Disturbance",
    "DualHormoneController",
    "ModelDefinition",
    "NorthernYearProtocol",
    "ParameterSet",
    "Patient",
    "Protocol",
    "SimulationConfig",
    "SimulationResult",
    "Store",
    "TrialAccumulator",
    "TrialRecord",
    "classify_bg",
    "compare_trials",
    "compose_year",
    "generate_population",
    "get_model",
    "load_profile",
    "meal_grams",
    "merge",
    "registered_models",
    "run_trial",
    "simulate_closed_loop",
]
