"""Robust spacecraft transfer design in the Earth-Moon CR3BP via
chance-constrained covariance steering, with closed-loop Monte Carlo
validation."""

from .cr3bp import (EARTH_MOON_LU_KM, EARTH_MOON_MU, EARTH_MOON_TU_S,
                    SystemConstants)
from .discretize import TimeGrid, discretize_all, flow
from .mc import run_campaign, simulate_sample
from .problem import ScenarioConfig, SteeringIterate, UnitConverter, dv99_bound
from .scvx import ScvxParams, SteeringSolutionReport, run
from .uncertainty import GatesParams, ObservationModel, kalman_prepass

__version__ = "0.1.0"

__all__ = [
    "EARTH_MOON_LU_KM", "EARTH_MOON_MU", "EARTH_MOON_TU_S", "SystemConstants",
    "TimeGrid", "discretize_all", "flow",
    "run_campaign", "simulate_sample",
    "ScenarioConfig", "SteeringIterate", "UnitConverter", "dv99_bound",
    "ScvxParams", "SteeringSolutionReport", "run",
    "GatesParams", "ObservationModel", "kalman_prepass",
    "__version__",
]
