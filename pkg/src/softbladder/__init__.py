"""Simulation and identification toolkit for a pneumatic soft bladder actuator."""

from .control import GainSchedule, ImpedanceController, SmcConfig
from .core import ActuatorParams, SoftBladderError, bench_params
from .force_model import ForceModel, ForceSurfaceRegressor, eval_force, fit_force_model
from .harness import (Settings, load_settings, run_full_matrix, run_identification_pipeline,
                      run_tracking_experiment, simulate)
from .pneumatics import FlowModelCoeffs, PowerMap, PowerMapRegressor, ValveCommand
from .sysid import SecondOrderRegressor, bandwidth_of, fit_second_order
from .trajectories import get_curve

__version__ = "0.1.0"

__all__ = [
    "ActuatorParams", "FlowModelCoeffs", "ForceModel", "ForceSurfaceRegressor",
    "GainSchedule", "ImpedanceController", "PowerMap", "PowerMapRegressor",
    "SecondOrderRegressor", "Settings", "SmcConfig", "SoftBladderError", "ValveCommand",
    "bandwidth_of", "bench_params", "eval_force", "fit_force_model", "fit_second_order",
    "get_curve", "load_settings", "run_full_matrix", "run_identification_pipeline",
    "run_tracking_experiment", "simulate",
]
