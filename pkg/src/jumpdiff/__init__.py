"""Multilevel Monte Carlo for elliptic problems with jump-diffusion coefficients.

Random coefficients combine a transformed Gaussian field and a piecewise
constant jump field on a random partition. Pathwise problems are solved with
P1 finite elements on interface-fitted or uniform meshes in one and two
dimensions.
"""
from .estimators import (EstimatorOutput, LevelSchedule, bootstrap_mlmc_estimate, build_schedule, fit_rate,
                         mc_estimate, mlmc_estimate, pilot_mesh_stats, rmse_study)
from .problems import PRESETS, Problem, SampleDraw, make_problem, solve_level

__version__ = "0.1.0"

__all__ = ["EstimatorOutput", "LevelSchedule", "PRESETS", "Problem", "SampleDraw", "bootstrap_mlmc_estimate",
           "build_schedule", "fit_rate", "make_problem", "mc_estimate", "mlmc_estimate", "pilot_mesh_stats",
           "rmse_study", "solve_level"]
