"""Stochastic-approximation diffusion lab.

Chains of Robbins-Monro type, their renormalized and truncated modifications,
the limiting diffusions, transition-density machinery in one dimension, and
distance/rate experiment tooling.
"""

from .schedules import StepSchedule, TimeGrid, time_grid
from .model import (ProblemModel, linear_gaussian, sine_perturbed,
                    check_lyapunov, check_inward, inward_schedule_ok, validate_model)
from .truncation import TruncationParams
from .flows import MeanTrajectory, solve_mean_ode, flow, beta_defect, beta_defects, sigma_bar
from .simulate import (DiffusionConfig, PathBundle, run_rm, run_rm_paths, run_U, run_V,
                       run_coupled_UV, run_frozen_chain, run_diffusion, simulate_bundle)

__version__ = "0.1.0"
