import numpy as np
import pytest

from sadl.model import linear_gaussian, sine_perturbed
from sadl.flows import solve_mean_ode
from sadl.parametrix import Grid1D, ParametrixContext
from sadl.schedules import StepSchedule, time_grid
from sadl.truncation import TruncationParams


@pytest.fixture(scope="session")
def lin1():
    return linear_gaussian(1.0)


@pytest.fixture(scope="session")
def lin2():
    return linear_gaussian([[1.0, 0.3], [0.0, 2.0]], noise_cov=[[1.0, 0.2], [0.2, 2.0]])


@pytest.fixture(scope="session")
def sine():
    return sine_perturbed()


@pytest.fixture(scope="session")
def sched_beta1():
    return StepSchedule(A=1.0, B=0.0, beta=1.0)


@pytest.fixture(scope="session")
def setup100(lin1, sched_beta1):
    """Shared shift-100 linear setup: schedule, grid, mean path, truncation params."""
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.5)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    return schedule, grid, mean, params


@pytest.fixture(scope="session")
def ctx100(lin1, sched_beta1):
    """Shared density-engine context on a small grid (linear model, shift 100)."""
    return ParametrixContext.build(lin1, sched_beta1.shifted(100), T=0.5,
                                   space=Grid1D(n=512))


@pytest.fixture(scope="session")
def ctx100_zero(lin1, sched_beta1):
    return ParametrixContext.build(lin1, sched_beta1.shifted(100), T=0.5,
                                   space=Grid1D(n=512), zero_drift=True)
