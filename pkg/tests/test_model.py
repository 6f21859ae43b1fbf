import numpy as np
import pytest
from scipy import stats

from sadl.model import (check_inward, check_lyapunov, fd_jacobian, inward_schedule_ok,
                        linear_gaussian, sine_perturbed, validate_model)
from sadl.schedules import StepSchedule


def test_sample_noiseless_deterministic():
    m = linear_gaussian(1.0, noise_cov=[[0.0]])
    rng = np.random.default_rng(0)
    assert m.sample_H(np.array([2.0]), rng) == pytest.approx(2.0)


def test_sample_mean_matches_field():
    m = linear_gaussian(1.0)
    rng = np.random.default_rng(1)
    draws = m.sample_H(np.broadcast_to([1.0], (10 ** 6, 1)), rng)
    assert abs(draws.mean() - 1.0) < 0.005


def test_sample_covariance_d2():
    m = linear_gaussian(np.eye(2), noise_cov=np.diag([1.0, 4.0]))
    rng = np.random.default_rng(2)
    n = 200_000
    draws = m.sample_H(np.broadcast_to([0.3, -0.7], (n, 2)), rng)
    emp = np.cov(draws.T)
    se = np.sqrt((np.outer([1.0, 4.0], [1.0, 4.0]) + np.diag([1.0, 4.0]) ** 2) / n)
    assert np.all(np.abs(emp - np.diag([1.0, 4.0])) < 5 * se + 1e-12)


def test_root_is_zero_of_field(lin1, lin2, sine):
    for m in (lin1, lin2, sine):
        assert np.max(np.abs(m.mean_field(m.root))) < 1e-12


def test_jacobian_matches_finite_differences(lin2, sine):
    for m, grid in ((lin2, [np.zeros(2), np.array([0.4, -1.0])]),
                    (sine, [np.array([v]) for v in (-2.0, -0.3, 0.0, 0.7, 2.5)])):
        for theta in grid:
            jac = m.jacobian(theta)
            fd = fd_jacobian(m, theta)
            assert np.max(np.abs(jac - fd)) / max(1.0, np.max(np.abs(jac))) < 1e-6


def test_noise_state_independent_for_linear(lin1):
    # centered noise has the same law at different states (two-sample KS)
    rng = np.random.default_rng(3)
    eta = rng.standard_normal((20_000, 1))
    xi_a = lin1.xi(np.broadcast_to([0.0], (20_000, 1)), eta)
    xi_b = lin1.xi(np.broadcast_to([5.0], (20_000, 1)), eta)
    assert np.array_equal(xi_a, xi_b)
    eta2 = rng.standard_normal((20_000, 1))
    ks = stats.ks_2samp(xi_a[:, 0], lin1.xi(np.broadcast_to([5.0], (20_000, 1)), eta2)[:, 0])
    assert ks.statistic < 0.02


def test_sine_derivative_range(sine):
    thetas = np.linspace(-8, 8, 400)[:, None]
    derivs = sine.jacobian(thetas)[..., 0, 0]
    assert np.all(derivs >= 0.5 - 1e-12)
    assert np.all(derivs <= 1.5 + 1e-12)
    covs = sine.noise_cov(thetas)[..., 0, 0]
    assert np.all(covs >= 1.0) and np.all(covs <= 1.2)


def test_check_lyapunov_examples():
    s_half = StepSchedule(A=1.0, B=0.0, beta=1.0)        # limit value 0.5
    s_zero = StepSchedule(A=1.0, B=0.0, beta=0.75)       # limit value 0
    assert check_lyapunov(linear_gaussian(1.0), s_zero)
    assert not check_lyapunov(linear_gaussian(0.3), s_half)
    assert check_lyapunov(linear_gaussian(np.diag([1.0, 2.0])), s_half)


def test_check_inward_examples(sine):
    lin = linear_gaussian(1.0)
    samples = [[-2.0], [-1.0], [1.0], [2.0]]
    assert check_inward(lin, 1.0, samples)
    assert not check_inward(lin, 1.5, [[1.0]])
    grid = np.linspace(-3, 3, 61)[:, None]
    assert check_inward(sine, 0.4, grid)


def test_inward_schedule_condition():
    assert inward_schedule_ok(StepSchedule(A=1.0, B=0.0, beta=0.75), 0.01)
    assert inward_schedule_ok(StepSchedule(A=1.0, B=0.0, beta=1.0), 0.6)
    assert not inward_schedule_ok(StepSchedule(A=1.0, B=0.0, beta=1.0), 0.4)


def test_validate_model_passes_builtins(lin1, sine):
    for i, m in enumerate((lin1, sine)):
        report = validate_model(m, np.random.default_rng(10 + i), n_draws=200_000)
        assert report.all_ok, vars(report)


def test_validate_model_flags_wrong_jacobian(lin1):
    from dataclasses import replace
    bad = replace(lin1, jacobian=lambda theta: 2.0 * lin1.jacobian(theta))
    report = validate_model(bad, np.random.default_rng(5), n_draws=2000)
    assert not report.jacobian_ok
