import math

import numpy as np
import pytest

from sadl.flows import beta_defects, solve_mean_ode, truncated_flow_table
from sadl.model import linear_gaussian
from sadl.schedules import StepSchedule, time_grid
from sadl.simulate import (PROCESS_TAGS, DiffusionConfig, _path_etas, diffusion_at_grid,
                           run_coupled_UV, run_diffusion, run_frozen_chain, run_rm,
                           run_rm_paths, run_U, run_V, sample_diffusion_terminal,
                           sample_U_terminal, sample_V_terminal, simulate_bundle)
from sadl.truncation import TruncationParams


def test_rm_one_step_noiseless():
    m = linear_gaussian(1.0, noise_cov=[[0.0]])
    s = StepSchedule(A=1.0, B=0.0, beta=1.0)
    path, flag = run_rm(m, s, [5.0], 1, np.random.default_rng(0))
    assert path[1, 0] == pytest.approx(0.0)
    assert not flag


def test_rm_constant_at_root():
    m = linear_gaussian(1.0, noise_cov=[[0.0]])
    s = StepSchedule(A=1.0, B=0.0, beta=1.0)
    path, _ = run_rm(m, s, [0.0], 50, np.random.default_rng(0))
    assert np.max(np.abs(path)) == 0.0


def test_rm_consistency_monte_carlo(lin1):
    # sample mean of the iterate at step 1e4 sits within 3 standard errors of the root
    s = StepSchedule(A=1.0, B=0.0, beta=1.0)
    paths, flags = run_rm_paths(lin1, s, [1.0], 10_000, master_seed=11, n_paths=10_000)
    assert not flags.any()
    terminal = paths[:, -1, 0]
    se = terminal.std(ddof=1) / math.sqrt(len(terminal))
    assert abs(terminal.mean()) < 3 * se


def test_rm_divergence_flag():
    m = linear_gaussian(-80.0, noise_cov=[[0.0]])  # explosive field
    s = StepSchedule(A=1.0, B=0.0, beta=1.0)
    path, flag = run_rm(m, s, [1.0], 40, np.random.default_rng(0))
    assert flag
    assert np.all(np.isfinite(path))


def test_U_modes_agree_d2(lin2, sched_beta1):
    schedule = sched_beta1.shifted(1000)
    grid = time_grid(schedule, 1.02)
    mean = solve_mean_ode(lin2, [1.0, -0.5], float(grid.t[-1]) + 0.01)
    etas = _path_etas(123, PROCESS_TAGS["chain"], 10, grid.M, 2)
    U1, _ = run_U(lin2, schedule, grid, mean, [1.0, -0.5], etas, mode="direct")
    U2, _ = run_U(lin2, schedule, grid, mean, [1.0, -0.5], etas, mode="lemma1")
    assert np.max(np.abs(U1 - U2)) < 1e-9


def test_U_modes_agree_sine(sine, sched_beta1):
    schedule = sched_beta1.shifted(500)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(sine, [1.0], float(grid.t[-1]) + 0.01)
    etas = _path_etas(9, PROCESS_TAGS["chain"], 3, grid.M, 1)
    U1, _ = run_U(sine, schedule, grid, mean, [1.0], etas, mode="direct")
    U2, _ = run_U(sine, schedule, grid, mean, [1.0], etas, mode="lemma1")
    assert np.max(np.abs(U1 - U2)) < 1e-9


def test_U_single_step_by_hand(lin1, sched_beta1):
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.02)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    eta = np.zeros((grid.M, 1))
    eta[0, 0] = 0.37
    U, _ = run_U(lin1, schedule, grid, mean, [1.0], eta, mode="direct")
    g0 = float(schedule.gamma_shifted(0))
    g1 = float(schedule.gamma_shifted(1))
    theta0 = 1.0
    H = theta0 + 0.37  # linear field plus unit-variance draw
    theta1 = theta0 - g1 * H
    expected = (theta1 - mean.value(grid.t[1])[0]) / math.sqrt(g1)
    assert U[1, 0] == pytest.approx(expected, abs=1e-12)
    assert U[0, 0] == pytest.approx((theta0 - 1.0) / math.sqrt(g0), abs=1e-15)


def test_U_noiseless_defect_accumulation(lin1, sched_beta1):
    m0 = linear_gaussian(1.0, noise_cov=[[0.0]])
    schedule = sched_beta1.shifted(1000)
    grid = time_grid(schedule, 0.5)
    mean = solve_mean_ode(m0, [1.0], float(grid.t[-1]) + 0.01)
    etas = np.zeros((1, grid.M, 1))
    U, _ = run_U(m0, schedule, grid, mean, [1.0], etas, mode="direct")
    betas = beta_defects(m0, mean, grid)
    envelope = np.cumsum(np.abs(betas[:, 0])) / np.sqrt(grid.gammas)
    assert np.max(np.abs(U[0, 1:, 0])) <= 2.0 * np.max(envelope)
    assert np.max(np.abs(U)) < 0.05


def test_V_frozen_outside_ball(sched_beta1):
    m0 = linear_gaussian(1.0, noise_cov=[[0.0]])
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(m0, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    v0 = params.a + 1.2
    V = run_V(m0, schedule, grid, mean, params, [v0], np.zeros((grid.M, 1)))
    assert np.allclose(V[:, 0], v0)


def test_UV_coupling_envelope(lin1, sched_beta1):
    # with state-independent noise the coupled gap is driven by the defects alone
    schedule = sched_beta1.shifted(1000)
    grid = time_grid(schedule, 0.5)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    U, V, flags = run_coupled_UV(lin1, schedule, grid, mean, params, [1.0], 21, 8)
    gap = np.abs(U - V)[..., 0]
    betas = np.abs(beta_defects(lin1, mean, grid)[:, 0])
    # recursion envelope: e_{k+1} <= (1 + L g_{k+1}) e_k + |beta_{k+1}|
    L = abs(schedule.bar_alpha() - 1.0) + 1.0
    env = np.zeros(grid.M + 1)
    for k in range(grid.M):
        env[k + 1] = (1.0 + L * grid.gammas[k]) * env[k] + betas[k]
    assert np.all(gap <= env[None, :] + 1e-12)


def test_UV_sup_scales_like_sqrt_first_gain(sine, sched_beta1):
    # the 99th-percentile sup-gap drops between shifts by the square root of
    # the first-gain ratio, within a factor-2 window of that prediction
    q99 = {}
    for N in (100, 10_000):
        schedule = sched_beta1.shifted(N)
        grid = time_grid(schedule, 0.5)
        mean = solve_mean_ode(sine, [1.0], float(grid.t[-1]) + 0.01)
        params = TruncationParams.from_schedule(schedule)
        U, V, _ = run_coupled_UV(sine, schedule, grid, mean, params, [1.0], 77, 200)
        q99[N] = float(np.quantile(np.max(np.abs(U - V)[..., 0], axis=1), 0.99))
    predicted = math.sqrt(float(sched_beta1.shifted(100).gamma_shifted(1))
                          / float(sched_beta1.shifted(10_000).gamma_shifted(1)))
    measured = q99[100] / q99[10_000]
    assert 0.5 * predicted <= measured <= 2.0 * predicted


def test_frozen_chain_telescoping(sine, sched_beta1):
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.5)
    mean = solve_mean_ode(sine, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    etas = np.random.default_rng(3).standard_normal((5, 30, 1))
    i, j = 5, 35
    path, xis = run_frozen_chain(sine, schedule, grid, mean, params, [0.5], i, j, etas)
    tab = truncated_flow_table(sine, grid, params, mean, j, np.array([0.5]))
    g = np.array([float(schedule.gamma_shifted(k)) for k in range(j + 1)])
    resid = (path[:, -1] - path[:, 0] - (np.array([0.5]) - tab[i])
             + np.einsum("k,nkd->nd", np.sqrt(g[i + 1:j + 1]), xis))
    assert np.max(np.abs(resid)) < 1e-9


def test_frozen_chain_deterministic_when_noiseless(sched_beta1):
    m0 = linear_gaussian(1.0, noise_cov=[[0.0]])
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(m0, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    path, _ = run_frozen_chain(m0, schedule, grid, mean, params, [0.4], 2, 12,
                               np.zeros((1, 10, 1)))
    tab = truncated_flow_table(m0, grid, params, mean, 12, np.array([0.4]))
    increments = np.diff(tab[2:13, 0])
    assert np.allclose(np.diff(path[0, :, 0]), increments, atol=1e-12)


def test_frozen_chain_centered_increments(lin1, sched_beta1):
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    n = 100_000
    etas = np.random.default_rng(8).standard_normal((n, 3, 1))
    path, _ = run_frozen_chain(lin1, schedule, grid, mean, params, [0.4], 4, 7, etas)
    tab = truncated_flow_table(lin1, grid, params, mean, 7, np.array([0.4]))
    flow_inc = tab[7] - tab[4]
    devs = path[:, -1, 0] - path[:, 0, 0] - flow_inc[0]
    se = devs.std(ddof=1) / math.sqrt(n)
    assert abs(devs.mean()) < 3 * se


def test_diffusion_ou_moments(lin1, sched_beta1):
    # analytic Ornstein-Uhlenbeck oracle for the limit-kind dynamics
    mean = solve_mean_ode(lin1, [0.0], 1.1)
    cfg = DiffusionConfig(dt=1e-3, kind="limit")
    n = 100_000
    term = sample_diffusion_terminal(lin1, sched_beta1, cfg, 0.5, 1.0, n, 17, mean=mean)
    lam = sched_beta1.bar_alpha() - 1.0
    m_t = 0.5 * math.exp(lam * 1.0)
    v_t = (math.exp(2 * lam * 1.0) - 1.0) / (2 * lam)
    se_mean = math.sqrt(v_t / n)
    se_var = v_t * math.sqrt(2.0 / n)
    assert abs(term.mean() - m_t) < 3 * se_mean + 2e-3   # Euler bias margin
    assert abs(term.var(ddof=1) - v_t) < 3 * se_var + 2e-3


def test_diffusion_noiseless_matches_flow(lin1, sched_beta1):
    m0 = linear_gaussian(1.0, noise_cov=[[0.0]])
    mean = solve_mean_ode(m0, [0.0], 1.1)
    cfg = DiffusionConfig(dt=1e-4, kind="limit")
    path, times = run_diffusion(m0, sched_beta1, cfg, 0.7, 1.0, np.zeros((1, 10_000, 1)),
                                mean=mean)
    lam = sched_beta1.bar_alpha() - 1.0
    exact = 0.7 * math.exp(lam * 1.0)
    assert path[0, -1, 0] == pytest.approx(exact, abs=1e-3)


def test_truncated_diffusion_frozen_outside(sched_beta1):
    m0 = linear_gaussian(1.0, noise_cov=[[0.0]])
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(m0, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    x0 = params.a + 1.5
    cfg = DiffusionConfig(dt=1e-3, kind="truncated")
    path, _ = run_diffusion(m0, schedule, cfg, x0, 0.3, np.zeros((1, 300, 1)),
                            mean=mean, grid=grid, params=params)
    assert np.allclose(path, x0)


def test_stationary_requires_stability(sched_beta1, lin1):
    bad = linear_gaussian(0.3)   # limit value 0.5 exceeds the field slope
    cfg = DiffusionConfig(dt=1e-3, kind="stationary")
    with pytest.raises(ValueError):
        run_diffusion(bad, sched_beta1, cfg, 0.0, 1.0, np.zeros((1, 10, 1)))


def test_U_weak_limit_variance(lin1, sched_beta1):
    # the renormalized chain's terminal variance approaches the limiting-dynamics variance
    schedule = sched_beta1.shifted(10_000)
    grid = time_grid(schedule, 0.5)
    T = float(grid.t[-1])
    mean = solve_mean_ode(lin1, [1.0], T + 0.01)
    n = 40_000
    U_T = sample_U_terminal(lin1, schedule, grid, mean, [1.0], n, 31)
    lam = sched_beta1.bar_alpha() - 1.0
    v_t = (math.exp(2 * lam * T) - 1.0) / (2 * lam)
    emp = U_T[:, 0].var(ddof=1)
    assert abs(emp - v_t) / v_t < 0.05


def test_reproducibility_bitwise(lin1, sched_beta1):
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    b1 = simulate_bundle(lin1, schedule, grid, mean, params, ["U", "V", "X"], 20, 99, [1.0])
    b2 = simulate_bundle(lin1, schedule, grid, mean, params, ["U", "V", "X"], 20, 99, [1.0])
    for name in b1.paths:
        assert np.array_equal(b1.paths[name], b2.paths[name])
    assert b1.innovations_shared


def test_coupling_shares_innovations(lin1, sched_beta1):
    # with zero noise scale removed, U and V see identical first-step draws
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    U, V, _ = run_coupled_UV(lin1, schedule, grid, mean, params, [1.0], 5, 4)
    assert np.allclose(U[:, 0], V[:, 0])
    # same master seed, same tag: rebuilding the eta array reproduces both
    etas = _path_etas(5, PROCESS_TAGS["chain"], 4, grid.M, 1)
    U2, _ = run_U(lin1, schedule, grid, mean, [1.0], etas, mode="direct")
    assert np.array_equal(U, U2)


def test_diffusion_grid_alignment(lin1, sched_beta1):
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    path = np.arange(12, dtype=float).reshape(1, 12, 1)
    times = np.linspace(0.0, 0.33, 12)
    aligned = diffusion_at_grid(path, times, grid)
    for k, t_k in enumerate(grid.t):
        expect = path[0, np.searchsorted(times, t_k + 1e-15, side="right") - 1, 0]
        assert aligned[0, k, 0] == expect


def test_big_terminal_block_determinism(lin1, sched_beta1):
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    a = sample_V_terminal(lin1, schedule, grid, mean, params, 0.0, 3000, 55)
    b = sample_V_terminal(lin1, schedule, grid, mean, params, 0.0, 3000, 55)
    assert np.array_equal(a, b)
