import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sadl.errors import GridMismatch
from sadl.metrics import (DistanceReport, bootstrap_stderr, check_tau_spacing,
                          delta_envelope, field_vs_samples_l1, grid_joint_l1_bound,
                          hellinger_sq, kde, l1_distance, rate_fit, sup_path_distance)
from sadl.parametrix import Grid1D, gaussian_g
from sadl.parametrix.grids import DensityField
from sadl.schedules import StepSchedule, time_grid


def normal_field(grid, mu, var, s=0.0, t=1.0):
    return DensityField(grid=grid, s=s, t=t, values=gaussian_g(var, grid.x - mu))


def test_kde_standard_normal_close():
    rng = np.random.default_rng(0)
    grid = Grid1D(n=1024)
    est = kde(rng.standard_normal(10 ** 6), grid=grid)
    assert l1_distance(est, normal_field(grid, 0.0, 1.0)) < 0.01


def test_kde_point_mass_is_kernel_bump():
    grid = Grid1D(n=2048)
    c = grid.x[1100]  # a point exactly on the grid
    est = kde(np.full(5000, c), bandwidth=0.1, grid=grid)
    expect = gaussian_g(0.1 ** 2, grid.x - c)
    assert np.max(np.abs(est.values - expect)) < 1e-3 * expect.max()


def test_kde_bimodal_symmetry():
    grid = Grid1D(n=2048)
    samples = np.concatenate([np.full(4000, -1.0), np.full(4000, 1.0)])
    est = kde(samples, bandwidth=0.1, grid=grid)
    flipped = est.values[::-1]
    assert np.max(np.abs(est.values - flipped)) < 1e-12


def test_kde_rejects_degenerate_without_bandwidth():
    with pytest.raises(ValueError):
        kde(np.zeros(5000))
    with pytest.raises(ValueError):
        kde(np.zeros(10))


def test_l1_identical_zero():
    grid = Grid1D(n=512)
    f = normal_field(grid, 0.0, 1.0)
    assert l1_distance(f, f) == 0.0
    assert hellinger_sq(f, f) == 0.0


def test_l1_disjoint_masses():
    grid = Grid1D(n=4096)
    f = normal_field(grid, -5.0, 0.01)
    g = normal_field(grid, 5.0, 0.01)
    assert l1_distance(f, g) == pytest.approx(2.0, abs=1e-6)
    assert hellinger_sq(f, g) == pytest.approx(2.0, abs=1e-6)


def test_l1_gaussian_shift_closed_form():
    # int |N(0,1) - N(0.1,1)| = 2 (2 Phi(0.05) - 1); the crossing sits at the midpoint
    grid = Grid1D(n=8192)
    f = normal_field(grid, 0.0, 1.0)
    g = normal_field(grid, 0.1, 1.0)
    closed = 2.0 * (2.0 * stats.norm.cdf(0.05) - 1.0)
    assert closed == pytest.approx(0.0797552, abs=1e-6)
    assert l1_distance(f, g) == pytest.approx(closed, abs=1e-4)


def test_grid_mismatch_rejected():
    f = normal_field(Grid1D(n=512), 0.0, 1.0)
    g = normal_field(Grid1D(n=1024), 0.0, 1.0)
    with pytest.raises(GridMismatch):
        l1_distance(f, g)


def test_l1_metric_properties():
    grid = Grid1D(n=512)
    rng = np.random.default_rng(4)
    fields = []
    for _ in range(3):
        mu, var = rng.uniform(-1, 1), rng.uniform(0.5, 2.0)
        w = rng.uniform(0.2, 0.8)
        vals = w * gaussian_g(var, grid.x - mu) + (1 - w) * gaussian_g(1.0, grid.x + mu)
        fields.append(DensityField(grid=grid, s=0.0, t=1.0, values=vals))
    a, b, c = fields
    assert l1_distance(a, b) == l1_distance(b, a)
    assert l1_distance(a, c) <= l1_distance(a, b) + l1_distance(b, c) + 1e-10


@settings(max_examples=25, deadline=None)
@given(mu=st.floats(-2.0, 2.0), var=st.floats(0.3, 3.0))
def test_hellinger_below_l1(mu, var):
    grid = Grid1D(n=1024)
    f = normal_field(grid, 0.0, 1.0)
    g = normal_field(grid, mu, var)
    assert hellinger_sq(f, g) <= l1_distance(f, g) + 1e-9


def test_distance_report_bounds():
    with pytest.raises(ValueError):
        DistanceReport(kind="l1", value=2.5)
    DistanceReport(kind="sup_path", value=3.0)


def test_sup_path_requires_coupling(lin1, sched_beta1):
    from sadl.flows import solve_mean_ode
    from sadl.simulate import simulate_bundle
    from sadl.truncation import TruncationParams
    schedule = sched_beta1.shifted(100)
    grid = time_grid(schedule, 0.3)
    mean = solve_mean_ode(lin1, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    bundle = simulate_bundle(lin1, schedule, grid, mean, params, ["U", "V"], 30, 3, [1.0])
    sups = sup_path_distance(bundle, "U", "V")
    assert sups.shape == (30,)
    assert np.all(sups >= 0)
    assert np.allclose(sup_path_distance(bundle, "U", "U"), 0.0)
    bundle.innovations_shared = False
    with pytest.raises(ValueError):
        sup_path_distance(bundle, "U", "V")


def test_sup_path_noiseless_matches_replay(sched_beta1):
    # zero noise: the coupled gap replays the deterministic defect recursion
    from sadl.flows import beta_defects, solve_mean_ode
    from sadl.model import linear_gaussian
    from sadl.simulate import run_coupled_UV
    from sadl.truncation import TruncationParams
    m0 = linear_gaussian(1.0, noise_cov=[[0.0]])
    schedule = sched_beta1.shifted(1000)
    grid = time_grid(schedule, 0.5)
    mean = solve_mean_ode(m0, [1.0], float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    U, V, _ = run_coupled_UV(m0, schedule, grid, mean, params, [1.0], 1, 2)
    sup = float(np.max(np.abs(U - V)))
    # replay the exact gap recursion: e_{k+1} = (1 + g_{k+1} G_k) e_k + beta_{k+1}
    betas = beta_defects(m0, mean, grid)[:, 0]
    gap = 0.0
    worst = 0.0
    for k in range(grid.M):
        g_k = float(schedule.gamma_shifted(k))
        g_k1 = float(schedule.gamma_shifted(k + 1))
        G_k = float(schedule.alpha_step(k)) - math.sqrt(g_k / g_k1)
        gap = (1.0 + g_k1 * G_k) * gap + betas[k]
        worst = max(worst, abs(gap))
    assert sup == pytest.approx(worst, rel=1e-10)


def test_rate_fit_exact_power():
    Ns = [100, 1000, 10_000, 100_000]
    vals = [3.0 * n ** -0.5 for n in Ns]
    slope, intercept, r2 = rate_fit(Ns, vals)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_rate_fit_log_corrected():
    Ns = [100, 1000, 10_000]
    vals = [2.0 * n ** -0.5 * math.log(n) ** 2 for n in Ns]
    slope, _, _ = rate_fit(Ns, vals, correct_log_sq=True)
    assert slope == pytest.approx(-0.5, abs=1e-6)
    with pytest.raises(ValueError):
        rate_fit([10, 100], [1.0, 0.1])
    with pytest.raises(ValueError):
        rate_fit(Ns, [1.0, -0.5, 0.1])


def test_bootstrap_stderr_of_kde_l1_shrinks():
    # the bootstrap error of the estimated-density distance follows ~n^(-1/2)
    rng = np.random.default_rng(9)
    grid = Grid1D(n=512)
    target = normal_field(grid, 0.0, 1.0)

    def l1_stat(resampled):
        return l1_distance(kde(resampled, bandwidth=0.1, grid=grid), target)

    small = rng.standard_normal(2000)
    large = rng.standard_normal(8000)
    se_small = bootstrap_stderr(small, l1_stat, n_boot=40, seed=1)
    se_large = bootstrap_stderr(large, l1_stat, n_boot=40, seed=2)
    expected_ratio = math.sqrt(len(large) / len(small))
    assert se_small / se_large == pytest.approx(expected_ratio, rel=0.5)


def test_density_field_checks():
    from sadl.errors import MassLeak
    grid = Grid1D(n=512)
    good = normal_field(grid, 0.0, 1.0)
    good.check_density()
    rng = np.random.default_rng(2)
    est = kde(rng.standard_normal(50_000), grid=grid)
    assert est.mass() == pytest.approx(1.0, abs=1e-3)
    wide = normal_field(grid, 0.0, 30.0)  # visible mass at the boundary
    with pytest.raises(MassLeak):
        wide.check_density(mass_tol=1.0)


def test_convolve_flags_mass_leak():
    from sadl.errors import MassLeak
    from sadl.parametrix import convolve
    space = Grid1D(n=256)

    def flat(s, u, x, z):
        return np.ones_like(np.asarray(z))

    with pytest.raises(MassLeak):
        convolve(flat, flat, 0.0, 0.5, 0.0, 0.0, "continuous", space)


def test_tau_spacing_and_envelope(sched_beta1):
    assert check_tau_spacing(np.linspace(0, 1, 5), 4)
    assert not check_tau_spacing([0.0, 0.9, 0.95, 0.975, 1.0], 4)
    schedule = sched_beta1.shifted(1000)
    env = delta_envelope(schedule, 4)
    g1 = float(schedule.gamma_shifted(1))
    manual = (4 ** 0.25 * math.sqrt(math.log(1 / g1)) * g1 ** 0.25
              + 4 * math.log(1 / g1) ** 2 * math.sqrt(g1))
    assert env == pytest.approx(manual, rel=1e-12)


def test_field_vs_samples_l1_consistency():
    rng = np.random.default_rng(12)
    grid = Grid1D(n=1024)
    fld = normal_field(grid, 0.0, 1.0)
    same = rng.standard_normal(200_000)
    other = 0.5 + rng.standard_normal(200_000)
    assert field_vs_samples_l1(fld, same) < 0.02
    assert field_vs_samples_l1(fld, other) > 0.2


def _gauss_transition_factory(grid, rate):
    # analytic pseudo-engine: exponential-contraction Gaussian transitions
    def trans(i_idx, j_idx, x, times):
        dt = times[j_idx] - times[i_idx]
        mean = x * math.exp(-rate * dt)
        var = (1.0 - math.exp(-2 * rate * dt)) / (2 * rate)
        return DensityField(grid=grid, s=times[i_idx], t=times[j_idx],
                            values=gaussian_g(var, grid.x - mean))

    return trans


def test_grid_joint_bound_trivial_cases(sched_beta1):
    schedule = sched_beta1.shifted(1000)
    grid = time_grid(schedule, 0.5)
    space = Grid1D(n=512)
    times = grid.t
    engine = _gauss_transition_factory(space, 1.0)

    def tq(i, j, x):
        return engine(i, j, x, times)

    def start(i):
        return tq(0, i, 0.0)

    # identical engines: zero bound; single leg reduces to one transition L1
    taus = [0, grid.M]
    res = grid_joint_l1_bound(tq, tq, start, taus, grid, 0.0)
    assert res["bound"] == 0.0
    other = _gauss_transition_factory(space, 1.3)

    def tp(i, j, x):
        return other(i, j, x, times)

    res1 = grid_joint_l1_bound(tq, tp, start, taus, grid, 0.0)
    direct = l1_distance(tq(0, grid.M, 0.0), tp(0, grid.M, 0.0))
    assert res1["bound"] == pytest.approx(direct, rel=1e-12)


def test_grid_joint_bound_sanity_envelope(sched_beta1):
    schedule = sched_beta1.shifted(1000)
    grid = time_grid(schedule, 0.5)
    space = Grid1D(n=512)
    times = grid.t
    engine_q = _gauss_transition_factory(space, 1.0)
    engine_p = _gauss_transition_factory(space, 1.15)

    def tq(i, j, x):
        return engine_q(i, j, x, times)

    def tp(i, j, x):
        return engine_p(i, j, x, times)

    def start(i):
        return tq(0, i, 0.0)

    m_N = 4
    idx = [0] + [int(grid.index_at(times[-1] * f)) for f in (0.25, 0.5, 0.75)] + [grid.M]
    res = grid_joint_l1_bound(tq, tp, start, idx, grid, 0.0)
    # single-step distances maxed over leg and over start points covering the weight bulk
    singles = [l1_distance(tq(idx[i], idx[i + 1], x), tp(idx[i], idx[i + 1], x))
               for i in range(m_N) for x in (-2.0, -1.0, 0.0, 1.0, 2.0)]
    assert 0 < res["bound"] < m_N * max(singles)
    with pytest.raises(ValueError):
        grid_joint_l1_bound(tq, tp, start, [0, 1, grid.M], grid, 0.0)
