"""Trajectory generation: the root-finding chain, its renormalized and truncated
versions, frozen chains, and the limiting diffusions, with coupled innovations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure
from .flows import MeanTrajectory, beta_defects, truncated_flow_table
from .model import ProblemModel, check_lyapunov
from .schedules import StepSchedule, TimeGrid
from .truncation import TruncationParams, f_matrix, g_matrix

DIVERGENCE_GUARD = 1e9
BLOCK = 16384

PROCESS_TAGS = {
    "theta": 0,
    "chain": 1,     # shared by U and V so their innovations coincide
    "X": 3,
    "X_trunc": 4,
    "X_star": 5,
    "V_frozen": 6,
}


def path_rng(master_seed: int, tag: int, path_index: int) -> np.random.Generator:
    """Independent per-path stream keyed by (seed, process tag, path index)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(tag, path_index)))


def block_rng(master_seed: int, tag: int, block_index: int) -> np.random.Generator:
    """Stream for a fixed 16384-path block; large Monte Carlo runs draw per step per block."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(tag, 1 << 30, block_index)))


@dataclass(frozen=True)
class DiffusionConfig:
    """Euler-Maruyama settings; dt must not exceed the first shifted gain."""

    dt: float
    kind: str = "limit"  # limit | truncated | stationary

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.kind not in ("limit", "truncated", "stationary"):
            raise ValueError(f"unknown diffusion kind {self.kind!r}")


@dataclass
class PathBundle:
    """Simulated trajectories on a shared gain grid, keyed by process name.

    Arrays have shape [n_paths, M+1, d].  When ``innovations_shared`` is set,
    the chain processes were driven by identical noise draws step for step.
    """

    grid: TimeGrid
    paths: dict
    master_seed: int
    innovations_shared: bool
    flags: dict = field(default_factory=dict)


def _guard(x, flagged):
    bad = np.linalg.norm(np.atleast_2d(x), axis=-1) > DIVERGENCE_GUARD
    if np.any(bad):
        flagged |= bad.reshape(flagged.shape)
    return flagged


def run_rm(model: ProblemModel, schedule: StepSchedule, theta0, n_steps: int,
           rng: np.random.Generator):
    """Single path of theta_{n+1} = theta_n - g_{n+1} H(theta_n, eta_{n+1}).

    Returns (path [n_steps+1, d], diverged flag).  A state beyond the guard
    norm freezes the path and flags it rather than dropping it.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    theta = np.asarray(theta0, dtype=float).reshape(model.dim)
    out = np.empty((n_steps + 1, model.dim))
    out[0] = theta
    diverged = False
    for n in range(n_steps):
        if not diverged:
            g = float(schedule.gamma_shifted(n + 1))
            theta = theta - g * model.sample_H(theta, rng)
            if np.linalg.norm(theta) > DIVERGENCE_GUARD:
                diverged = True
        out[n + 1] = theta
    return out, diverged


def run_rm_paths(model: ProblemModel, schedule: StepSchedule, theta0, n_steps: int,
                 master_seed: int, n_paths: int):
    """Per-path streams, vectorized stepping; returns ([n_paths, n_steps+1, d], flags)."""
    etas = _path_etas(master_seed, PROCESS_TAGS["theta"], n_paths, n_steps, model.dim)
    theta = np.broadcast_to(np.asarray(theta0, dtype=float).reshape(model.dim),
                            (n_paths, model.dim)).copy()
    out = np.empty((n_paths, n_steps + 1, model.dim))
    out[:, 0] = theta
    flagged = np.zeros(n_paths, dtype=bool)
    for n in range(n_steps):
        g = float(schedule.gamma_shifted(n + 1))
        h = model.mean_field(theta)
        step = theta - g * (h + model.xi(theta, etas[:, n]))
        theta = np.where(flagged[:, None], theta, step)
        flagged = _guard(theta, flagged)
        out[:, n + 1] = theta
    return out, flagged


def _path_etas(master_seed, tag, n_paths, n_steps, d):
    """Innovation array [n_paths, n_steps, d] from independent per-path streams."""
    etas = np.empty((n_paths, n_steps, d))
    for p in range(n_paths):
        etas[p] = path_rng(master_seed, tag, p).standard_normal((n_steps, d))
    return etas


def _mean_at_grid(mean: MeanTrajectory, grid: TimeGrid) -> np.ndarray:
    return np.atleast_2d(mean.value(grid.t))


def run_U(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
          mean: MeanTrajectory, theta0N, etas, mode: str = "direct"):
    """Renormalized chain on the gain grid, driven by the given eta array [M, d] or [n, M, d].

    mode="direct" runs the shifted chain and renormalizes against the mean
    path; mode="lemma1" iterates the one-step representation with the
    untruncated drift matrix and the Euler defects.  Both consume the eta
    array in the same order, so they agree path by path up to rounding.
    """
    etas = np.asarray(etas, dtype=float)
    single = etas.ndim == 2
    if single:
        etas = etas[None]
    n_paths, M = etas.shape[0], grid.M
    d = model.dim
    tb = _mean_at_grid(mean, grid)
    g = np.array([float(schedule.gamma_shifted(k)) for k in range(M + 1)])  # g[k] = gain at index k
    theta0N = np.broadcast_to(np.asarray(theta0N, dtype=float).reshape(d), (n_paths, d))
    U = np.empty((n_paths, M + 1, d))
    flagged = np.zeros(n_paths, dtype=bool)
    if mode == "direct":
        theta = theta0N.copy()
        U[:, 0] = (theta - tb[0]) / np.sqrt(g[0])
        for k in range(M):
            h = model.mean_field(theta)
            theta = theta - g[k + 1] * (h + model.xi(theta, etas[:, k]))
            flagged = _guard(theta, flagged)
            U[:, k + 1] = (theta - tb[k + 1]) / np.sqrt(g[k + 1])
    elif mode == "lemma1":
        betas = beta_defects(model, mean, grid)
        u = (theta0N - tb[0]) / np.sqrt(g[0])
        U[:, 0] = u
        for k in range(M):
            G = g_matrix(model, grid, tb[k], k, u)
            arg = tb[k] + np.sqrt(g[k]) * u
            u = (u + g[k + 1] * np.einsum("...ij,...j->...i", G, u)
                 - np.sqrt(g[k + 1]) * model.xi(arg, etas[:, k]) + betas[k])
            flagged = _guard(u, flagged)
            U[:, k + 1] = u
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return (U[0], bool(flagged[0])) if single else (U, flagged)


def run_V(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
          mean: MeanTrajectory, params: TruncationParams, V0, etas):
    """Truncated chain: drift through the cutoff map, defect term dropped.

    etas as in run_U; the cutoff keeps every drift argument inside the
    tube where the model is well behaved, so no divergence guard is needed.
    """
    etas = np.asarray(etas, dtype=float)
    single = etas.ndim == 2
    if single:
        etas = etas[None]
    n_paths, M = etas.shape[0], grid.M
    d = model.dim
    tb = _mean_at_grid(mean, grid)
    g = np.array([float(schedule.gamma_shifted(k)) for k in range(M + 1)])
    v = np.broadcast_to(np.asarray(V0, dtype=float).reshape(d), (n_paths, d)).copy()
    V = np.empty((n_paths, M + 1, d))
    V[:, 0] = v
    for k in range(M):
        chi_v = params.chi(v)
        F = f_matrix(model, grid, params, tb[k], k, v)
        arg = tb[k] + np.sqrt(g[k]) * chi_v
        v = (v + g[k + 1] * np.einsum("...ij,...j->...i", F, chi_v)
             - np.sqrt(g[k + 1]) * model.xi(arg, etas[:, k]))
        V[:, k + 1] = v
    return V[0] if single else V


def run_coupled_UV(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
                   mean: MeanTrajectory, params: TruncationParams, start,
                   master_seed: int, n_paths: int):
    """U (direct) and V driven by identical per-path innovation streams."""
    etas = _path_etas(master_seed, PROCESS_TAGS["chain"], n_paths, grid.M, model.dim)
    U, flags = run_U(model, schedule, grid, mean, start, etas, mode="direct")
    V = run_V(model, schedule, grid, mean, params, _u0_of(start, mean, grid, schedule, model), etas)
    return U, V, flags


def _u0_of(theta0N, mean, grid, schedule, model):
    tb0 = np.atleast_1d(mean.value(0.0)).reshape(model.dim)
    g0 = float(schedule.gamma_shifted(0))
    return (np.asarray(theta0N, dtype=float).reshape(model.dim) - tb0) / np.sqrt(g0)


def run_frozen_chain(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
                     mean: MeanTrajectory, params: TruncationParams,
                     y, i: int, j: int, etas, start=None):
    """Frozen chain on steps i..j: flow increments plus innovations evaluated along the frozen flow.

    Returns (path [n, j-i+1, d], xi record [n, j-i, d]) so the telescoping
    identity can be checked directly against the drawn innovations.
    """
    if not 0 <= i < j <= grid.M:
        raise ValueError("need 0 <= i < j <= M")
    etas = np.asarray(etas, dtype=float)
    single = etas.ndim == 2
    if single:
        etas = etas[None]
    n_paths = etas.shape[0]
    d = model.dim
    y = np.asarray(y, dtype=float).reshape(d)
    flow_tab = truncated_flow_table(model, grid, params, mean, j, y)  # [j+1, d]
    tb = _mean_at_grid(mean, grid)
    g = np.array([float(schedule.gamma_shifted(k)) for k in range(j + 1)])
    start = np.zeros(d) if start is None else np.asarray(start, dtype=float).reshape(d)
    path = np.empty((n_paths, j - i + 1, d))
    xis = np.empty((n_paths, j - i, d))
    v = np.broadcast_to(start, (n_paths, d)).copy()
    path[:, 0] = v
    for idx, k in enumerate(range(i, j)):
        arg = tb[k] + params.chi(flow_tab[k]) * np.sqrt(g[k])
        xi = model.xi(np.broadcast_to(arg, (n_paths, d)), etas[:, idx])
        v = v + (flow_tab[k + 1] - flow_tab[k]) - np.sqrt(g[k + 1]) * xi
        xis[:, idx] = xi
        path[:, idx + 1] = v
    return (path[0], xis[0]) if single else (path, xis)


def run_diffusion(model: ProblemModel, schedule: StepSchedule, config: DiffusionConfig,
                  X0, T: float, etas_or_seed, *, mean: MeanTrajectory | None = None,
                  grid: TimeGrid | None = None, params: TruncationParams | None = None,
                  n_paths: int | None = None, keep_path: bool = True):
    """Euler-Maruyama paths of the limiting, truncated, or stationary dynamics.

    ``etas_or_seed`` is either an eta array [n, n_steps, d] or an integer seed
    from which per-path streams are derived.  With keep_path=False only the
    terminal states are returned (memory-friendly for big runs).
    """
    n_steps = math.ceil(T / config.dt)
    d = model.dim
    if config.kind in ("limit", "truncated") and mean is None:
        raise ValueError("limit/truncated diffusion needs the mean trajectory")
    if config.kind == "truncated" and (grid is None or params is None):
        raise ValueError("truncated diffusion needs the gain grid and truncation params")
    if config.kind == "stationary" and not check_lyapunov(model, schedule):
        raise ValueError("stationary diffusion requires the root drift matrix to be stable")
    if grid is not None and config.dt > float(schedule.gamma_shifted(1)) + 1e-15:
        raise ValueError("dt must not exceed the first shifted gain")

    if isinstance(etas_or_seed, (int, np.integer)):
        if n_paths is None:
            raise ValueError("n_paths required when a seed is given")
        tag = PROCESS_TAGS["X_star" if config.kind == "stationary"
                           else "X_trunc" if config.kind == "truncated" else "X"]
        etas = _path_etas(int(etas_or_seed), tag, n_paths, n_steps, d)
    else:
        etas = np.asarray(etas_or_seed, dtype=float)
        if etas.ndim == 2:
            etas = etas[None]
        n_paths = etas.shape[0]

    bar_a = schedule.bar_alpha()
    eye = np.eye(d)
    x = np.broadcast_to(np.asarray(X0, dtype=float).reshape(d), (n_paths, d)).copy()
    times = config.dt * np.arange(n_steps + 1)
    if keep_path:
        out = np.empty((n_paths, n_steps + 1, d))
        out[:, 0] = x
    if config.kind == "stationary":
        drift_mat = bar_a * eye - model.jacobian(model.root)
        sqrtR = model.noise_sqrt(model.root)
    sqdt = np.sqrt(config.dt)
    tb_cache = mean.value(times) if mean is not None else None
    for n in range(n_steps):
        t = times[n]
        if config.kind == "limit":
            tb = tb_cache[n]
            drift = np.einsum("ij,...j->...i", bar_a * eye - model.jacobian(tb), x)
            root_mat = model.noise_sqrt(tb)
        elif config.kind == "truncated":
            k = int(grid.index_at(t))
            tb = tb_cache[n]
            F = f_matrix(model, grid, params, mean.value(grid.t[k]), k, x)
            drift = np.einsum("...ij,...j->...i", F, params.chi(x))
            root_mat = model.noise_sqrt(tb)
        else:
            drift = np.einsum("ij,...j->...i", drift_mat, x)
            root_mat = sqrtR
        x = x + config.dt * drift + sqdt * np.einsum("...ij,...j->...i",
                                                     np.broadcast_to(root_mat, (n_paths, d, d))
                                                     if root_mat.ndim == 2 else root_mat,
                                                     etas[:, n])
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(f"diffusion state non-finite at step {n}")
        if keep_path:
            out[:, n + 1] = x
    return (out, times) if keep_path else (x, times[-1])


def diffusion_at_grid(path: np.ndarray, euler_times: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Diffusion values aligned to chain grid times: nearest Euler time <= t_k."""
    idx = np.searchsorted(euler_times, grid.t + 1e-15, side="right") - 1
    idx = np.clip(idx, 0, len(euler_times) - 1)
    return path[:, idx]


def big_terminal_sample(step_fn, n_paths: int, n_steps: int, d: int,
                        master_seed: int, tag: int, x0) -> np.ndarray:
    """Terminal states of a Markov recursion run block-wise with per-block streams.

    ``step_fn(k, x, eta)`` advances one step.  Blocks of 16384 paths each use
    an independent stream and draw one [block, d] eta per step, so results are
    reproducible and independent of scheduling.
    """
    out = np.empty((n_paths, d))
    x0 = np.asarray(x0, dtype=float).reshape(d)
    for b in range(0, n_paths, BLOCK):
        size = min(BLOCK, n_paths - b)
        rng = block_rng(master_seed, tag, b // BLOCK)
        x = np.broadcast_to(x0, (size, d)).copy()
        for k in range(n_steps):
            x = step_fn(k, x, rng.standard_normal((size, d)))
        out[b:b + size] = x
    return out


def sample_V_terminal(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
                      mean: MeanTrajectory, params: TruncationParams, V0,
                      n_paths: int, master_seed: int) -> np.ndarray:
    """Terminal V values from a big block-wise run (density-estimation oracle input)."""
    tb = _mean_at_grid(mean, grid)
    M = grid.M
    g = np.array([float(schedule.gamma_shifted(k)) for k in range(M + 1)])
    sq_g = np.sqrt(g)

    def step(k, v, eta):
        chi_v = params.chi(v)
        F = f_matrix(model, grid, params, tb[k], k, v)
        arg = tb[k] + sq_g[k] * chi_v
        return (v + g[k + 1] * np.einsum("...ij,...j->...i", F, chi_v)
                - sq_g[k + 1] * model.xi(arg, eta))

    return big_terminal_sample(step, n_paths, M, model.dim, master_seed,
                               PROCESS_TAGS["chain"], V0)


def sample_U_terminal(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
                      mean: MeanTrajectory, theta0N, n_paths: int,
                      master_seed: int) -> np.ndarray:
    """Terminal renormalized-chain values from a big block-wise run (direct mode)."""
    tb = _mean_at_grid(mean, grid)
    M = grid.M
    g = np.array([float(schedule.gamma_shifted(k)) for k in range(M + 1)])

    def step(k, theta, eta):
        return theta - g[k + 1] * (model.mean_field(theta) + model.xi(theta, eta))

    theta_T = big_terminal_sample(step, n_paths, M, model.dim, master_seed,
                                  PROCESS_TAGS["chain"], theta0N)
    return (theta_T - tb[M]) / np.sqrt(g[M])


def sample_diffusion_terminal(model: ProblemModel, schedule: StepSchedule,
                              config: DiffusionConfig, X0, T: float,
                              n_paths: int, master_seed: int, *,
                              mean: MeanTrajectory | None = None,
                              grid: TimeGrid | None = None,
                              params: TruncationParams | None = None) -> np.ndarray:
    """Terminal diffusion values from a block-wise Euler-Maruyama run."""
    n_steps = math.ceil(T / config.dt)
    d = model.dim
    if grid is not None and config.dt > float(schedule.gamma_shifted(1)) + 1e-15:
        raise ValueError("dt must not exceed the first shifted gain")
    bar_a = schedule.bar_alpha()
    eye = np.eye(d)
    times = config.dt * np.arange(n_steps)
    sqdt = np.sqrt(config.dt)
    if config.kind == "stationary":
        if not check_lyapunov(model, schedule):
            raise ValueError("stationary diffusion requires the root drift matrix to be stable")
        drift_mat = bar_a * eye - model.jacobian(model.root)
        sqrtR_root = model.noise_sqrt(model.root)
    else:
        if mean is None:
            raise ValueError("limit/truncated diffusion needs the mean trajectory")
        tb_cache = mean.value(times)

    def step(n, x, eta):
        if config.kind == "limit":
            tb = tb_cache[n]
            drift = np.einsum("ij,...j->...i", bar_a * eye - model.jacobian(tb), x)
            root_mat = model.noise_sqrt(tb)
        elif config.kind == "truncated":
            k = int(grid.index_at(times[n]))
            F = f_matrix(model, grid, params, mean.value(grid.t[k]), k, x)
            drift = np.einsum("...ij,...j->...i", F, params.chi(x))
            root_mat = model.noise_sqrt(tb_cache[n])
        else:
            drift = np.einsum("ij,...j->...i", drift_mat, x)
            root_mat = sqrtR_root
        noise = np.einsum("...ij,...j->...i",
                          np.broadcast_to(root_mat, x.shape + (d,)) if root_mat.ndim == 2 else root_mat,
                          eta)
        return x + config.dt * drift + sqdt * noise

    tag = PROCESS_TAGS["X_star" if config.kind == "stationary"
                       else "X_trunc" if config.kind == "truncated" else "X"]
    return big_terminal_sample(step, n_paths, n_steps, d, master_seed, tag, X0)


def simulate_bundle(model: ProblemModel, schedule: StepSchedule, grid: TimeGrid,
                    mean: MeanTrajectory, params: TruncationParams | None,
                    processes, n_paths: int, master_seed: int, theta0,
                    dt: float | None = None) -> PathBundle:
    """Run the requested processes on a shared grid with coupled chain innovations."""
    d = model.dim
    theta0 = np.asarray(theta0, dtype=float).reshape(d)
    paths: dict = {}
    flags: dict = {}
    shared = False
    chain_procs = [p for p in processes if p in ("U", "V")]
    if chain_procs:
        etas = _path_etas(master_seed, PROCESS_TAGS["chain"], n_paths, grid.M, d)
        if "U" in chain_procs:
            U, fl = run_U(model, schedule, grid, mean, theta0, etas, mode="direct")
            paths["U"] = U
            flags["U"] = fl
        if "V" in chain_procs:
            if params is None:
                raise ValueError("V requires truncation params")
            V0 = _u0_of(theta0, mean, grid, schedule, model)
            paths["V"] = run_V(model, schedule, grid, mean, params, V0, etas)
        shared = len(chain_procs) == 2
    if "theta" in processes:
        paths["theta"], flags["theta"] = run_rm_paths(model, schedule, theta0, grid.M,
                                                      master_seed, n_paths)
    dt = dt if dt is not None else float(grid.gammas[-1]) / 2.0
    T = float(grid.t[-1])
    x0_diff = _u0_of(theta0, mean, grid, schedule, model)
    for name, kind in (("X", "limit"), ("X_trunc", "truncated"), ("X_star", "stationary")):
        if name in processes:
            cfg = DiffusionConfig(dt=dt, kind=kind)
            etas = _path_etas(master_seed, PROCESS_TAGS[name], n_paths,
                              math.ceil(T / dt), d)
            path, times = run_diffusion(model, schedule, cfg, x0_diff, T, etas,
                                        mean=mean, grid=grid, params=params)
            paths[name] = diffusion_at_grid(path, times, grid)
    return PathBundle(grid=grid, paths=paths, master_seed=master_seed,
                      innovations_shared=shared, flags=flags)
