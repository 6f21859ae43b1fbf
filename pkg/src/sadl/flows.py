"""Mean ODE, linear and truncated flow maps, defect terms, and the covariance time integral."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import NumericalFailure
from .model import ProblemModel
from .schedules import StepSchedule, TimeGrid
from .truncation import TruncationParams, f_matrix

_GL8_NODES, _GL8_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class MeanTrajectory:
    """Dense solution of the mean ODE d theta/dt = -h(theta) with cubic evaluation."""

    times: np.ndarray
    values: np.ndarray
    _spline: CubicSpline

    def value(self, t):
        return self._spline(t)

    def derivative(self, t):
        return self._spline(t, 1)

    @property
    def t_max(self) -> float:
        return float(self.times[-1])


def _rk4(f, y0, t0: float, t1: float, dt_max: float):
    """Classical RK4 from t0 to t1 (either direction) with fixed step size <= dt_max."""
    y = np.array(y0, dtype=float)
    span = t1 - t0
    if span == 0.0:
        return y
    n = max(1, math.ceil(abs(span) / dt_max))
    h = span / n
    u = t0
    for _ in range(n):
        k1 = f(u, y)
        k2 = f(u + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(u + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(u + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        u += h
    if not np.all(np.isfinite(y)):
        raise NumericalFailure("flow integration produced non-finite state")
    return y


def solve_mean_ode(model: ProblemModel, theta0, T: float, dt: float = 1e-3) -> MeanTrajectory:
    """RK4 solve of the mean ODE on [0, T + dt] so the top grid time stays interior."""
    if not (dt > 0 and T > 0):
        raise ValueError("dt and T must be positive")
    theta0 = np.asarray(theta0, dtype=float).reshape(model.dim)
    n = math.ceil(T / dt) + 1
    times = np.linspace(0.0, n * dt, n + 1)
    values = np.empty((n + 1, model.dim))
    values[0] = theta0
    y = theta0.copy()
    for i in range(n):
        y = _rk4(lambda u, v: -model.mean_field(v), y, times[i], times[i + 1], dt)
        if not np.all(np.isfinite(y)):
            raise NumericalFailure(f"mean ODE diverged at t={times[i + 1]:.4g}")
        values[i + 1] = y
    spline = CubicSpline(times, values, axis=0)
    return MeanTrajectory(times=times, values=values, _spline=spline)


def flow_dt(schedule: StepSchedule | None) -> float:
    """Fixed RK4 step for flow maps: min(1e-3, gamma_1^N / 4) when a shift is set."""
    if schedule is None:
        return 1e-3
    return min(1e-3, float(schedule.gamma_shifted(1)) / 4.0)


def limit_flow(model: ProblemModel, mean: MeanTrajectory, t: float, s: float, y,
               schedule: StepSchedule, jacobian_sign: float = -1.0,
               dt_max: float | None = None):
    """Linear flow of the limiting dynamics: d theta/dt = (bar_alpha I + sign * Dh(mean_t)) theta.

    The default sign -1 makes this the deterministic flow of the limiting
    SDE's drift; +1 selects the opposite convention (see module README notes).
    Batched over y with shape [..., d].
    """
    bar_a = schedule.bar_alpha()
    dt_max = flow_dt(schedule) if dt_max is None else dt_max

    def rhs(u, v):
        mat = bar_a * np.eye(model.dim) + jacobian_sign * model.jacobian(mean.value(u))
        return np.einsum("ij,...j->...i", mat, v)

    return _rk4(rhs, np.asarray(y, dtype=float), s, t, dt_max)


def truncated_flow(model: ProblemModel, grid: TimeGrid, params: TruncationParams,
                   mean: MeanTrajectory, t: float, s: float, y,
                   dt_max: float | None = None):
    """Flow of the truncated drift, piecewise-constant in time on the gain grid.

    The drift matrix is frozen at the left endpoint of the grid interval
    containing the current time, for forward and backward integration alike.
    Batched over y with shape [..., d].
    """
    dt_max = flow_dt(grid.schedule) if dt_max is None else dt_max

    # integrate interval by interval so each RK4 stage sees one frozen matrix
    y_cur = np.asarray(y, dtype=float)
    if t == s:
        return y_cur.copy()
    direction = 1 if t > s else -1
    u = s
    while (t - u) * direction > 1e-15:
        k = int(grid.index_at(u if direction > 0 else u - 1e-15))
        left = grid.t[k]
        right = grid.t[k + 1] if k + 1 <= grid.M else np.inf
        u_next = min(right, t) if direction > 0 else max(left, t)
        tb = mean.value(grid.t[k])

        def rhs(u_stage, v, tb=tb, k=k):
            F = f_matrix(model, grid, params, tb, k, v)
            return np.einsum("...ij,...j->...i", F, params.chi(v))

        y_cur = _rk4(rhs, y_cur, u, u_next, dt_max)
        if u_next == u:
            break
        u = u_next
    return y_cur


def flow(model: ProblemModel, schedule: StepSchedule, kind: str, t: float, s: float, y,
         *, mean: MeanTrajectory, grid: TimeGrid | None = None,
         params: TruncationParams | None = None, jacobian_sign: float = -1.0,
         dt_max: float | None = None):
    """Evaluate theta_{t,s}(y) for the limit or truncated flow kind."""
    if kind == "limit":
        return limit_flow(model, mean, t, s, y, schedule, jacobian_sign, dt_max)
    if kind == "truncated":
        if grid is None or params is None:
            raise ValueError("truncated flow needs the gain grid and truncation params")
        return truncated_flow(model, grid, params, mean, t, s, y, dt_max)
    raise ValueError(f"unknown flow kind {kind!r}")


def truncated_flow_table(model: ProblemModel, grid: TimeGrid, params: TruncationParams,
                         mean: MeanTrajectory, j: int, y_batch,
                         dt_max: float | None = None) -> np.ndarray:
    """Backward flow values theta_{t_l, t_j}(y) for every l = 0..j at once.

    Returns an array [j+1, ..., d]; row l holds the flow at grid time t_l.
    One backward sweep per target index makes the chain-density tables cheap.
    """
    dt_max = flow_dt(grid.schedule) if dt_max is None else dt_max
    y_batch = np.asarray(y_batch, dtype=float)
    out = np.empty((j + 1,) + y_batch.shape)
    out[j] = y_batch
    cur = y_batch.copy()
    for k in range(j - 1, -1, -1):
        tb = mean.value(grid.t[k])

        def rhs(u, v, tb=tb, k=k):
            F = f_matrix(model, grid, params, tb, k, v)
            return np.einsum("...ij,...j->...i", F, params.chi(v))

        cur = _rk4(rhs, cur, grid.t[k + 1], grid.t[k], dt_max)
        out[k] = cur
    return out


def beta_defect(model: ProblemModel, mean: MeanTrajectory, grid: TimeGrid, k: int) -> np.ndarray:
    """Euler defect of the mean path over grid step k -> k+1, scaled by sqrt(g_{k+1})."""
    g_k1 = float(grid.gamma(k + 1))
    tb_k = mean.value(grid.t[k])
    tb_k1 = mean.value(grid.t[k + 1])
    return np.sqrt(g_k1) * (-model.mean_field(tb_k) - (tb_k1 - tb_k) / g_k1)


def beta_defects(model: ProblemModel, mean: MeanTrajectory, grid: TimeGrid) -> np.ndarray:
    """All defects beta_{k+1} for k = 0..M-1 as an [M, d] array."""
    tb = mean.value(grid.t)
    g = grid.gammas
    diffs = (tb[1:] - tb[:-1]) / g[:, None]
    return np.sqrt(g)[:, None] * (-model.mean_field(tb[:-1]) - diffs)


def sigma_bar(model: ProblemModel, mean: MeanTrajectory, t: float, s: float,
              panel: float = 0.01) -> np.ndarray:
    """Covariance time integral int_t^s R(mean_u) du by composite Gauss-Legendre(8).

    Requires t < s; the result is symmetric positive definite because R is.
    """
    if not t < s:
        raise ValueError("sigma_bar needs t < s")
    n = max(1, math.ceil((s - t) / panel))
    edges = np.linspace(t, s, n + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    # nodes: [n, 8]
    nodes = mids[:, None] + half[:, None] * _GL8_NODES[None, :]
    weights = half[:, None] * _GL8_WEIGHTS[None, :]
    R_vals = model.noise_cov(mean.value(nodes.ravel()))
    R_vals = R_vals.reshape(n * 8, model.dim, model.dim)
    out = np.tensordot(weights.ravel(), R_vals, axes=(0, 0))
    out = 0.5 * (out + out.T)
    eigmin = float(np.linalg.eigvalsh(out).min())
    if eigmin <= 0:
        raise NumericalFailure("covariance time integral is not positive definite")
    return out


def mean_residual(model: ProblemModel, mean: MeanTrajectory, ts) -> float:
    """Max norm of d theta/dt + h(theta) on a check grid (mean ODE residual)."""
    ts = np.asarray(ts, dtype=float)
    resid = mean.derivative(ts) + model.mean_field(mean.value(ts))
    return float(np.max(np.linalg.norm(np.atleast_2d(resid), axis=-1)))
