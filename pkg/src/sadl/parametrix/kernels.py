"""Scalar (d = 1) kernel machinery: frozen Gaussian densities, drift-difference
kernels for the truncated diffusion, and closed-form chain kernels for Gaussian noise."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import UnsupportedNoise
from ..flows import MeanTrajectory, sigma_bar, solve_mean_ode
from ..model import ProblemModel
from ..schedules import StepSchedule, TimeGrid, time_grid
from ..truncation import TruncationParams
from .grids import Grid1D, gaussian_g

_GL16_NODES, _GL16_WEIGHTS = np.polynomial.legendre.leggauss(16)
_GL16_01 = (0.5 * (_GL16_NODES + 1.0), 0.5 * _GL16_WEIGHTS)
_GH20_NODES, _GH20_WEIGHTS = np.polynomial.hermite_e.hermegauss(20)
_GH20_WEIGHTS = _GH20_WEIGHTS / np.sqrt(2.0 * np.pi)
_GL10_NODES, _GL10_WEIGHTS = np.polynomial.legendre.leggauss(10)
_GL10_01 = (0.5 * (_GL10_NODES + 1.0), 0.5 * _GL10_WEIGHTS)


class TruncatedDrift1D:
    """Scalar drift b(t, x) = F(t_k, x) chi(x), piecewise constant in t on the gain grid.

    Precomputes the per-step scalars; for constant-Jacobian models the
    delta-average collapses to that constant, otherwise it is a vectorized
    Gauss-Legendre(16) average.  ``zero=True`` builds the drift-free variant
    used to unit-test the kernel machinery (flow identity, vanishing kernels).
    """

    def __init__(self, model: ProblemModel, grid: TimeGrid, params: TruncationParams,
                 mean: MeanTrajectory, zero: bool = False):
        if model.dim != 1:
            raise ValueError("the density engine is one-dimensional")
        self.model = model
        self.grid = grid
        self.params = params
        self.mean = mean
        self.zero = zero
        sched = grid.schedule
        M = grid.M
        self.gammas = np.array([float(sched.gamma_shifted(k)) for k in range(M + 2)])
        self.alphas = np.array([float(sched.alpha_step(k)) for k in range(M + 1)])
        self.bar_alpha = sched.bar_alpha()
        self.tb = np.atleast_2d(mean.value(grid.t))[:, 0]
        self.const_jac = None
        if model.kind == "linear_gaussian":
            self.const_jac = float(model.jacobian(model.root)[0, 0])

    def _jac_avg(self, k: int, chi_x: np.ndarray) -> np.ndarray:
        if self.const_jac is not None:
            return np.full_like(chi_x, self.const_jac)
        nodes, weights = _GL16_01
        base = self.tb[k] + nodes[:, None] * (np.sqrt(self.gammas[k]) * chi_x)[None, :]
        jac = self.model.jacobian(base[..., None])[..., 0, 0]
        return weights @ jac

    def f_scalar(self, k: int, x) -> np.ndarray:
        """Truncated drift matrix (a scalar in d = 1) at grid step k."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.zero:
            return np.zeros_like(x)
        a = self.params.a
        r = np.abs(x)
        chi_x = self.params.chi(x[:, None])[:, 0]
        scal = np.where(r <= a, self.alphas[k], self.bar_alpha)
        ratio = np.where(r >= a, 1.0, np.sqrt(self.gammas[k] / self.gammas[k + 1]))
        return scal - ratio * self._jac_avg(k, chi_x)

    def chi(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.zero:
            return x
        return self.params.chi(x[:, None])[:, 0]

    def b(self, k: int, x) -> np.ndarray:
        """Drift value F(t_k, x) chi(x) at grid step k, vectorized over x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.zero:
            return np.zeros_like(x)
        return self.f_scalar(k, x) * self.params.chi(x[:, None])[:, 0]

    def b_at(self, u: float, x) -> np.ndarray:
        return self.b(int(self.grid.index_at(u)), x)

    def flow_to(self, target: float, times, y) -> np.ndarray:
        """Backward flow values theta_{u, target}(y) at the requested times <= target.

        Integrates the piecewise-frozen drift interval by interval with RK4
        (one step per gain interval; local error (L*gamma)^5).  Returns an
        array [len(times), len(y)].
        """
        times = np.asarray(times, dtype=float)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.any(times > target + 1e-12):
            raise ValueError("flow_to integrates backward: times must not exceed target")
        out = np.empty((len(times), len(y)))
        if self.zero:
            out[:] = y[None, :]
            return out
        order = np.argsort(-times)  # descending
        cur = y.copy()
        u = float(target)
        for pos in order:
            t_req = float(times[pos])
            cur = self._integrate_backward(cur, u, t_req)
            u = t_req
            out[pos] = cur
        return out

    def _integrate_backward(self, y: np.ndarray, u_from: float, u_to: float) -> np.ndarray:
        cur = y
        u = u_from
        while u - u_to > 1e-14:
            k = int(self.grid.index_at(u - 1e-14))
            left = max(float(self.grid.t[k]), u_to)
            h = left - u  # negative
            cur = self._rk4_step(k, cur, h)
            u = left
        return cur

    def _rk4_step(self, k: int, y: np.ndarray, h: float) -> np.ndarray:
        k1 = self.b(k, y)
        k2 = self.b(k, y + 0.5 * h * k1)
        k3 = self.b(k, y + 0.5 * h * k2)
        k4 = self.b(k, y + h * k3)
        return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class ParametrixContext:
    """Everything the one-dimensional density engine needs for one model/shift pair."""

    model: ProblemModel
    schedule: StepSchedule
    grid: TimeGrid
    params: TruncationParams
    mean: MeanTrajectory
    space: Grid1D
    drift: TruncatedDrift1D

    @classmethod
    def build(cls, model: ProblemModel, schedule: StepSchedule, T: float,
              space: Grid1D | None = None, theta0=None, zero_drift: bool = False,
              mean: MeanTrajectory | None = None) -> "ParametrixContext":
        if model.dim != 1:
            raise ValueError("the density engine is one-dimensional")
        space = space or Grid1D()
        grid = time_grid(schedule, T)
        params = TruncationParams.from_schedule(schedule)
        if mean is None:
            theta0 = model.root if theta0 is None else theta0
            mean = solve_mean_ode(model, theta0, float(grid.t[-1]) + 0.01)
        drift = TruncatedDrift1D(model, grid, params, mean, zero=zero_drift)
        return cls(model=model, schedule=schedule, grid=grid, params=params,
                   mean=mean, space=space, drift=drift)

    def sigma(self, s: float, t: float) -> float:
        """Scalar covariance time integral over [s, t] along the mean path."""
        return float(sigma_bar(self.model, self.mean, s, t)[0, 0])

    def R_at_mean(self, u) -> np.ndarray:
        tb = np.atleast_2d(self.mean.value(np.atleast_1d(np.asarray(u, dtype=float))))
        return self.model.noise_cov(tb)[..., 0, 0]


def tilde_q(ctx: ParametrixContext, s: float, t: float, x, y):
    """Frozen Gaussian transition value: displacement flow(s<-t)(y) - x, variance sigma(s,t).

    Arguments are ordered (earlier, later); y may be an array.
    """
    if not s < t:
        raise ValueError("need s < t")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    flow_s = ctx.drift.flow_to(t, [s], y)[0]
    var = ctx.sigma(s, t)
    out = gaussian_g(var, flow_s - np.asarray(x, dtype=float))
    return out if out.size > 1 else float(out[0])


def kernel_H(ctx: ParametrixContext, s: float, t: float, x, y):
    """Drift-difference kernel of the truncated diffusion.

    In d = 1 the second-order generator parts cancel, leaving
    (b(s,x) - b(s, flow(y))) times the space derivative of the frozen Gaussian.
    """
    if not s < t:
        raise ValueError("need s < t")
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    flow_s = ctx.drift.flow_to(t, [s], y_arr)[0]
    var = ctx.sigma(s, t)
    k = int(ctx.grid.index_at(s))
    diff = ctx.drift.b(k, x_arr) - ctx.drift.b(k, flow_s)
    w = flow_s - x_arr
    out = diff * (w / var) * gaussian_g(var, w)
    return out if out.size > 1 else float(out[0])


class ChainFrozenTable:
    """Backward frozen-flow rows and innovation covariance sums for one target index.

    Row l holds theta_{t_l, t_j}(y) on the y set; ``Wcum[l]`` is the covariance
    of the innovation sum from l to j (zero at l = j).  Gaussian noise only.
    """

    def __init__(self, ctx: ParametrixContext, j: int, y):
        if not ctx.model.gaussian_noise:
            raise UnsupportedNoise(
                "closed-form chain densities need Gaussian innovations; "
                "use the sample-based density estimate instead")
        self.ctx = ctx
        self.j = j
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        grid, drift = ctx.grid, ctx.drift
        t = grid.t
        self.flow = drift.flow_to(float(t[j]), t[: j + 1], self.y)  # [j+1, ny]
        g = drift.gammas
        ny = len(self.y)
        self.Wcum = np.zeros((j + 1, ny))
        tb = drift.tb
        chi = ctx.params.chi if not drift.zero else (lambda v: v)
        acc = np.zeros(ny)
        for l in range(j - 1, -1, -1):
            arg = tb[l] + chi(self.flow[l][:, None])[:, 0] * np.sqrt(g[l])
            R_l = ctx.model.noise_cov(arg[:, None])[..., 0, 0]
            acc = acc + g[l + 1] * R_l
            self.Wcum[l] = acc

    def tilde_p(self, i: int, x):
        """Frozen-chain transition density value p_S(theta_{t_i,t_j}(y) - x)."""
        if not 0 <= i < self.j:
            raise ValueError("need 0 <= i < j")
        x = np.asarray(x, dtype=float)
        return gaussian_g(self.Wcum[i], self.flow[i] - x)


def tilde_p(ctx: ParametrixContext, i: int, j: int, y, x):
    """Stand-alone frozen-chain density at (t_i, t_j): builds the table for one y."""
    table = ChainFrozenTable(ctx, j, y)
    out = table.tilde_p(i, np.asarray(x, dtype=float))
    return out if out.size > 1 else float(out[0])


def _one_step_stats(ctx: ParametrixContext, i: int, x):
    """Mean shift and variance of the chain's one-step transition from x at step i."""
    drift = ctx.drift
    g = drift.gammas
    chi_x = drift.chi(x)
    b_x = drift.b(i, x)
    arg = drift.tb[i] + np.sqrt(g[i]) * chi_x
    R_x = ctx.model.noise_cov(np.atleast_1d(arg)[:, None])[..., 0, 0]
    return g[i + 1] * b_x, g[i + 1] * R_x


def kernel_scriptK(ctx: ParametrixContext, i: int, j: int, x, table: ChainFrozenTable):
    """One-step generator difference applied to the frozen-chain density (Gaussian closed form).

    Evaluates (1/g_{i+1}) [ conv(one-step from x, frozen tail) - frozen density ],
    which is the defining formula; at j = i + 1 the empty tail is a point mass
    and the value reduces to the one-step density difference over the gain.
    """
    if not 0 <= i < j <= table.j:
        raise ValueError("need 0 <= i < j <= table target")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = ctx.drift.gammas
    shift, var_one = _one_step_stats(ctx, i, x)
    theta_next = table.flow[i + 1]    # [ny]
    W_next = table.Wcum[i + 1]        # zero row when i + 1 == j (point-mass tail)
    # broadcast [nx, ny]
    first = gaussian_g(W_next[None, :] + var_one[:, None],
                       theta_next[None, :] - x[:, None] - shift[:, None])
    second = gaussian_g(table.Wcum[i][None, :], table.flow[i][None, :] - x[:, None])
    out = (first - second) / g[i + 1]
    return out if out.size > 1 else float(out[0, 0])


def kernel_scriptK_terms(ctx: ParametrixContext, i: int, j: int, x: float,
                         table: ChainFrozenTable, y_index: int = 0) -> dict:
    """Moment decomposition of the one-step generator difference (test oracle).

    Splits the kernel into the drift-difference part against the frozen tail
    density plus first/second-moment corrections and the two third-order
    Taylor remainders (Gauss-Hermite over the innovation, Gauss-Legendre over
    the Taylor parameter).  Exact for Gaussian noise up to quadrature error.
    """
    drift = ctx.drift
    g = drift.gammas
    gam = g[i + 1]
    x = float(x)
    theta_i = float(table.flow[i][y_index])
    theta_next = float(table.flow[i + 1][y_index])
    W_next = float(table.Wcum[i + 1][y_index]) if i + 1 < table.j else 0.0
    if i + 1 == table.j:
        W_next = 0.0
    if W_next <= 0:
        raise ValueError("moment decomposition needs j > i + 1 (positive tail variance)")
    b_x = float(drift.b(i, np.array([x]))[0])
    b_y = float(drift.b(i, np.array([theta_i]))[0])
    delta_flow = (theta_next - theta_i) / gam  # average drift over the step
    arg_x = drift.tb[i] + math.sqrt(g[i]) * float(drift.chi(np.array([x]))[0])
    arg_y = drift.tb[i] + math.sqrt(g[i]) * float(drift.chi(np.array([theta_i]))[0])
    R_x = float(ctx.model.noise_cov(np.array([[arg_x]]))[0, 0, 0])
    R_y = float(ctx.model.noise_cov(np.array([[arg_y]]))[0, 0, 0])

    def phi_derivs(z):
        u = theta_next - z
        gval = gaussian_g(W_next, u)
        d1 = (u / W_next) * gval
        d2 = (u * u / W_next ** 2 - 1.0 / W_next) * gval
        d3 = (u ** 3 / W_next ** 3 - 3.0 * u / W_next ** 2) * gval
        return gval, d1, d2, d3

    _, d1, d2, _ = phi_derivs(x)
    K = (b_x - b_y) * d1
    T1 = (b_y - delta_flow) * d1
    T2 = 0.5 * (R_x - R_y) * d2
    delta1 = math.sqrt(gam) * b_x
    delta2 = math.sqrt(gam) * delta_flow
    T3 = 0.5 * (delta1 ** 2 - delta2 ** 2) * d2

    def remainder(R_val, delta_shift):
        nodes_v = _GH20_NODES * math.sqrt(R_val)
        vals = np.zeros_like(nodes_v)
        dl_nodes, dl_weights = _GL10_01
        for vi, v in enumerate(nodes_v):
            zpts = x + dl_nodes * math.sqrt(gam) * (v + delta_shift)
            d3_vals = phi_derivs(zpts)[3]
            vals[vi] = (v + delta_shift) ** 3 * np.sum(dl_weights * (1.0 - dl_nodes) ** 2 * d3_vals)
        return 0.5 * math.sqrt(gam) * float(_GH20_WEIGHTS @ vals)

    T41 = remainder(R_x, delta1)
    T42 = remainder(R_y, delta2)
    total = K + T1 + T2 + T3 + T41 - T42
    return {"K": K, "T1": T1, "T2": T2, "T3": T3, "T41": T41, "T42": T42, "total": total}
