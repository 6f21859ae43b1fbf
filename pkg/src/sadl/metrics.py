"""Density estimation from samples and distances between density fields, plus rate fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .parametrix.grids import DensityField, Grid1D, require_same_grid
from .schedules import TimeGrid


@dataclass
class DistanceReport:
    kind: str              # l1 | hellinger_sq | sup_path | grid_joint_l1_bound
    value: float
    stderr: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind in ("l1", "hellinger_sq") and not -1e-12 <= self.value <= 2.0 + 1e-9:
            raise ValueError(f"{self.kind} distance {self.value} outside [0, 2]")


def kde(samples, bandwidth: float | None = None, grid: Grid1D | None = None,
        s: float = 0.0, t: float = 0.0) -> DensityField:
    """Gaussian-kernel density estimate on the grid via FFT convolution of a fine histogram.

    bandwidth=None applies the n^(-1/5) normal-reference rule 1.06 * std * n^(-1/5).
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if len(samples) < 1000:
        raise ValueError("kde needs at least 1e3 samples")
    std = float(np.std(samples))
    if std == 0.0:
        if bandwidth is None:
            raise ValueError("degenerate samples need an explicit bandwidth")
        std = bandwidth
    h = bandwidth if bandwidth is not None else 1.06 * std * len(samples) ** (-0.2)
    grid = grid or Grid1D()
    x = grid.x
    dx = grid.dx
    edges = np.concatenate([x - dx / 2.0, [x[-1] + dx / 2.0]])
    counts, _ = np.histogram(samples, bins=edges)
    weights = counts / (len(samples) * dx)
    half = int(math.ceil(6.0 * h / dx))
    ker_x = np.arange(-half, half + 1) * dx
    ker = np.exp(-0.5 * (ker_x / h) ** 2)
    ker /= ker.sum()
    vals = np.convolve(weights, ker, mode="same")
    return DensityField(grid=grid, s=s, t=t, values=vals)


def l1_distance(f: DensityField, g: DensityField) -> float:
    """Trapezoid integral of |f - g| with tiny negative values clipped at zero."""
    grid = require_same_grid(f, g)
    return float(grid.trapz_weights() @ np.abs(f.clipped() - g.clipped()))


def hellinger_sq(f: DensityField, g: DensityField) -> float:
    """Trapezoid integral of (sqrt f - sqrt g)^2 with clipping as in the L1 distance."""
    grid = require_same_grid(f, g)
    diff = np.sqrt(f.clipped()) - np.sqrt(g.clipped())
    return float(grid.trapz_weights() @ diff ** 2)


def sup_path_distance(bundle, a: str, b: str) -> np.ndarray:
    """Per-path suprema over grid indices of the distance between two coupled processes."""
    if not bundle.innovations_shared:
        raise ValueError("sup-path distance needs innovation-coupled processes")
    pa, pb = bundle.paths[a], bundle.paths[b]
    return np.max(np.linalg.norm(pa - pb, axis=-1), axis=-1)


def binned_l1(samples_a, samples_b, lo: float = -10.0, hi: float = 10.0,
              n_bins: int = 256) -> float:
    """L1 distance between two empirical measures on a shared bin set."""
    edges = np.linspace(lo, hi, n_bins + 1)
    ma, _ = np.histogram(np.asarray(samples_a).ravel(), bins=edges)
    mb, _ = np.histogram(np.asarray(samples_b).ravel(), bins=edges)
    return float(np.abs(ma / len(np.asarray(samples_a).ravel())
                        - mb / len(np.asarray(samples_b).ravel())).sum())


def field_vs_samples_l1(fld: DensityField, samples, n_bins: int = 256) -> float:
    """L1 between a density field and an empirical sample, both aggregated to coarse bins."""
    samples = np.asarray(samples, dtype=float).ravel()
    grid = fld.grid
    edges = np.linspace(grid.x_min, grid.x_max, n_bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    emp_mass = counts / len(samples)
    w = grid.trapz_weights() * fld.clipped()
    which = np.clip(np.searchsorted(edges, grid.x, side="right") - 1, 0, n_bins - 1)
    fld_mass = np.bincount(which, weights=w, minlength=n_bins)
    return float(np.abs(fld_mass - emp_mass).sum())


def check_tau_spacing(taus, m_N: int, c: float = 4.0) -> bool:
    """Grid-spacing proportionality: every gap must lie within [1/(c m), c/m]."""
    taus = np.asarray(taus, dtype=float)
    gaps = np.diff(taus)
    return bool(np.all(gaps >= 1.0 / (c * m_N)) and np.all(gaps <= c / m_N))


def delta_envelope(schedule, m_N: int) -> float:
    """Analytic envelope for the grid-joint distance bound at the given shift.

    m^{1/4} (1_{beta<1} g1^{(1/beta-1)/2} + sqrt(ln(1/g1)) g1^{1/4}) + m ln^2(1/g1) sqrt(g1).
    """
    g1 = float(schedule.gamma_shifted(1))
    log_term = math.log(1.0 / g1)
    beta = schedule.beta
    first = m_N ** 0.25 * ((g1 ** ((1.0 / beta - 1.0) / 2.0) if beta < 1.0 else 0.0)
                           + math.sqrt(log_term) * g1 ** 0.25)
    return first + m_N * log_term ** 2 * math.sqrt(g1)


def grid_joint_l1_bound(transition_q, transition_p, start_density, taus,
                        grid: TimeGrid, x0: float, n_outer: int = 7) -> dict:
    """Telescoping upper bound on the joint L1 distance over an increasing time grid.

    ``taus`` are chain-grid indices tau_0 = 0 < ... < tau_m.  Each leg
    contributes the single-transition L1 between the two engines, averaged
    over the leg's start point with the first engine's density from
    (tau_0, x0) as the weight.  ``transition_q(i_idx, j_idx, x)`` and
    ``transition_p(i_idx, j_idx, x)`` return DensityFields; ``start_density(i_idx)``
    returns the weighting field.
    """
    taus = [int(k) for k in taus]
    m_N = len(taus) - 1
    if m_N < 1 or taus[0] != 0:
        raise ValueError("need tau_0 = 0 and at least one leg")
    times = np.asarray(grid.t)[taus]
    span = float(times[-1])
    if not check_tau_spacing(times / span, m_N):
        raise ValueError("grid spacing violates the proportionality window (factor 4)")
    total = 0.0
    legs = []
    for leg in range(1, m_N + 1):
        i_idx, j_idx = taus[leg - 1], taus[leg]
        if leg == 1:
            contrib = l1_distance(transition_q(i_idx, j_idx, x0),
                                  transition_p(i_idx, j_idx, x0))
        else:
            weight_field = start_density(i_idx)
            xs, ws = _outer_nodes(weight_field, n_outer)
            contrib = 0.0
            for x_node, w_node in zip(xs, ws):
                contrib += w_node * l1_distance(transition_q(i_idx, j_idx, float(x_node)),
                                                transition_p(i_idx, j_idx, float(x_node)))
        legs.append(contrib)
        total += contrib
    return {"bound": total, "legs": legs}


def _outer_nodes(weight_field: DensityField, n_outer: int):
    """Deterministic quantile nodes and masses of a weighting density."""
    w = weight_field.grid.trapz_weights() * weight_field.clipped()
    cdf = np.cumsum(w)
    total = cdf[-1]
    qs = (np.arange(n_outer) + 0.5) / n_outer
    nodes = np.interp(qs * total, cdf, weight_field.grid.x)
    masses = np.full(n_outer, total / n_outer)
    return nodes, masses


def rate_fit(Ns, values, correct_log_sq: bool = False):
    """Least-squares slope of ln(value) against ln(N).

    With correct_log_sq the values are divided by ln^2(N) first, which removes
    the logarithmic factor expected on top of the power law.
    Returns (slope, intercept, r_squared).
    """
    Ns = np.asarray(Ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(Ns) < 3:
        raise ValueError("rate fit needs at least 3 points")
    if np.any(values <= 0):
        raise ValueError("rate fit needs positive values")
    y = np.log(values / np.log(Ns) ** 2) if correct_log_sq else np.log(values)
    x = np.log(Ns)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    fitted = A @ coef
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, intercept, r2


def bootstrap_stderr(samples, statistic, n_boot: int = 200, seed: int = 0) -> float:
    """Bootstrap standard error of a statistic of a 1-d sample, replicate streams derived from seed."""
    samples = np.asarray(samples, dtype=float)
    vals = np.empty(n_boot)
    for b in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        idx = rng.integers(0, len(samples), len(samples))
        vals[b] = statistic(samples[idx])
    return float(np.std(vals, ddof=1))
