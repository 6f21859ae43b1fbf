"""Space grids, tabulated density fields, Gaussian kernels, and polynomial majorants (d = 1)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GridMismatch, MassLeak


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [x_min, x_max] with n points."""

    x_min: float = -10.0
    x_max: float = 10.0
    n: int = 2048

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be below x_max")
        if self.n < 64:
            raise ValueError("need at least 64 grid points")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    def trapz_weights(self) -> np.ndarray:
        w = np.full(self.n, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w


@dataclass
class DensityField:
    """Function values on a Grid1D at a fixed time pair (s, t)."""

    grid: Grid1D
    s: float
    t: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError("values must match the grid size")

    def mass(self) -> float:
        return float(self.grid.trapz_weights() @ self.values)

    def boundary_mass(self) -> float:
        """Largest absolute value on the outer 1% of grid points (leak indicator)."""
        k = max(1, self.grid.n // 100)
        return float(max(np.max(np.abs(self.values[:k])), np.max(np.abs(self.values[-k:]))))

    def clipped(self) -> np.ndarray:
        """Values with tiny negative quadrature noise removed (for distances)."""
        if np.any(self.values < -1e-8):
            raise ValueError("field has negative values beyond quadrature noise")
        return np.clip(self.values, 0.0, None)

    def check_density(self, mass_tol: float = 1e-3, leak_tol: float = 1e-8) -> None:
        if abs(self.mass() - 1.0) > mass_tol:
            raise ValueError(f"field mass {self.mass():.6f} deviates from 1 beyond {mass_tol}")
        if self.boundary_mass() > leak_tol:
            raise MassLeak(f"boundary density {self.boundary_mass():.3g} exceeds {leak_tol}")


def require_same_grid(f: DensityField, g: DensityField) -> Grid1D:
    if f.grid != g.grid:
        raise GridMismatch("density fields live on different grids")
    return f.grid


def gaussian_g(variance, z):
    """Centered scalar Gaussian density with the given variance; variance must be positive."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variance must be positive")
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z / variance) / np.sqrt(2.0 * np.pi * variance)


def majorant_Q(r: float, z):
    """Normalized polynomial-decay kernel c_r (1+|z|)^(-r) with c_r = (r-1)/2 in d = 1."""
    if not r > 1:
        raise ValueError("majorant order must exceed 1 for integrability")
    z = np.asarray(z, dtype=float)
    return 0.5 * (r - 1.0) * (1.0 + np.abs(z)) ** (-r)


def majorant_scriptQ(m: float, t, x):
    """Time-scaled majorant t^(-1/2) Q_m(t^(-1/2) x)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time argument must be positive")
    rt = np.sqrt(t)
    return majorant_Q(m, np.asarray(x, dtype=float) / rt) / rt
