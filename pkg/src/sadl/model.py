"""Problem definitions: mean field h, Jacobian, noise covariance and samplers.

All callables are batched: they accept theta of shape [..., d] and return
[..., d] (mean field) or [..., d, d] (Jacobian, covariance, covariance root).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EigenSolverFailure
from .schedules import StepSchedule

Array = np.ndarray


@dataclass(frozen=True)
class ProblemModel:
    """A root-finding problem driven by noisy observations of the mean field.

    ``sampler(theta, rng)`` draws one observation with mean ``mean_field(theta)``
    and covariance ``noise_cov(theta)``.  ``noise_sqrt`` is the symmetric
    square root of the covariance, used for batched centered draws.
    ``gaussian_noise`` marks models whose centered noise is exactly Gaussian,
    which unlocks closed-form chain densities.
    """

    dim: int
    mean_field: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]
    noise_cov: Callable[[Array], Array]
    noise_sqrt: Callable[[Array], Array]
    root: Array
    kind: str = "custom"
    gaussian_noise: bool = False

    def sample_H(self, theta, rng: np.random.Generator) -> Array:
        """One observation draw at theta (batched over leading axes of theta)."""
        theta = np.asarray(theta, dtype=float)
        eta = rng.standard_normal(theta.shape)
        return self.mean_field(theta) + self.xi(theta, eta)

    def xi(self, theta, eta) -> Array:
        """Centered noise: covariance-root at theta applied to standard normals eta."""
        root = self.noise_sqrt(np.asarray(theta, dtype=float))
        return np.einsum("...ij,...j->...i", root, np.asarray(eta, dtype=float))


def _sym_sqrt(mat: Array) -> Array:
    w, v = np.linalg.eigh(mat)
    if np.any(w < -1e-12):
        raise ValueError("covariance must be positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def linear_gaussian(a_mat, root=None, noise_cov=None) -> ProblemModel:
    """Linear mean field h(theta) = A (theta - root) with Gaussian noise of constant covariance."""
    a_mat = np.atleast_2d(np.asarray(a_mat, dtype=float))
    d = a_mat.shape[0]
    if a_mat.shape != (d, d):
        raise ValueError(f"a_mat must be square, got {a_mat.shape}")
    root = np.zeros(d) if root is None else np.asarray(root, dtype=float).reshape(d)
    cov = np.eye(d) if noise_cov is None else np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if cov.shape != (d, d) or not np.allclose(cov, cov.T):
        raise ValueError("noise_cov must be a symmetric d x d matrix")
    cov_root = _sym_sqrt(cov)

    def mean_field(theta):
        return np.einsum("ij,...j->...i", a_mat, np.asarray(theta, dtype=float) - root)

    def jacobian(theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(a_mat, theta.shape[:-1] + (d, d))

    def noise_cov_fn(theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(cov, theta.shape[:-1] + (d, d))

    def noise_sqrt_fn(theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(cov_root, theta.shape[:-1] + (d, d))

    return ProblemModel(dim=d, mean_field=mean_field, jacobian=jacobian,
                        noise_cov=noise_cov_fn, noise_sqrt=noise_sqrt_fn,
                        root=root, kind="linear_gaussian", gaussian_noise=True)


def sine_perturbed() -> ProblemModel:
    """Scalar model h(theta) = theta + 0.5 sin(theta) with state-dependent noise variance.

    The derivative 1 + 0.5 cos(theta) stays in [0.5, 1.5] and the noise
    variance R(theta) = 1 + 0.2 sin^2(theta) stays in [1, 1.2]; the unique
    root is 0.
    """

    def mean_field(theta):
        theta = np.asarray(theta, dtype=float)
        return theta + 0.5 * np.sin(theta)

    def jacobian(theta):
        theta = np.asarray(theta, dtype=float)
        return (1.0 + 0.5 * np.cos(theta))[..., None]

    def noise_cov_fn(theta):
        theta = np.asarray(theta, dtype=float)
        return (1.0 + 0.2 * np.sin(theta) ** 2)[..., None]

    def noise_sqrt_fn(theta):
        theta = np.asarray(theta, dtype=float)
        return np.sqrt(1.0 + 0.2 * np.sin(theta) ** 2)[..., None]

    return ProblemModel(dim=1, mean_field=mean_field, jacobian=jacobian,
                        noise_cov=noise_cov_fn, noise_sqrt=noise_sqrt_fn,
                        root=np.zeros(1), kind="sine_perturbed", gaussian_noise=True)


def check_lyapunov(model: ProblemModel, schedule: StepSchedule) -> bool:
    """True iff every eigenvalue of bar_alpha*I - Dh(root) has strictly negative real part.

    This is the stability condition for the stationary limiting diffusion,
    stated with the sign convention of its drift matrix.
    """
    drift = schedule.bar_alpha() * np.eye(model.dim) - model.jacobian(model.root)
    try:
        eigvals = np.linalg.eigvals(drift)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverFailure(f"eigenvalue solve failed: {exc}") from exc
    return bool(np.all(eigvals.real < 0))


def check_inward(model: ProblemModel, delta: float, theta_samples) -> bool:
    """True iff <theta - root, h(theta)> >= delta * |theta - root|^2 on every sample.

    An inward mean field makes -h point toward the root with margin delta,
    so the mean flow contracts at rate at least delta.
    """
    samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    diff = samples - model.root
    lhs = np.einsum("...i,...i->...", diff, model.mean_field(samples))
    rhs = delta * np.einsum("...i,...i->...", diff, diff)
    return bool(np.all(lhs >= rhs - 1e-12))


def inward_schedule_ok(schedule: StepSchedule, delta: float) -> bool:
    """Margin condition tying delta to the gain schedule.

    liminf_k (2 delta g_k/g_{k+1} + (g_{k+1}-g_k)/g_{k+1}^2) must be positive:
    for the power-law gains this holds for every delta > 0 when beta < 1 and
    exactly for delta > beta/(2A) when beta = 1.
    """
    if delta <= 0:
        return False
    if schedule.beta < 1.0:
        return True
    return delta > schedule.beta / (2.0 * schedule.A)


def fd_jacobian(model: ProblemModel, theta, step: float = 1e-5) -> Array:
    """Central finite-difference Jacobian of the mean field (validation oracle)."""
    theta = np.asarray(theta, dtype=float)
    d = model.dim
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        cols.append((model.mean_field(theta + e) - model.mean_field(theta - e)) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass
class ModelValidationReport:
    mean_ok: bool
    cov_ok: bool
    jacobian_ok: bool
    root_ok: bool
    max_mean_z: float
    max_cov_z: float
    max_jac_rel_err: float

    @property
    def all_ok(self) -> bool:
        return self.mean_ok and self.cov_ok and self.jacobian_ok and self.root_ok


def validate_model(model: ProblemModel, rng: np.random.Generator,
                   theta_grid=None, n_draws: int = 100_000,
                   z_tol: float = 5.0) -> ModelValidationReport:
    """Statistical validation of a model's sampler against its declared moments.

    At each grid point the sample mean of H must sit within z_tol standard
    errors of h and the sample covariance within z_tol standard-error bands
    of R; the hand-coded Jacobian is checked against finite differences.
    """
    if theta_grid is None:
        theta_grid = [model.root, model.root + 1.0, model.root - 0.5]
    max_mean_z = 0.0
    max_cov_z = 0.0
    max_jac = 0.0
    for theta in theta_grid:
        theta = np.asarray(theta, dtype=float).reshape(model.dim)
        draws = model.sample_H(np.broadcast_to(theta, (n_draws, model.dim)), rng)
        h = model.mean_field(theta)
        cov = model.noise_cov(theta)
        se_mean = np.sqrt(np.diag(cov) / n_draws)
        max_mean_z = max(max_mean_z, float(np.max(np.abs(draws.mean(axis=0) - h) /
                                                  np.maximum(se_mean, 1e-300))))
        if np.trace(cov) > 0:
            emp = np.cov(draws.T).reshape(model.dim, model.dim)
            # standard error of a covariance entry for Gaussian data
            se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n_draws)
            max_cov_z = max(max_cov_z, float(np.max(np.abs(emp - cov) / np.maximum(se_cov, 1e-300))))
        jac = model.jacobian(theta)
        fd = fd_jacobian(model, theta)
        scale = max(1.0, float(np.max(np.abs(jac))))
        max_jac = max(max_jac, float(np.max(np.abs(jac - fd)) / scale))
    root_ok = bool(np.max(np.abs(model.mean_field(model.root))) < 1e-10)
    return ModelValidationReport(
        mean_ok=max_mean_z < z_tol,
        cov_ok=max_cov_z < z_tol,
        jacobian_ok=max_jac < 1e-6,
        root_ok=root_ok,
        max_mean_z=max_mean_z,
        max_cov_z=max_cov_z,
        max_jac_rel_err=max_jac,
    )
