"""Exception types shared across the package."""


class NumericalFailure(RuntimeError):
    """A numerical stage produced non-finite or otherwise unusable output."""


class EigenSolverFailure(NumericalFailure):
    """Eigenvalue computation did not converge."""


class UnsupportedNoise(ValueError):
    """Closed-form density machinery requested for a non-Gaussian noise model."""


class GridMismatch(ValueError):
    """Two density fields live on different grids."""


class MassLeak(RuntimeError):
    """Density mass reached the grid boundary beyond tolerance."""
