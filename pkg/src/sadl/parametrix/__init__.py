"""One-dimensional transition-density machinery: frozen Gaussian kernels,
drift-difference kernels, their series summation, and majorant envelopes."""

from .grids import (Grid1D, DensityField, gaussian_g, majorant_Q, majorant_scriptQ,
                    require_same_grid)
from .kernels import (ParametrixContext, TruncatedDrift1D, ChainFrozenTable,
                      tilde_q, kernel_H, tilde_p, kernel_scriptK, kernel_scriptK_terms)
from .series import convolve, series_q, series_p, SeriesDiagnostics
