"""Step-size schedules gamma_k = A/(k^beta + B) and the gain time grid built from them."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class StepSchedule:
    """Power-law gain sequence with an index shift.

    gamma_k = A / (k^beta + B) for k >= 1, with A > 0, B >= 0 and
    1/2 < beta <= 1.  The shift N re-indexes the sequence: the shifted
    gain at step k is gamma_{N+k}.
    """

    A: float
    B: float = 0.0
    beta: float = 1.0
    N: int = 0

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError(f"A must be positive, got {self.A}")
        if self.B < 0:
            raise ValueError(f"B must be nonnegative, got {self.B}")
        if not 0.5 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (1/2, 1], got {self.beta}")
        if self.N < 0 or self.N != int(self.N):
            raise ValueError(f"N must be a nonnegative integer, got {self.N}")

    def gamma(self, k):
        """Unshifted gain gamma_k; k >= 1, scalar or array."""
        k_arr = np.asarray(k, dtype=float)
        if np.any(k_arr < 1):
            raise ValueError("gamma is defined for k >= 1")
        # k^beta via exp(beta*log k): relative error well below 1e-12 for k <= 1e9.
        return self.A / (np.exp(self.beta * np.log(k_arr)) + self.B)

    def gamma_shifted(self, k):
        """Shifted gain gamma_k^N = gamma_{N+k}; pure index arithmetic."""
        return self.gamma(np.asarray(k) + self.N)

    def bar_alpha(self) -> float:
        """Limit of the normalized gain increments: 0 for beta < 1, 1/(2A(B+1)) at beta = 1."""
        if self.beta < 1.0:
            return 0.0
        return 1.0 / (2.0 * self.A * (self.B + 1.0))

    def alpha_step(self, k):
        """Normalized gain increment (sqrt(g_k) - sqrt(g_{k+1})) / g_{k+1}^{3/2} on the shifted sequence.

        Requires N + k >= 1 so that the left gain exists.
        """
        k_arr = np.asarray(k)
        if np.any(k_arr + self.N < 1):
            raise ValueError("alpha_step needs N + k >= 1")
        g_k = self.gamma_shifted(k_arr)
        g_k1 = self.gamma_shifted(k_arr + 1)
        return (np.sqrt(g_k) - np.sqrt(g_k1)) / g_k1 ** 1.5

    def shifted(self, N: int) -> "StepSchedule":
        return replace(self, N=N)


@dataclass(frozen=True)
class TimeGrid:
    """Cumulative-gain time grid t_k = gamma_1^N + ... + gamma_k^N up to the first crossing of T.

    ``t`` has length M+1 with t[0] = 0 and t[M] >= T > t[M-1].  ``gammas[k-1]``
    is the exact shifted gain gamma_k^N; t is its compensated cumulative sum,
    so t_k is correctly rounded while np.diff(t) may differ from gammas in the
    last ulp.
    """

    schedule: StepSchedule
    T: float
    t: np.ndarray
    gammas: np.ndarray

    @property
    def M(self) -> int:
        return len(self.t) - 1

    def gamma(self, k):
        """Shifted gain gamma_k^N for 1 <= k; grid stores up to M, later ones recomputed."""
        k_arr = np.asarray(k)
        return np.where(k_arr <= self.M,
                        self.gammas[np.minimum(k_arr, self.M) - 1],
                        self.schedule.gamma_shifted(k_arr))

    def index_at(self, u):
        """Index k with t_k <= u < t_{k+1}, clipped to [0, M-1]; vectorized."""
        idx = np.searchsorted(self.t, u, side="right") - 1
        return np.clip(idx, 0, self.M - 1)


def time_grid(schedule: StepSchedule, T: float) -> TimeGrid:
    """Accumulate shifted gains until the first grid time >= T.

    Compensated (Kahan) summation keeps t_k exact to machine epsilon over
    1e6-step grids; finiteness of M is guaranteed since the gains are not
    summable to a finite limit.
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    gammas = []
    times = [0.0]
    total = 0.0
    comp = 0.0
    k = 1
    while total < T:
        g = float(schedule.gamma_shifted(k))
        y = g - comp
        new_total = total + y
        comp = (new_total - total) - y
        total = new_total
        gammas.append(g)
        times.append(total)
        k += 1
        if k > 100_000_000:
            raise RuntimeError("time grid failed to reach T; schedule sums too slowly")
    return TimeGrid(schedule=schedule, T=float(T),
                    t=np.array(times), gammas=np.array(gammas))
