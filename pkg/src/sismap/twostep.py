"""Step-one estimates of the background rate and the kernel range.

The background rate comes from a method-of-moments count over a quiet
window. The kernel range is picked from a grid by least squares between
the observed outbreak counts and the total kernel force series, with a
per-candidate amplitude profiled out so that only the shape is compared.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .epimodel import force_matrix
from .errors import EstimationError, InvalidInputError
from .spatial import KernelParams, kernel_eval

__all__ = [
    "QuietWindow",
    "GammaEstimate",
    "PhiEstimate",
    "estimate_gamma_mom",
    "find_quiet_window",
    "default_window_width",
    "default_phi_grid",
    "total_force_series",
    "estimate_phi_grid",
]


@dataclass(frozen=True)
class QuietWindow:
    """Columns ``t1 .. t2-1`` (1-based) of the panel."""

    t1: int
    t2: int

    def __post_init__(self):
        if not (1 <= self.t1 < self.t2):
            raise InvalidInputError(f"invalid window ({self.t1}, {self.t2})")

    @property
    def width(self):
        return self.t2 - self.t1


@dataclass(frozen=True)
class GammaEstimate:
    gamma: float
    n_outbreaks: int
    window: QuietWindow
    degenerate: bool


@dataclass(frozen=True)
class PhiEstimate:
    phi: float
    grid: np.ndarray
    residuals: np.ndarray
    amplitudes: np.ndarray


def estimate_gamma_mom(panel, window):
    """``#outbreaks / (N * dt)`` counted over columns t1..t2-1.

    A window without outbreaks gives 0 and sets ``degenerate``.
    """
    if window.t2 - 1 > panel.T:
        raise InvalidInputError(f"window {window} exceeds T={panel.T}")
    count = int(panel.y[:, window.t1 - 1 : window.t2 - 1].sum())
    gamma = count / (panel.n * window.width)
    degenerate = count == 0
    if degenerate:
        warnings.warn("no outbreaks in the quiet window; background rate is 0", RuntimeWarning)
    return GammaEstimate(gamma, count, window, degenerate)


def default_window_width(T):
    return max(4, T // 10)


def find_quiet_window(panel, width):
    """Window of ``width`` columns with the fewest outbreaks; earliest on ties."""
    if not 1 <= width < panel.T:
        raise InvalidInputError(f"window width must be in 1..{panel.T - 1}")
    counts = panel.y.sum(axis=0).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(counts)])
    totals = csum[width:] - csum[:-width]
    t1 = int(np.argmin(totals)) + 1
    return QuietWindow(t1, t1 + width)


def default_phi_grid(d, m=20):
    """``m`` log-spaced values from the smallest positive to the largest distance."""
    pos = d[d > 0]
    if pos.size == 0:
        raise InvalidInputError("all units coincide")
    return np.geomspace(pos.min(), pos.max(), m)


def total_force_series(panel, d, kernel):
    """``M_t = sum_i sum_{j in I_{t-1}} k(d_ij)`` for t = 2..T."""
    return force_matrix(panel.y, kernel_eval(d, kernel)).sum(axis=0)


def _fit_amplitude(obs, series):
    mm = float(series @ series)
    if mm == 0.0:
        return 0.0, float(obs @ obs)
    c = float(obs @ series) / mm
    r = obs - c * series
    return c, float(r @ r)


def estimate_phi_grid(panel, d, grid, b0=3.0):
    """Grid least-squares kernel range.

    For each candidate the amplitude ``c`` minimising
    ``sum_t (O_t - c M_t)^2`` is profiled out; the candidate with the smallest
    residual wins, ties going to the smaller range.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise InvalidInputError("phi grid is empty")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InvalidInputError("phi grid must be positive and strictly increasing")
    obs = panel.y[:, 1:].sum(axis=0).astype(float)
    # the infected-set indicator is shared across candidates
    prev = panel.y[:, :-1].astype(float)
    amps = np.empty(grid.size)
    res = np.empty(grid.size)
    any_force = False
    for k, phi in enumerate(grid):
        series = kernel_eval(d, KernelParams(phi, b0)).sum(axis=0) @ prev
        any_force |= bool(np.any(series != 0))
        amps[k], res[k] = _fit_amplitude(obs, series)
    if not any_force:
        raise EstimationError("force series is identically zero for every candidate")
    best = int(np.argmin(res))
    return PhiEstimate(float(grid[best]), grid, res, amps)
