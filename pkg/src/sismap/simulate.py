"""Forward simulation of susceptibility fields and SIS outbreak panels."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .epimodel import OutbreakPanel, outbreak_probability
from .errors import InvalidInputError, NumericalError
from .rng import stream
from .spatial import KernelParams, SpatialUnits, kernel_eval, pairwise_distances

__all__ = [
    "GpHyperparams",
    "IsmPrior",
    "SimScenario",
    "cov_matrix",
    "jittered_cholesky",
    "sample_beta_gp",
    "sample_beta_independent",
    "cell_uniforms",
    "simulate_panel",
    "simulate",
]

JITTER_START = 1e-8
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class GpHyperparams:
    omega: float
    sigma2: float
    rho: float

    def __post_init__(self):
        if not math.isfinite(self.omega):
            raise InvalidInputError("omega must be finite")
        if not self.sigma2 > 0:
            raise InvalidInputError("sigma2 must be positive")
        if not self.rho > 0:
            raise InvalidInputError("rho must be positive")


@dataclass(frozen=True)
class IsmPrior:
    """Exponential prior on beta, parameterised by its mean ``alpha``."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidInputError("alpha must be positive")


@dataclass(frozen=True)
class SimScenario:
    units: SpatialUnits
    kernel: KernelParams
    gamma: float
    T: int
    field_kind: str = "gp"
    field_params: object = None
    seed: int = 0
    p0: float = 0.05
    initial_ids: tuple = None

    def __post_init__(self):
        if self.T < 2:
            raise InvalidInputError("T must be at least 2")
        if self.field_kind not in ("gp", "independent"):
            raise InvalidInputError(f"unknown field kind {self.field_kind!r}")
        if not self.gamma >= 0:
            raise InvalidInputError("gamma must be nonnegative")
        if not 0 <= self.p0 <= 1:
            raise InvalidInputError("p0 must be a probability")


def cov_matrix(d, gp):
    """Exponential covariance ``sigma2 * exp(-d / rho)``."""
    return gp.sigma2 * np.exp(-np.asarray(d, dtype=float) / gp.rho)


def jittered_cholesky(S, start=JITTER_START, cap=JITTER_MAX):
    """Lower Cholesky factor of ``S``, adding diagonal jitter if needed.

    Jitter is scaled by the mean diagonal and escalated tenfold from
    ``start`` up to ``cap``. Returns ``(L, jitter_used)``.
    """
    S = np.asarray(S, dtype=float)
    scale = float(np.mean(np.diag(S)))
    jitter = 0.0
    tried = []
    while True:
        try:
            L = linalg.cholesky(S + (jitter * scale) * np.eye(S.shape[0]), lower=True)
            return L, jitter
        except linalg.LinAlgError:
            tried.append(jitter)
            jitter = start if jitter == 0.0 else jitter * 10.0
            if jitter > cap * (1 + 1e-9):
                raise NumericalError(
                    f"covariance not factorizable; jitter tried {tried}, "
                    f"n={S.shape[0]}, min diag={np.min(np.diag(S)):.3g}"
                ) from None


def sample_beta_gp(d, gp, rng):
    """Draw ``beta = exp(omega + L z)`` from the log-Gaussian process."""
    L, _ = jittered_cholesky(cov_matrix(d, gp))
    z = rng.standard_normal(L.shape[0])
    return np.exp(gp.omega + L @ z)


def sample_beta_independent(prior, n, rng):
    """i.i.d. exponential susceptibilities with mean ``prior.alpha``."""
    return rng.exponential(scale=prior.alpha, size=n)


def cell_uniforms(seed, t, n):
    """Uniforms deciding column ``t`` (1-based) of a simulated panel."""
    return stream(seed, "cells", t).random(n)


def initial_column(scenario):
    n = scenario.units.n
    if scenario.initial_ids is not None:
        y0 = np.zeros(n, dtype=np.int8)
        y0[scenario.units.index_of(scenario.initial_ids)] = 1
        return y0
    return (stream(scenario.seed, "initial").random(n) < scenario.p0).astype(np.int8)


def simulate_panel(scenario, beta, d=None):
    """Simulate the N x T panel forward from the initial column."""
    units = scenario.units
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (units.n,):
        raise InvalidInputError("beta does not match the number of units")
    if d is None:
        d = pairwise_distances(units)
    kmat = kernel_eval(d, scenario.kernel)
    y = np.zeros((units.n, scenario.T), dtype=np.int8)
    y[:, 0] = initial_column(scenario)
    for t in range(2, scenario.T + 1):
        prev = y[:, t - 2].astype(float)
        lam = beta * (kmat @ prev)
        p = outbreak_probability(lam, scenario.gamma)
        y[:, t - 1] = cell_uniforms(scenario.seed, t, units.n) < p
    return OutbreakPanel(y, units.ids)


def draw_field(scenario, d=None):
    rng = stream(scenario.seed, "field")
    if scenario.field_kind == "independent":
        prior = scenario.field_params
        if not isinstance(prior, IsmPrior):
            raise InvalidInputError("independent field needs IsmPrior parameters")
        return sample_beta_independent(prior, scenario.units.n, rng)
    gp = scenario.field_params
    if not isinstance(gp, GpHyperparams):
        raise InvalidInputError("gp field needs GpHyperparams parameters")
    if d is None:
        d = pairwise_distances(scenario.units)
    return sample_beta_gp(d, gp, rng)


def simulate(scenario):
    """Draw a susceptibility field and a panel. Returns ``(beta, panel)``."""
    d = pairwise_distances(scenario.units)
    beta = draw_field(scenario, d)
    return beta, simulate_panel(scenario, beta, d)
