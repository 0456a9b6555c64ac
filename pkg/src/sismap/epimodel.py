"""Force of infection, outbreak probability and the Bernoulli likelihood.

Time indices in the public functions are 1-based to match the panel CSV
(``t = 1..T``); the likelihood conditions on the first column and runs over
``t = 2..T``.  Every unit is at risk at every step unless
``exclude_infected_prev`` is set.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .spatial import kernel_eval

__all__ = [
    "OutbreakPanel",
    "PROB_CLAMP",
    "force_matrix",
    "force_of_infection",
    "outbreak_probability",
    "fitted_probabilities",
    "unit_log_likelihood",
    "log_likelihood",
    "PanelLikelihood",
    "risk_mask",
    "cross_entropy_by_unit",
]

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class OutbreakPanel:
    """Binary N x T outbreak history."""

    y: np.ndarray = field(repr=False)
    ids: tuple = None
    time_labels: tuple = None

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 2:
            raise InvalidInputError("panel must be a 2-d array")
        if y.shape[1] < 2:
            raise InvalidInputError("panel needs at least two time steps")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("panel entries must be 0 or 1")
        y = y.astype(np.int8)
        y.setflags(write=False)
        ids = self.ids
        if ids is None:
            ids = tuple(str(i) for i in range(y.shape[0]))
        ids = tuple(str(i) for i in ids)
        if len(ids) != y.shape[0]:
            raise InvalidInputError("ids do not match panel rows")
        labels = self.time_labels
        if labels is None:
            labels = tuple(range(1, y.shape[1] + 1))
        if len(labels) != y.shape[1]:
            raise InvalidInputError("time labels do not match panel columns")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "time_labels", tuple(labels))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def T(self):
        return self.y.shape[1]

    def subset(self, index):
        index = np.asarray(index)
        return OutbreakPanel(self.y[index], [self.ids[i] for i in index], self.time_labels)


def _check_beta(beta, n):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (n,):
        raise InvalidInputError(f"beta must have shape ({n},), got {beta.shape}")
    if not np.all(np.isfinite(beta)) or np.any(beta <= 0):
        raise InvalidInputError("beta entries must be positive and finite")
    return beta


def force_matrix(y, kmat):
    """Unscaled force ``F[i, t-2] = sum_{j in I_{t-1}} k(d_ij)`` for t = 2..T.

    ``y`` is the N x T panel array and ``kmat`` the N x N kernel matrix
    (diagonal 1, so a unit infected at t-1 contributes to its own force).
    """
    y = np.asarray(y, dtype=float)
    return kmat @ y[:, :-1]


def force_of_infection(panel, beta, d, kernel, t):
    """Force ``lambda_i(t)`` on every unit at 1-based time ``t`` (2 <= t <= T)."""
    if not 2 <= t <= panel.T:
        raise IndexError(f"t={t} outside 2..{panel.T}")
    beta = _check_beta(beta, panel.n)
    infected = np.flatnonzero(panel.y[:, t - 2])
    if infected.size == 0:
        return np.zeros(panel.n)
    return beta * kernel_eval(d[:, infected], kernel).sum(axis=1)


def outbreak_probability(lam, gamma):
    """``1 - exp(-lam - gamma)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise InvalidInputError("force of infection must be nonnegative")
    if not gamma >= 0:
        raise InvalidInputError("background rate must be nonnegative")
    p = -np.expm1(-(lam + gamma))
    return float(p) if p.ndim == 0 else p


def fitted_probabilities(panel, beta, gamma, d, kernel):
    """N x (T-1) matrix of ``P_i(t)`` for t = 2..T."""
    beta = _check_beta(beta, panel.n)
    F = force_matrix(panel.y, kernel_eval(d, kernel))
    return outbreak_probability(beta[:, None] * F, gamma)


def _bernoulli_terms(hazard, ynext):
    # log P = log(1 - exp(-h)); log(1 - P) = -h
    with np.errstate(divide="ignore"):
        logp = np.log(-np.expm1(-hazard))
    return np.where(ynext == 1, logp, -hazard)


def unit_log_likelihood(beta, F, ynext, gamma, mask=None):
    """Per-unit log-likelihood rows given a precomputed force matrix.

    Returns an N-vector; an entry is -inf when an observed outbreak has zero
    hazard.
    """
    hazard = np.asarray(beta, float)[:, None] * F + gamma
    terms = _bernoulli_terms(hazard, ynext)
    if mask is not None:
        terms = np.where(mask, terms, 0.0)
    return terms.sum(axis=1)


def risk_mask(y):
    """Cells of t = 2..T where the unit was not infected at t-1."""
    return np.asarray(y)[:, :-1] == 0


class PanelLikelihood:
    """Likelihood with the force matrix cached for fixed ``gamma`` and kernel.

    The log-likelihood factorizes over units, so ``unit`` returns one row sum
    per unit and ``site`` evaluates a single unit's row.
    """

    def __init__(self, panel, d, kernel, gamma, exclude_infected_prev=False):
        if not gamma >= 0:
            raise InvalidInputError("background rate must be nonnegative")
        y = panel.y if isinstance(panel, OutbreakPanel) else np.asarray(panel)
        self.F = np.ascontiguousarray(force_matrix(y, kernel_eval(d, kernel)))
        self.ynext = np.ascontiguousarray(y[:, 1:], dtype=np.int8)
        self.gamma = float(gamma)
        if exclude_infected_prev:
            self.mask = np.ascontiguousarray(risk_mask(y))
        else:
            self.mask = np.ones_like(self.ynext, dtype=bool)
        self.exclude_infected_prev = exclude_infected_prev
        # non-outbreak cells contribute -(beta_i F_it + gamma), linear in
        # beta_i, so only outbreak cells need the log1mexp term
        m0 = self.mask & (self.ynext == 0)
        m1 = self.mask & (self.ynext == 1)
        self._s0 = np.where(m0, self.F, 0.0).sum(axis=1)
        self._n0 = m0.sum(axis=1)
        self._rows1 = np.nonzero(m1)[0]
        self._f1 = self.F[m1]

    @property
    def n(self):
        return self.F.shape[0]

    def unit(self, beta):
        beta = np.asarray(beta, float)
        h1 = beta[self._rows1] * self._f1 + self.gamma
        with np.errstate(divide="ignore"):
            l1 = np.log(-np.expm1(-h1))
        return np.bincount(self._rows1, l1, minlength=self.n) - beta * self._s0 - self.gamma * self._n0

    def total(self, beta):
        return float(self.unit(beta).sum())

    def site(self, i, beta_i):
        h = beta_i * self.F[i] + self.gamma
        terms = _bernoulli_terms(h, self.ynext[i])
        return float(np.where(self.mask[i], terms, 0.0).sum())

    def probabilities(self, beta):
        return -np.expm1(-(np.asarray(beta, float)[:, None] * self.F + self.gamma))

    def fisher_log_beta(self, beta):
        """Expected information about each ``log beta_i``."""
        lam = np.asarray(beta, float)[:, None] * self.F
        h = lam + self.gamma
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(h > 0, lam**2 * np.exp(-h) / -np.expm1(-h), 0.0)
        return np.where(self.mask, w, 0.0).sum(axis=1)


def log_likelihood(panel, beta, gamma, d, kernel, exclude_infected_prev=False):
    """Bernoulli log-likelihood over t = 2..T.

    Returns ``-inf`` (never raises) when an outbreak is observed where the
    outbreak probability is exactly zero.
    """
    beta = _check_beta(beta, panel.n)
    if not gamma >= 0:
        raise InvalidInputError("background rate must be nonnegative")
    F = force_matrix(panel.y, kernel_eval(d, kernel))
    mask = risk_mask(panel.y) if exclude_infected_prev else None
    ll = float(unit_log_likelihood(beta, F, panel.y[:, 1:], gamma, mask).sum())
    if ll == -np.inf:
        warnings.warn("degenerate likelihood: outbreak observed with zero hazard", RuntimeWarning)
    return ll


def cross_entropy_by_unit(panel_or_y, probs):
    """Per-unit cross-entropy ``L_i`` of outcomes t = 2..T under ``probs``.

    ``probs`` is N x (T-1), aligned with columns 2..T of the panel, and is
    clamped to ``[1e-12, 1 - 1e-12]`` before taking logs.
    """
    y = panel_or_y.y if isinstance(panel_or_y, OutbreakPanel) else np.asarray(panel_or_y)
    ynext = y[:, 1:]
    p = np.asarray(probs, dtype=float)
    if p.shape != ynext.shape:
        raise InvalidInputError(f"probabilities must have shape {ynext.shape}, got {p.shape}")
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -np.where(ynext == 1, np.log(p), np.log1p(-p)).sum(axis=1)
