"""Correlogram heuristic for choosing between ISM and SDSM.

Fit ISM, score every unit by the cross-entropy of its outbreak series under
the fitted probabilities, and look for spatial autocorrelation in those
scores with a permutation-enveloped distance correlogram.
"""

from dataclasses import dataclass, field

import numpy as np

from .epimodel import cross_entropy_by_unit, fitted_probabilities
from .errors import InvalidInputError, UndefinedCorrelationError
from .mcmc import McmcConfig, fit_ism, posterior_summary
from .rng import stream
from .spatial import pairwise_distances

__all__ = [
    "Correlogram",
    "DependenceDecision",
    "RuleParams",
    "spatial_correlogram",
    "decide",
    "dependence_heuristic",
]

MIN_PAIRS = 30


@dataclass
class Correlogram:
    bin_edges: np.ndarray
    bin_centers: np.ndarray
    estimate: np.ndarray
    n_pairs: np.ndarray
    env_lo: np.ndarray
    env_hi: np.ndarray
    n_permutations: int

    @property
    def valid(self):
        return self.n_pairs >= MIN_PAIRS


@dataclass(frozen=True)
class RuleParams:
    """Dependent iff at least ``min_exceed`` of the first ``first_bins``
    valid bins lie above the upper envelope."""

    first_bins: int = 5
    min_exceed: int = 2
    n_bins: int = 20
    n_permutations: int = 999
    envelope: tuple = (0.025, 0.975)


@dataclass
class DependenceDecision:
    verdict: str
    model: str
    flagged_bins: list
    rule: RuleParams
    losses: np.ndarray = None
    meta: dict = field(default_factory=dict)


def _pairs(coords, n_bins):
    d = pairwise_distances(coords)
    iu, ju = np.triu_indices(d.shape[0], 1)
    dist = d[iu, ju]
    edges = np.linspace(0.0, dist.max() / 2.0, n_bins + 1)
    # bins are (lo, hi]; pairs beyond the last edge or at distance 0 are dropped
    b = np.searchsorted(edges, dist, side="left") - 1
    keep = (b >= 0) & (b < n_bins)
    return iu[keep], ju[keep], b[keep], edges


def _binned(r, iu, ju, b, n_bins, counts, var):
    s = np.bincount(b, weights=r[iu] * r[ju], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return s / counts / var


def spatial_correlogram(values, coords, n_bins=20, n_perms=999, rng=None, seed=0):
    """Binned autocorrelation of centred values against distance.

    Bin estimate: mean of ``r_i r_j`` over pairs in the bin divided by the
    variance of ``r``. The envelope comes from ``n_perms`` permutations of
    the values over locations. Bins with fewer than 30 pairs are reported
    as NaN.
    """
    v = np.asarray(values, dtype=float)
    xy = coords.coords if hasattr(coords, "coords") else np.asarray(coords, float)
    if v.size < 10:
        raise InvalidInputError("correlogram needs at least 10 values")
    if xy.shape[0] != v.size:
        raise InvalidInputError("values and coordinates differ in length")
    r = v - v.mean()
    var = float(r @ r) / r.size
    if var <= 0 or not np.isfinite(var):
        raise UndefinedCorrelationError("values are constant; correlation undefined")
    iu, ju, b, edges = _pairs(xy, n_bins)
    counts = np.bincount(b, minlength=n_bins).astype(float)
    est = _binned(r, iu, ju, b, n_bins, counts, var)
    perms = np.empty((n_perms, n_bins))
    for k in range(n_perms):
        g = stream(seed, "perm", k) if rng is None else rng
        perms[k] = _binned(g.permutation(r), iu, ju, b, n_bins, counts, var)
    valid = counts >= MIN_PAIRS
    lo = np.full(n_bins, np.nan)
    hi = np.full(n_bins, np.nan)
    if n_perms > 0:
        lo[valid] = np.quantile(perms[:, valid], 0.025, axis=0)
        hi[valid] = np.quantile(perms[:, valid], 0.975, axis=0)
    est = np.where(valid, est, np.nan)
    return Correlogram(edges, 0.5 * (edges[1:] + edges[:-1]), est, counts.astype(int), lo, hi, n_perms)


def decide(cg, rule=None):
    """Apply the exceedance rule to a correlogram."""
    rule = rule or RuleParams()
    idx = np.flatnonzero(cg.valid)[: rule.first_bins]
    flagged = [int(i) for i in idx if cg.estimate[i] > cg.env_hi[i]]
    dependent = len(flagged) >= rule.min_exceed
    return DependenceDecision(
        verdict="dependent" if dependent else "independent",
        model="sdsm" if dependent else "ism",
        flagged_bins=flagged,
        rule=rule,
    )


def dependence_heuristic(panel, units, d, kernel, gamma, cfg=None, rule=None, seed=None):
    """Fit ISM, compute per-unit cross-entropy and judge spatial dependence.

    Returns ``(correlogram, decision)``; the per-unit losses are kept on
    ``decision.losses``. Fitted probabilities use the posterior-mean
    susceptibilities.
    """
    cfg = cfg or McmcConfig()
    rule = rule or RuleParams()
    if panel.n < 10:
        raise InvalidInputError("the heuristic needs at least 10 units")
    chain = fit_ism(panel, d, kernel, gamma, cfg)
    beta_hat = posterior_summary(chain).beta_mean
    probs = fitted_probabilities(panel, beta_hat, gamma, d, kernel)
    losses = cross_entropy_by_unit(panel, probs)
    cg = spatial_correlogram(losses, units, rule.n_bins, rule.n_permutations,
                             seed=cfg.seed if seed is None else seed)
    decision = decide(cg, rule)
    decision.losses = losses
    decision.meta.update(point_estimate="posterior mean", ism_alpha=float(chain.draws["alpha"].mean()))
    return cg, decision
