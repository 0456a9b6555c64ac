"""Adaptive random-walk Metropolis samplers for the susceptibility models.

Two models are fitted here with the background rate and kernel fixed at
their step-one estimates:

* ISM: ``beta_i ~ Exponential(mean alpha)``, ``alpha ~ Uniform(0, 5)``.
* SDSM: ``log beta ~ N(omega, sigma^2 R(rho))`` with exponential correlation
  ``R = exp(-d / rho)``, ``sigma ~ Uniform(0, 5)``, ``1/rho ~ Uniform(0, 1)``,
  ``omega ~ Uniform(-10, 0)``.

Susceptibilities are updated one unit at a time on the log scale (the ISM
sites are conditionally independent given ``alpha`` so they are proposed in
one vectorised pass). Bounded hyperparameters move on a logit scale.
Proposal scales adapt toward a target acceptance rate during burn-in only.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import linalg

from .epimodel import PanelLikelihood
from .errors import CapacityError, DegeneratePosteriorError, InvalidInputError, NumericalError
from .rng import stream
from .simulate import jittered_cholesky

__all__ = [
    "McmcConfig",
    "Chain",
    "PosteriorSummary",
    "adaptive_step",
    "initial_beta",
    "fit_ism",
    "fit_sdsm_full",
    "posterior_summary",
    "ess_geyer",
    "split_rhat",
    "BoundedTransform",
]


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 50000
    burn_in: int = 20000
    thin: int = 10
    seed: int = 0
    target_scalar: float = 0.44
    target_block: float = 0.234
    init_step: float = 0.5
    use_likelihood: bool = True
    exclude_infected_prev: bool = False
    alpha_bounds: tuple = (0.0, 5.0)
    sigma_bounds: tuple = (0.0, 5.0)
    inv_rho_bounds: tuple = (0.0, 1.0)
    omega_bounds: tuple = (-10.0, 0.0)
    rho_update_every: int = 1
    max_units_full: int = 1500

    def __post_init__(self):
        if self.n_iter < 1 or self.thin < 1 or self.burn_in < 0:
            raise InvalidInputError("n_iter and thin must be positive, burn_in nonnegative")
        if self.burn_in >= self.n_iter:
            raise InvalidInputError("burn_in must be smaller than n_iter")
        for name in ("alpha_bounds", "sigma_bounds", "inv_rho_bounds", "omega_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidInputError(f"{name} must satisfy lo < hi")

    @property
    def n_saved(self):
        return -(-(self.n_iter - self.burn_in) // self.thin)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class Chain:
    """Post-burn-in, thinned draws plus sampler diagnostics."""

    model: str
    ids: tuple
    draws: dict
    log_post: np.ndarray
    acceptance: dict
    step_sizes: dict
    config: McmcConfig
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return len(self.log_post)


@dataclass
class PosteriorSummary:
    ids: tuple
    beta_mean: np.ndarray
    beta_sd: np.ndarray
    beta_q025: np.ndarray
    beta_q975: np.ndarray
    beta_ess: np.ndarray
    hyper: dict


class BoundedTransform:
    """Logit map between an interval ``(lo, hi)`` and the real line."""

    def __init__(self, lo, hi):
        self.lo, self.hi = float(lo), float(hi)
        self.width = self.hi - self.lo

    def to_real(self, v):
        p = (v - self.lo) / self.width
        return math.log(p) - math.log1p(-p)

    def from_real(self, z):
        # expit without overflow
        if z >= 0:
            p = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            p = e / (1.0 + e)
        return self.lo + self.width * p

    def log_jacobian(self, v):
        a, b = v - self.lo, self.hi - v
        if a <= 0 or b <= 0:
            return -math.inf
        return math.log(a) + math.log(b) - math.log(self.width)

    def midpoint(self):
        return 0.5 * (self.lo + self.hi)


def adaptive_step(log_scale, accept_prob, target, iteration, burn_in, decay=0.6):
    """Robbins-Monro update of a log proposal scale.

    Moves ``log_scale`` by ``(accept_prob - target) / (iteration + 1) ** decay``
    while ``iteration < burn_in``; afterwards the scale is returned unchanged.
    Works elementwise on arrays.
    """
    if iteration >= burn_in:
        return log_scale
    gain = 1.0 / (iteration + 1.0) ** decay
    return log_scale + gain * (np.asarray(accept_prob) - target)


def _accept_prob(logr):
    return np.exp(np.minimum(logr, 0.0))


def initial_beta(lik, panel_y):
    """Data-informed start: ``(incidence_i + 0.5/T) / mean force``."""
    y = np.asarray(panel_y)
    T = y.shape[1]
    mean_force = float(lik.F.mean())
    if not mean_force > 0:
        mean_force = 1.0
    return (y.mean(axis=1) + 0.5 / T) / mean_force


class _Recorder:
    def __init__(self, cfg, shapes):
        self.cfg = cfg
        n = cfg.n_saved
        self.draws = {k: np.empty((n,) + s) for k, s in shapes.items()}
        self.log_post = np.empty(n)
        self.k = 0

    def due(self, it):
        return it >= self.cfg.burn_in and (it - self.cfg.burn_in) % self.cfg.thin == 0

    def record(self, values, lp):
        for k, v in values.items():
            self.draws[k][self.k] = v
        self.log_post[self.k] = lp
        self.k += 1


def _check_start(lp, model):
    if not np.isfinite(lp):
        raise DegeneratePosteriorError(
            f"{model}: log posterior is {lp} at the start state; an outbreak is "
            "observed with zero hazard (background rate 0 and no infectious neighbours?)"
        )


def fit_ism(panel, d, kernel, gamma, cfg=None, beta_init=None):
    """Sample the independent-susceptibility posterior."""
    cfg = cfg or McmcConfig()
    t0 = time.perf_counter()
    lik = PanelLikelihood(panel, d, kernel, gamma, cfg.exclude_infected_prev)
    n = lik.n
    rng = stream(cfg.seed, "ism")
    tr_alpha = BoundedTransform(*cfg.alpha_bounds)

    beta = np.array(initial_beta(lik, panel.y) if beta_init is None else beta_init, float)
    x = np.log(beta)
    alpha = tr_alpha.midpoint()
    ll = lik.unit(beta) if cfg.use_likelihood else np.zeros(n)

    def log_post():
        return float(ll.sum() - n * math.log(alpha) - beta.sum() / alpha)

    _check_start(log_post(), "ISM")
    log_s = np.full(n, math.log(cfg.init_step))
    log_s_alpha = math.log(cfg.init_step)
    rec = _Recorder(cfg, {"beta": (n,), "alpha": ()})
    acc_beta = np.zeros(n)
    acc_alpha = 0.0

    for it in range(cfg.n_iter):
        z = rng.standard_normal(n)
        lu = np.log(rng.random(n))
        xp = x + np.exp(log_s) * z
        bp = np.exp(xp)
        llp = lik.unit(bp) if cfg.use_likelihood else np.zeros(n)
        with np.errstate(invalid="ignore"):
            logr = llp - ll + (xp - x) - (bp - beta) / alpha
        logr = np.where(np.isnan(logr), -np.inf, logr)
        acc = lu < logr
        x = np.where(acc, xp, x)
        beta = np.where(acc, bp, beta)
        ll = np.where(acc, llp, ll)
        log_s = adaptive_step(log_s, _accept_prob(logr), cfg.target_scalar, it, cfg.burn_in)

        # alpha | beta on the logit scale
        za = tr_alpha.to_real(alpha) + math.exp(log_s_alpha) * rng.standard_normal()
        ap = tr_alpha.from_real(za)
        sb = beta.sum()
        logr_a = (
            -n * (math.log(ap) - math.log(alpha))
            - sb * (1.0 / ap - 1.0 / alpha)
            + tr_alpha.log_jacobian(ap)
            - tr_alpha.log_jacobian(alpha)
        )
        ok_a = math.log(rng.random()) < logr_a
        if ok_a:
            alpha = ap
        log_s_alpha = adaptive_step(
            log_s_alpha, min(1.0, math.exp(min(logr_a, 0.0))), cfg.target_scalar, it, cfg.burn_in
        )

        if it >= cfg.burn_in:
            acc_beta += acc
            acc_alpha += ok_a
        if rec.due(it):
            rec.record({"beta": beta, "alpha": alpha}, log_post())

    n_post = cfg.n_iter - cfg.burn_in
    return Chain(
        model="ism",
        ids=panel.ids,
        draws=rec.draws,
        log_post=rec.log_post,
        acceptance={"beta": acc_beta / n_post, "alpha": acc_alpha / n_post},
        step_sizes={"beta": np.exp(log_s), "alpha": math.exp(log_s_alpha)},
        config=cfg,
        meta={"gamma": float(gamma), "phi": kernel.phi, "b0": kernel.b0,
              "seconds": time.perf_counter() - t0},
    )


@numba.njit(cache=True)
def _site_loglik(b, F, Y, M, gamma, i):
    out = 0.0
    for t in range(F.shape[1]):
        if not M[i, t]:
            continue
        h = b * F[i, t] + gamma
        if Y[i, t]:
            if h <= 0.0:
                return -np.inf
            out += math.log(-math.expm1(-h))
        else:
            out -= h
    return out


@numba.njit(cache=True)
def _gp_site_sweep(x, u, ll, F, Y, M, gamma, Rinv, inv_s2, steps, z, lu, use_lik, accprob):
    """One ascending pass of single-site updates of ``x = log beta``.

    ``u`` holds ``Rinv @ (x - omega)`` and is kept current on acceptance.
    """
    n = x.shape[0]
    for i in range(n):
        delta = steps[i] * z[i]
        xn = x[i] + delta
        lln = _site_loglik(math.exp(xn), F, Y, M, gamma, i) if use_lik else 0.0
        dprior = -0.5 * inv_s2 * (2.0 * delta * u[i] + delta * delta * Rinv[i, i])
        logr = lln - ll[i] + dprior
        if logr >= 0.0:
            accprob[i] = 1.0
        elif logr == -np.inf or np.isnan(logr):
            accprob[i] = 0.0
            continue
        else:
            accprob[i] = math.exp(logr)
        if lu[i] < logr:
            x[i] = xn
            ll[i] = lln
            for j in range(n):
                u[j] += delta * Rinv[i, j]


class _GpState:
    """Factorised correlation matrix for one value of ``1/rho``."""

    def __init__(self, d, inv_rho):
        a = d * inv_rho
        # correlations below e^-46 (~1e-20) are zeroed: otherwise the factor
        # and inverse fill with subnormals and LAPACK slows down tenfold
        R = np.where(a < 46.0, np.exp(-np.minimum(a, 46.0)), 0.0)
        L, jitter = jittered_cholesky(R)
        Rinv, info = linalg.lapack.dpotri(L, lower=1)
        if info != 0:
            raise NumericalError("inverse of correlation matrix failed")
        Rinv = np.tril(Rinv) + np.tril(Rinv, -1).T
        self.inv_rho = inv_rho
        self.jitter = jitter
        self.Rinv = np.ascontiguousarray(Rinv)
        self.r1 = Rinv.sum(axis=1)
        self.c = float(self.r1.sum())
        self.logdet = 2.0 * float(np.log(np.diag(L)).sum())


def fit_sdsm_full(panel, d, kernel, gamma, cfg=None, beta_init=None):
    """Sample the spatially dependent model with a dense Gaussian-process prior."""
    cfg = cfg or McmcConfig()
    n = panel.n
    if n > cfg.max_units_full:
        raise CapacityError(
            f"full SDSM limited to {cfg.max_units_full} units (got {n}); use the PICAR model"
        )
    t0 = time.perf_counter()
    d = np.asarray(d, dtype=float)
    lik = PanelLikelihood(panel, d, kernel, gamma, cfg.exclude_infected_prev)
    rng = stream(cfg.seed, "sdsm")
    tr_sigma = BoundedTransform(*cfg.sigma_bounds)
    tr_irho = BoundedTransform(*cfg.inv_rho_bounds)
    tr_omega = BoundedTransform(*cfg.omega_bounds)

    beta0 = initial_beta(lik, panel.y) if beta_init is None else beta_init
    x = np.log(np.asarray(beta0, float)).copy()
    omega = tr_omega.midpoint()
    sigma = tr_sigma.midpoint()
    gp = _GpState(d, tr_irho.midpoint())
    if cfg.use_likelihood:
        ll = lik.unit(np.exp(x))
    else:
        ll = np.zeros(n)
    u = gp.Rinv @ (x - omega)

    def quad():
        return float((x - omega) @ u)

    def log_post():
        gp_lp = -n * math.log(sigma) - 0.5 * gp.logdet - 0.5 * quad() / sigma**2
        return float(ll.sum()) + gp_lp

    _check_start(float(ll.sum()), "SDSM")
    log_s = np.full(n, math.log(cfg.init_step))
    log_s_h = {k: math.log(cfg.init_step) for k in ("omega", "sigma", "inv_rho")}
    acc_h = {k: 0 for k in log_s_h}
    acc_beta = np.zeros(n)
    accprob = np.zeros(n)
    rec = _Recorder(cfg, {"beta": (n,), "omega": (), "sigma": (), "rho": ()})
    F, Y, M = lik.F, lik.ynext, lik.mask
    use_lik = bool(cfg.use_likelihood)

    for it in range(cfg.n_iter):
        z = rng.standard_normal(n)
        lu = np.log(rng.random(n))
        x_old = x.copy()
        _gp_site_sweep(x, u, ll, F, Y, M, lik.gamma, gp.Rinv, 1.0 / sigma**2,
                       np.exp(log_s), z, lu, use_lik, accprob)
        moved = x != x_old
        log_s = adaptive_step(log_s, accprob, cfg.target_scalar, it, cfg.burn_in)
        # refresh against drift from the incremental updates
        u = gp.Rinv @ (x - omega)
        q = quad()

        # omega
        zo = tr_omega.to_real(omega) + math.exp(log_s_h["omega"]) * rng.standard_normal()
        wp = tr_omega.from_real(zo)
        dw = wp - omega
        qp = q - 2.0 * dw * float(u.sum()) + dw * dw * gp.c
        logr = -0.5 * (qp - q) / sigma**2 + tr_omega.log_jacobian(wp) - tr_omega.log_jacobian(omega)
        ok = math.log(rng.random()) < logr
        if ok:
            omega = wp
            u = u - dw * gp.r1
            q = qp
        _adapt_h(log_s_h, "omega", logr, cfg, it)
        acc_h["omega"] += ok and it >= cfg.burn_in

        # sigma
        zs = tr_sigma.to_real(sigma) + math.exp(log_s_h["sigma"]) * rng.standard_normal()
        sp = tr_sigma.from_real(zs)
        logr = (
            -n * (math.log(sp) - math.log(sigma))
            - 0.5 * q * (1.0 / sp**2 - 1.0 / sigma**2)
            + tr_sigma.log_jacobian(sp)
            - tr_sigma.log_jacobian(sigma)
        )
        ok = math.log(rng.random()) < logr
        if ok:
            sigma = sp
        _adapt_h(log_s_h, "sigma", logr, cfg, it)
        acc_h["sigma"] += ok and it >= cfg.burn_in

        # 1/rho, refactorising the correlation matrix
        zr_noise = rng.standard_normal()
        lu_r = math.log(rng.random())
        if it % cfg.rho_update_every == 0:
            zr = tr_irho.to_real(gp.inv_rho) + math.exp(log_s_h["inv_rho"]) * zr_noise
            ip = tr_irho.from_real(zr)
            try:
                gpp = _GpState(d, ip)
            except NumericalError:
                gpp = None
            if gpp is None:
                logr = -math.inf
            else:
                up = gpp.Rinv @ (x - omega)
                qp = float((x - omega) @ up)
                logr = (
                    -0.5 * (gpp.logdet - gp.logdet)
                    - 0.5 * (qp - q) / sigma**2
                    + tr_irho.log_jacobian(ip)
                    - tr_irho.log_jacobian(gp.inv_rho)
                )
            ok = lu_r < logr
            if ok:
                gp, u, q = gpp, up, qp
            _adapt_h(log_s_h, "inv_rho", logr, cfg, it // cfg.rho_update_every)
            acc_h["inv_rho"] += ok and it >= cfg.burn_in

        if it >= cfg.burn_in:
            acc_beta += moved
        if rec.due(it):
            rec.record(
                {"beta": np.exp(x), "omega": omega, "sigma": sigma, "rho": 1.0 / gp.inv_rho},
                log_post(),
            )

    n_post = cfg.n_iter - cfg.burn_in
    n_rho = max(1, -(-n_post // cfg.rho_update_every))
    acceptance = {"beta": acc_beta / n_post, "omega": acc_h["omega"] / n_post,
                  "sigma": acc_h["sigma"] / n_post, "inv_rho": acc_h["inv_rho"] / n_rho}
    return Chain(
        model="sdsm",
        ids=panel.ids,
        draws=rec.draws,
        log_post=rec.log_post,
        acceptance=acceptance,
        step_sizes={"beta": np.exp(log_s), **{k: math.exp(v) for k, v in log_s_h.items()}},
        config=cfg,
        meta={"gamma": float(gamma), "phi": kernel.phi, "b0": kernel.b0,
              "seconds": time.perf_counter() - t0},
    )


def _adapt_h(log_s, key, logr, cfg, it):
    a = 1.0 if logr >= 0 else (0.0 if logr == -math.inf else math.exp(logr))
    log_s[key] = adaptive_step(log_s[key], a, cfg.target_scalar, it, cfg.burn_in)


def ess_geyer(x):
    """Effective sample size by Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = float(xc @ xc) / n
    if var == 0.0:
        return float(n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    rho = acov / acov[0]
    tau = -1.0
    k = 0
    prev = np.inf
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)  # initial monotone sequence
        tau += 2.0 * pair
        prev = pair
        k += 1
    return float(n / max(tau, 1.0 / n))


def split_rhat(x):
    """Split-chain potential scale reduction for one or more chains (rows)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m, n = parts.shape
    if n < 2:
        return math.nan
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _stats(v):
    v = np.asarray(v, dtype=float)
    return {
        "mean": float(v.mean()),
        "sd": float(v.std()),
        "q025": float(np.quantile(v, 0.025)),
        "q975": float(np.quantile(v, 0.975)),
        "ess": ess_geyer(v),
        "rhat": split_rhat(v),
    }


def posterior_summary(chain):
    """Means, standard deviations, 95% intervals and ESS of a chain."""
    if chain.n_draws == 0:
        raise InvalidInputError("empty chain")
    B = chain.draws["beta"]
    hyper = {k: _stats(v) for k, v in chain.draws.items() if k not in ("beta", "delta")}
    return PosteriorSummary(
        ids=chain.ids,
        beta_mean=B.mean(axis=0),
        beta_sd=B.std(axis=0),
        beta_q025=np.quantile(B, 0.025, axis=0),
        beta_q975=np.quantile(B, 0.975, axis=0),
        beta_ess=np.array([ess_geyer(B[:, i]) for i in range(B.shape[1])]),
        hyper=hyper,
    )
