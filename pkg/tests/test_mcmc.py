import math

import numpy as np
import pytest

from sismap.epimodel import OutbreakPanel
from sismap.errors import CapacityError, DegeneratePosteriorError, InvalidInputError
from sismap.evaluate import incidence_ranking, spearman
from sismap.mcmc import (
    BoundedTransform,
    Chain,
    McmcConfig,
    adaptive_step,
    ess_geyer,
    fit_ism,
    fit_sdsm_full,
    posterior_summary,
    split_rhat,
)
from sismap.rng import stream
from sismap.simulate import GpHyperparams, SimScenario, simulate
from sismap.spatial import KernelParams, SpatialUnits, pairwise_distances

import oracles


def one_unit_panel(beta_true=0.8, gamma=0.1, T=2000, seed=1):
    """Single unit re-infecting itself through the self-term k(0) = 1."""
    rng = stream(seed, "one-unit")
    y = np.zeros((1, T), dtype=int)
    y[0, 0] = 1
    uni = rng.random(T)
    for t in range(1, T):
        p = -math.expm1(-(beta_true * y[0, t - 1] + gamma))
        y[0, t] = uni[t] < p
    return OutbreakPanel(y), np.zeros((1, 1))


def synthetic_chain(beta_draws, extra=None):
    beta_draws = np.atleast_2d(np.asarray(beta_draws, float).T).T
    draws = {"beta": beta_draws, **(extra or {})}
    return Chain("ism", tuple(str(i) for i in range(beta_draws.shape[1])), draws,
                 np.zeros(beta_draws.shape[0]), {}, {}, McmcConfig(n_iter=2, burn_in=0))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        McmcConfig(n_iter=10, burn_in=10)
    with pytest.raises(InvalidInputError):
        McmcConfig(thin=0)
    with pytest.raises(InvalidInputError):
        McmcConfig(sigma_bounds=(1.0, 1.0))
    assert McmcConfig(n_iter=100, burn_in=50, thin=10).n_saved == 5
    assert McmcConfig(n_iter=101, burn_in=50, thin=10).n_saved == 6


def test_adaptation_direction_and_freeze():
    s = 0.0
    for it in range(50):
        s_new = adaptive_step(s, 1.0, 0.44, it, 100)
        assert s_new > s
        s = s_new
    for it in range(50):
        s_new = adaptive_step(s, 0.0, 0.44, it, 100)
        assert s_new < s
        s = s_new
    for it in range(100, 120):
        assert adaptive_step(s, 1.0, 0.44, it, 100) == s


def test_bounded_transform_roundtrip():
    tr = BoundedTransform(-10.0, 0.0)
    for v in [-9.99, -5.0, -0.001]:
        assert tr.from_real(tr.to_real(v)) == pytest.approx(v, rel=1e-12)
    assert tr.log_jacobian(-10.0) == -math.inf
    assert -10.0 < tr.from_real(800.0) <= 0.0 and -10.0 <= tr.from_real(-800.0) < 0.0


def test_constant_chain_summary():
    s = posterior_summary(synthetic_chain(np.full(50, 1.7)))
    assert s.beta_sd[0] == 0.0
    assert s.beta_q025[0] == s.beta_q975[0] == pytest.approx(1.7)


def test_normal_chain_summary():
    z = stream(3, "iid").standard_normal(20_000)
    s = posterior_summary(synthetic_chain(z))
    assert abs(s.beta_mean[0]) < 4 / math.sqrt(20_000)
    assert s.beta_sd[0] == pytest.approx(1.0, abs=0.03)
    assert 15_000 < s.beta_ess[0] < 25_000


def test_quantiles_match_sort():
    x = stream(4, "q").gamma(2.0, 1.0, 999)
    s = posterior_summary(synthetic_chain(x))
    xs = np.sort(x)
    # numpy's default (linear) rule: position q * (n - 1)
    for q, got in [(0.025, s.beta_q025[0]), (0.975, s.beta_q975[0])]:
        pos = q * (len(xs) - 1)
        lo = int(math.floor(pos))
        want = xs[lo] + (pos - lo) * (xs[lo + 1] - xs[lo])
        assert got == pytest.approx(want, rel=1e-12)
    assert s.beta_q025[0] <= s.beta_mean[0] <= s.beta_q975[0]


def test_ess_and_rhat_on_ar1():
    rng = stream(5, "ar")
    x = np.empty(40_000)
    x[0] = 0
    e = rng.standard_normal(x.size)
    for t in range(1, x.size):
        x[t] = 0.9 * x[t - 1] + e[t]
    # integrated autocorrelation time of AR(1) is (1 + a) / (1 - a) = 19
    assert ess_geyer(x) == pytest.approx(40_000 / 19, rel=0.25)
    assert split_rhat(x) < 1.02
    trend = np.linspace(0, 5, 2000) + rng.standard_normal(2000)
    assert split_rhat(trend) > 1.2


def test_ism_matches_quadrature():
    panel, d = one_unit_panel()
    kern = KernelParams(10.0)
    cfg = McmcConfig(n_iter=60_000, burn_in=10_000, thin=5, seed=2)
    chain = fit_ism(panel, d, kern, 0.1, cfg)
    s = posterior_summary(chain)
    _, _, mean, (lo, hi) = oracles.ism_quadrature(panel.y, d, kern.phi, kern.b0, 0.1)
    assert s.beta_mean[0] == pytest.approx(mean, rel=0.02)
    assert s.beta_q025[0] == pytest.approx(lo, rel=0.05)
    assert s.beta_q975[0] == pytest.approx(hi, rel=0.05)


def test_ism_prior_only_moments():
    panel = OutbreakPanel(np.zeros((1, 2), int))
    cfg = McmcConfig(n_iter=200_000, burn_in=10_000, thin=2, seed=6, use_likelihood=False)
    chain = fit_ism(panel, np.zeros((1, 1)), KernelParams(1.0), 0.1, cfg)
    beta = chain.draws["beta"][:, 0]
    alpha = chain.draws["alpha"]
    ratio = beta / alpha  # Exp(1) under the prior, independent of alpha
    se = ratio.std() / math.sqrt(ess_geyer(ratio))
    assert abs(ratio.mean() - 1.0) < 4 * se
    se_a = alpha.std() / math.sqrt(ess_geyer(alpha))
    assert abs(alpha.mean() - 2.5) < 4 * se_a


def test_ism_determinism():
    panel, d = one_unit_panel(T=200)
    cfg = McmcConfig(n_iter=500, burn_in=100, seed=3)
    a = fit_ism(panel, d, KernelParams(10.0), 0.1, cfg)
    b = fit_ism(panel, d, KernelParams(10.0), 0.1, cfg)
    assert np.array_equal(a.draws["beta"], b.draws["beta"])
    c = fit_ism(panel, d, KernelParams(10.0), 0.1, cfg.with_(seed=4))
    assert not np.array_equal(a.draws["beta"], c.draws["beta"])


def test_degenerate_start_raises():
    panel = OutbreakPanel(np.array([[0, 1, 0], [0, 0, 0]]))
    d = np.array([[0.0, 5.0], [5.0, 0.0]])
    with pytest.raises(DegeneratePosteriorError):
        fit_ism(panel, d, KernelParams(1.0), 0.0, McmcConfig(n_iter=10, burn_in=0))


def sdsm_data(n_side=10, T=150, seed=0, rho=400.0):
    g = np.arange(n_side) * 70.0
    xy = np.array([(x, y) for x in g for y in g])
    units = SpatialUnits([f"u{i}" for i in range(len(xy))], xy)
    sc = SimScenario(units, KernelParams(25.0), 0.02, T, "gp", GpHyperparams(-0.5, 1.0, rho), seed=seed)
    beta, panel = simulate(sc)
    return units, beta, panel, pairwise_distances(units)


def test_sdsm_support_and_spearman():
    units, beta, panel, d = sdsm_data()
    cfg = McmcConfig(n_iter=6000, burn_in=3000, thin=5, seed=1)
    chain = fit_sdsm_full(panel, d, KernelParams(25.0), 0.02, cfg)
    assert np.all(chain.draws["beta"] > 0)
    assert np.all((chain.draws["sigma"] > 0) & (chain.draws["sigma"] < 5))
    assert np.all(chain.draws["rho"] > 1)
    assert np.all((chain.draws["omega"] > -10) & (chain.draws["omega"] < 0))
    s = posterior_summary(chain)
    assert spearman(s.beta_mean, beta) > spearman(incidence_ranking(panel), beta)


def test_sdsm_squeezed_sigma_gives_flat_field():
    units, beta, panel, d = sdsm_data(n_side=6, T=60)
    cfg = McmcConfig(n_iter=3000, burn_in=1500, thin=5, seed=1, sigma_bounds=(0.0, 1e-3))
    s = posterior_summary(fit_sdsm_full(panel, d, KernelParams(25.0), 0.02, cfg))
    spread = np.log(s.beta_mean).std()
    assert spread < 0.01
    assert s.beta_mean == pytest.approx(np.exp(s.hyper["omega"]["mean"]) * np.ones(units.n), rel=0.01)


def test_sdsm_determinism_and_capacity():
    units, beta, panel, d = sdsm_data(n_side=5, T=40)
    cfg = McmcConfig(n_iter=400, burn_in=100, seed=8)
    a = fit_sdsm_full(panel, d, KernelParams(25.0), 0.02, cfg)
    b = fit_sdsm_full(panel, d, KernelParams(25.0), 0.02, cfg)
    assert np.array_equal(a.draws["beta"], b.draws["beta"])
    assert np.array_equal(a.draws["rho"], b.draws["rho"])
    with pytest.raises(CapacityError):
        fit_sdsm_full(panel, d, KernelParams(25.0), 0.02, cfg.with_(max_units_full=10))
