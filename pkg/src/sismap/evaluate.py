"""Hold-out evaluation and the simulation benchmark harness."""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .epimodel import PanelLikelihood, cross_entropy_by_unit
from .errors import InvalidInputError, SismapError, UndefinedCorrelationError
from .mcmc import McmcConfig, fit_ism, fit_sdsm_full, posterior_summary
from .picar import build_basis, fit_sdsm_picar, projector
from .rng import stream
from .simulate import GpHyperparams, IsmPrior, SimScenario, jittered_cholesky, simulate
from .spatial import KernelParams, SpatialUnits, pairwise_distances
from .twostep import (
    default_phi_grid,
    default_window_width,
    estimate_gamma_mom,
    estimate_phi_grid,
    find_quiet_window,
)

__all__ = [
    "Split",
    "EvalReport",
    "BenchmarkSettings",
    "train_test_split",
    "mspe",
    "spearman",
    "incidence_ranking",
    "oos_cross_entropy",
    "predict_test_beta",
    "fit_model",
    "evaluate_fit",
    "benchmark_scenarios",
    "run_replicate",
    "run_benchmark",
    "summarise_benchmark",
    "BENCH_COLUMNS",
]

BENCH_COLUMNS = (
    "scenario", "model", "replicate", "mspe", "spearman_model",
    "spearman_incidence", "oos_ce", "seconds",
)


@dataclass(frozen=True)
class Split:
    train_ids: tuple
    test_ids: tuple
    fraction: float
    seed: int


@dataclass
class EvalReport:
    mspe_test: float
    spearman_model: float
    spearman_incidence: float
    oos_cross_entropy: float
    model: str = ""
    scenario: dict = field(default_factory=dict)
    seconds: float = 0.0

    def as_dict(self):
        return asdict(self)


def train_test_split(units, fraction=0.9, seed=0, rng=None):
    """Random partition of unit ids with ``round(fraction * N)`` in training."""
    if not 0 < fraction < 1:
        raise InvalidInputError("fraction must lie strictly between 0 and 1")
    ids = units.ids if isinstance(units, SpatialUnits) else tuple(units)
    n = len(ids)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise InvalidInputError(f"fraction {fraction} leaves an empty side with N={n}")
    g = stream(seed, "split") if rng is None else rng
    perm = g.permutation(n)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    return Split(tuple(ids[i] for i in train), tuple(ids[i] for i in test), fraction, seed)


def mspe(beta_hat, beta_true, test_index):
    """Mean squared error over the positions in ``test_index``."""
    idx = np.asarray(test_index, dtype=int)
    if idx.size == 0:
        raise InvalidInputError("empty test set")
    diff = np.asarray(beta_hat, float)[idx] - np.asarray(beta_true, float)[idx]
    return float(np.mean(diff * diff))


def _midranks(x):
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys):
    """Spearman correlation using average ranks for ties."""
    rx, ry = _midranks(xs), _midranks(ys)
    if rx.size != ry.size:
        raise InvalidInputError("inputs differ in length")
    if rx.size < 3:
        raise InvalidInputError("need at least three observations")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        raise UndefinedCorrelationError("zero rank variance")
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def incidence_ranking(panel):
    """Per-unit share of time steps with an outbreak."""
    return panel.y.mean(axis=1)


def oos_cross_entropy(panel_test, probs):
    """Total cross-entropy over held-out units and t = 2..T."""
    return float(cross_entropy_by_unit(panel_test, probs).sum())


def predict_test_beta(chain, model, d_train_test=None, d_train=None, A_test=None, basis=None):
    """Point predictions of susceptibility at held-out locations.

    ISM: posterior mean of ``alpha``. SDSM: exponentiated kriging mean of
    ``log beta`` at posterior-mean hyperparameters. PICAR: exponentiated
    projection of the posterior-mean basis field.
    """
    if model == "ism":
        return np.full(d_train_test.shape[1] if d_train_test is not None else A_test.shape[0],
                       float(chain.draws["alpha"].mean()))
    if model == "sdsm":
        logb = np.log(chain.draws["beta"]).mean(axis=0)
        omega = float(chain.draws["omega"].mean())
        inv_rho = float((1.0 / chain.draws["rho"]).mean())
        R = np.exp(-d_train * inv_rho)
        L, _ = jittered_cholesky(R)
        w = linalg.cho_solve((L, True), logb - omega)
        return np.exp(omega + np.exp(-d_train_test.T * inv_rho) @ w)
    if model == "sdsm-picar":
        delta = chain.draws["delta"].mean(axis=0)
        omega = float(chain.draws["omega"].mean())
        return np.exp(np.asarray(A_test @ (basis.M @ delta)) + omega)
    raise InvalidInputError(f"unknown model {model!r}")


def fit_model(model, panel, d, kernel, gamma, cfg, basis=None, rank=50, buffer=None, units=None):
    if model == "ism":
        return fit_ism(panel, d, kernel, gamma, cfg)
    if model == "sdsm":
        return fit_sdsm_full(panel, d, kernel, gamma, cfg)
    if model == "sdsm-picar":
        if basis is None:
            basis = build_basis(units, rank=rank, buffer=buffer)
        return fit_sdsm_picar(panel, d, kernel, gamma, basis, cfg)
    raise InvalidInputError(f"unknown model {model!r}")


def evaluate_fit(model, chain, units, panel, beta_true, split, d, kernel, gamma, basis=None):
    """Score a fitted chain against the truth on a train/test split.

    ``units``, ``panel``, ``beta_true`` and ``d`` cover all units; the chain
    was fitted on ``split.train_ids``.
    """
    tr = units.index_of(split.train_ids)
    te = units.index_of(split.test_ids)
    A_test = None
    if model == "sdsm-picar":
        A_test = projector(basis.mesh, units.subset(te))
    beta_te = predict_test_beta(chain, model, d[np.ix_(tr, te)], d[np.ix_(tr, tr)], A_test, basis)
    beta_tr = posterior_summary(chain).beta_mean
    beta_hat = np.empty(units.n)
    beta_hat[tr] = beta_tr
    beta_hat[te] = beta_te
    # test-unit probabilities use the full infectious history of the panel
    lik = PanelLikelihood(panel, d, kernel, gamma)
    probs = lik.probabilities(beta_hat)[te]
    return EvalReport(
        mspe_test=mspe(beta_hat, beta_true, te),
        spearman_model=spearman(beta_tr, np.asarray(beta_true)[tr]),
        spearman_incidence=spearman(incidence_ranking(panel)[tr], np.asarray(beta_true)[tr]),
        oos_cross_entropy=oos_cross_entropy(panel.y[te], probs),
        model=model,
    )


@dataclass(frozen=True)
class BenchmarkSettings:
    """Desk-scale simulation study settings (none of these are published)."""

    n_units: int = 250
    width_km: float = 1500.0
    height_km: float = 700.0
    T: int = 100
    phi: float = 10.0
    b0: float = 3.0
    gamma: float = 0.1
    omega: float = -1.5
    sigma2: float = 1.0
    p0: float = 0.05
    train_fraction: float = 0.9
    estimate_step1: bool = True
    picar_rank: int = 50
    n_iter: int = 6000
    burn_in: int = 3000
    thin: int = 5

    @property
    def alpha(self):
        """Mean of the independent scenario, matched to the GP field mean."""
        return math.exp(self.omega + 0.5 * self.sigma2)


def benchmark_scenarios(settings=None):
    s = settings or BenchmarkSettings()
    return {
        "independent": ("independent", IsmPrior(s.alpha)),
        "low": ("gp", GpHyperparams(s.omega, s.sigma2, 200.0)),
        "medium": ("gp", GpHyperparams(s.omega, s.sigma2, 400.0)),
        "high": ("gp", GpHyperparams(s.omega, s.sigma2, 600.0)),
    }


def _replicate_units(settings, seed):
    xy = stream(seed, "sites").uniform([0.0, 0.0], [settings.width_km, settings.height_km],
                                       size=(settings.n_units, 2))
    return SpatialUnits([f"s{i:04d}" for i in range(settings.n_units)], xy)


def step_one(panel, d, b0=3.0, grid=None, window=None):
    """Background rate and kernel range from a panel (defaults as the CLI)."""
    window = window or find_quiet_window(panel, default_window_width(panel.T))
    g = estimate_gamma_mom(panel, window)
    grid = default_phi_grid(d) if grid is None else grid
    ph = estimate_phi_grid(panel, d, grid, b0)
    return g, ph


def run_replicate(scenario_name, replicate, models=("ism", "sdsm", "sdsm-picar"),
                  settings=None, master_seed=0):
    """Simulate one replicate, fit each model on 90% of units and score it."""
    s = settings or BenchmarkSettings()
    kind, params = benchmark_scenarios(s)[scenario_name]
    seed = int(stream(master_seed, "bench", scenario_name, replicate).integers(2**63))
    units = _replicate_units(s, seed)
    d = pairwise_distances(units)
    true_kernel = KernelParams(s.phi, s.b0)
    sc = SimScenario(units, true_kernel, s.gamma, s.T, kind, params, seed=seed, p0=s.p0)
    beta_true, panel = simulate(sc)
    split = train_test_split(units, s.train_fraction, seed=seed)
    tr = units.index_of(split.train_ids)
    panel_tr = panel.subset(tr)
    d_tr = d[np.ix_(tr, tr)]
    if s.estimate_step1:
        g, ph = step_one(panel_tr, d_tr, s.b0)
        gamma, kernel = g.gamma, KernelParams(ph.phi, s.b0)
    else:
        gamma, kernel = s.gamma, true_kernel
    rows = []
    for model in models:
        t0 = time.perf_counter()
        cfg = McmcConfig(n_iter=s.n_iter, burn_in=s.burn_in, thin=s.thin,
                         seed=int(stream(seed, "mcmc", model).integers(2**63)))
        basis = None
        try:
            if model == "sdsm-picar":
                # mesh on all locations so held-out units project onto it
                basis = build_basis(units, rank=s.picar_rank, fit_units=units.subset(tr))
            chain = fit_model(model, panel_tr, d_tr, kernel, gamma, cfg, basis=basis)
            rep = evaluate_fit(model, chain, units, panel, beta_true, split, d, kernel, gamma, basis)
            row = dict(scenario=scenario_name, model=model, replicate=replicate,
                       mspe=rep.mspe_test, spearman_model=rep.spearman_model,
                       spearman_incidence=rep.spearman_incidence, oos_ce=rep.oos_cross_entropy)
        except SismapError as err:
            row = dict(scenario=scenario_name, model=model, replicate=replicate, mspe=math.nan,
                       spearman_model=math.nan, spearman_incidence=math.nan, oos_ce=math.nan,
                       error=str(err))
        row["seconds"] = time.perf_counter() - t0
        row["gamma_hat"] = gamma
        row["phi_hat"] = kernel.phi
        rows.append(row)
    return rows


def _run_cell(args):
    return run_replicate(*args)


def run_benchmark(scenarios=("independent", "low", "medium", "high"),
                  models=("ism", "sdsm", "sdsm-picar"), replicates=20, settings=None,
                  master_seed=0, threads=1, budget_seconds=None, progress=None):
    """Run every (scenario, replicate) cell; rows come back in cell order.

    Cells past ``budget_seconds`` are skipped and reported with
    ``flag='budget'``.
    """
    settings = settings or BenchmarkSettings()
    cells = [(sc, r, tuple(models), settings, master_seed)
             for sc in scenarios for r in range(replicates)]
    start = time.perf_counter()
    rows = []
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            for out in pool.map(_run_cell, cells):
                rows.extend(out)
        return rows
    for cell in cells:
        if budget_seconds is not None and time.perf_counter() - start > budget_seconds:
            for m in models:
                rows.append(dict(scenario=cell[0], model=m, replicate=cell[1], mspe=math.nan,
                                 spearman_model=math.nan, spearman_incidence=math.nan,
                                 oos_ce=math.nan, seconds=0.0, flag="budget"))
            continue
        out = _run_cell(cell)
        if progress:
            progress(out)
        rows.extend(out)
    return rows


def summarise_benchmark(rows):
    """Median metrics per (scenario, model) plus the ordering checks."""
    cells = {}
    for r in rows:
        cells.setdefault((r["scenario"], r["model"]), []).append(r)
    table = {}
    for key, rs in cells.items():
        table[key] = {
            k: float(np.nanmedian([x[k] for x in rs])) if any(np.isfinite(x[k]) for x in rs) else math.nan
            for k in ("mspe", "spearman_model", "spearman_incidence", "oos_ce")
        }
        wins = [x["spearman_model"] > x["spearman_incidence"] for x in rs
                if np.isfinite(x["spearman_model"]) and np.isfinite(x["spearman_incidence"])]
        table[key]["spearman_win_rate"] = float(np.mean(wins)) if wins else math.nan
    checks = {}

    def med(sc, m):
        return table.get((sc, m), {}).get("mspe", math.nan)

    if ("independent", "ism") in table:
        checks["independent: ISM best"] = bool(
            med("independent", "ism") < med("independent", "sdsm")
            and med("independent", "ism") < med("independent", "sdsm-picar")
        )
    for sc in ("low", "medium", "high"):
        if (sc, "ism") in table:
            checks[f"{sc}: spatial models beat ISM"] = bool(
                med(sc, "sdsm") < med(sc, "ism") and med(sc, "sdsm-picar") < med(sc, "ism")
            )
    if ("medium", "sdsm") in table:
        checks["medium: SDSM Spearman beats incidence in >=75% of replicates"] = bool(
            table[("medium", "sdsm")]["spearman_win_rate"] >= 0.75
        )
    return table, checks
