"""Command-line interface.

Every stochastic subcommand takes ``--seed`` and writes a ``manifest.json``
next to its CSV outputs. Options can also come from an INI-style config
file (``--config``); command-line flags win over the file.
"""

import argparse
import configparser
import json
import math
import os
import sys
import time
import types

import numpy as np

from . import __version__
from . import io as sio
from .errors import DataIOError, InvalidInputError, SismapError
from .evaluate import (
    BENCH_COLUMNS,
    BenchmarkSettings,
    evaluate_fit,
    fit_model,
    run_benchmark,
    summarise_benchmark,
    train_test_split,
)
from .mcmc import McmcConfig, posterior_summary
from .modelchoice import RuleParams, dependence_heuristic
from .picar import build_basis, choose_rank, load_basis, save_basis
from .rng import stream
from .simulate import GpHyperparams, IsmPrior, SimScenario, simulate
from .spatial import KernelParams, SpatialUnits, pairwise_distances
from .twostep import (
    QuietWindow,
    default_phi_grid,
    default_window_width,
    estimate_gamma_mom,
    estimate_phi_grid,
    find_quiet_window,
)

EXIT_CODES = """exit codes:
  0  success
  1  unexpected internal error
  2  invalid input or configuration
  3  file not found / unreadable
  4  capacity exceeded (e.g. full SDSM on too many units)
  5  numerical failure (factorisation, degenerate posterior)
  6  estimation failed (step one)
  7  mesh construction or coverage failure
  8  correlation undefined (constant values)
On failure a JSON error record is printed to stderr and written to
<out>/error.json when an output directory is known."""

# config keys that are not plain option names
_SECTIONS = {
    "simulate": "simulate",
    "estimate-background": "step1",
    "choose-model": "heuristic",
    "fit": "fit",
    "evaluate": "evaluate",
    "bench-table1": "benchmark",
    "pipeline": "pipeline",
}


def _add_mcmc(p):
    g = p.add_argument_group("MCMC")
    g.add_argument("--n-iter", type=int)
    g.add_argument("--burn-in", type=int)
    g.add_argument("--thin", type=int)
    g.add_argument("--exclude-infected-prev", action="store_const", const=True)


def _add_picar(p):
    g = p.add_argument_group("PICAR")
    g.add_argument("--rank", type=_rank, help="number of Moran basis vectors, or 'auto' to pick from "
                   "25, 50, 100 by held-out cross-entropy (default 50)")
    g.add_argument("--buffer", type=float, help="mesh buffer ring offset in km (default 5%% of extent)")
    g.add_argument("--basis-cache", help="directory holding (or receiving) the basis CSV set")


def _add_rule(p):
    g = p.add_argument_group("dependence rule")
    g.add_argument("--n-bins", type=int)
    g.add_argument("--n-perms", type=int)
    g.add_argument("--first-bins", type=int)
    g.add_argument("--min-exceed", type=int)


def _add_step1(p):
    g = p.add_argument_group("step one")
    g.add_argument("--t1", type=int, help="quiet window start (1-based)")
    g.add_argument("--t2", type=int, help="quiet window end (exclusive)")
    g.add_argument("--window-width", type=int, help="auto window width (default max(4, T/10))")
    g.add_argument("--grid-min", type=float)
    g.add_argument("--grid-max", type=float)
    g.add_argument("--grid-size", type=int)
    g.add_argument("--b0", type=float)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sismap",
        description="Susceptibility mapping for SIS outbreak panels.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"sismap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--from-manifest", help="replay the configuration recorded in a manifest.json")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        if data:
            p.add_argument("--locations", help="locations CSV (id,x,y)")
            p.add_argument("--panel", help="panel CSV (id,t,y)")

    p = sub.add_parser("simulate", help="simulate a field and an outbreak panel",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, data=False)
    p.add_argument("--locations", help="locations CSV; otherwise sites are drawn uniformly")
    p.add_argument("--n-units", type=int)
    p.add_argument("--width-km", type=float)
    p.add_argument("--height-km", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--b0", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--field", choices=["gp", "independent"])
    p.add_argument("--omega", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--p0", type=float)
    p.add_argument("--initial-ids", help="comma-separated ids infected at t=1")

    p = sub.add_parser("estimate-background", help="step one: background rate and kernel range",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    _add_step1(p)

    p = sub.add_parser("choose-model", help="ISM fit + cross-entropy correlogram verdict",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--step1", help="step1.json from estimate-background")
    _add_mcmc(p)
    _add_rule(p)

    p = sub.add_parser("fit", help="fit ISM, SDSM or SDSM-PICAR",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--model", choices=["ism", "sdsm", "sdsm-picar"])
    p.add_argument("--step1")
    p.add_argument("--save-chain", help="write raw draws to this CSV (.gz allowed)")
    _add_mcmc(p)
    _add_picar(p)

    p = sub.add_parser("evaluate", help="hold-out evaluation against a known field",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--beta-true", help="beta_true CSV (id,beta_true)")
    p.add_argument("--model", choices=["ism", "sdsm", "sdsm-picar"])
    p.add_argument("--step1")
    p.add_argument("--fraction", type=float, help="training fraction (default 0.9)")
    _add_mcmc(p)
    _add_picar(p)

    p = sub.add_parser("bench-table1", help="simulation benchmark over dependence levels",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, data=False)
    p.add_argument("--scenarios", help="comma list from independent,low,medium,high")
    p.add_argument("--models", help="comma list from ism,sdsm,sdsm-picar")
    p.add_argument("--replicates", type=int)
    p.add_argument("--n-units", type=int)
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--budget-seconds", type=float)
    p.add_argument("--true-step1", action="store_const", const=True,
                   help="use the true gamma and phi instead of estimating them")
    _add_mcmc(p)

    p = sub.add_parser("pipeline", help="step one, model choice, fit and optional evaluation",
                       epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--beta-true")
    _add_step1(p)
    _add_mcmc(p)
    _add_rule(p)
    _add_picar(p)
    p.add_argument("--spatial-model", choices=["sdsm", "sdsm-picar"],
                   help="model used when the verdict is dependent (default sdsm)")
    return parser


def _rank(text):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rank must be an integer or 'auto', got {text!r}") from None


def _merge_manifest(args):
    """Fill unset options from the config echo of an earlier run."""
    src = getattr(args, "from_manifest", None)
    if not src:
        return args
    rec = sio.read_json(src)
    if rec.get("command") != args.command:
        raise InvalidInputError(f"{src}: manifest is for '{rec.get('command')}', not '{args.command}'")
    for key, val in rec.get("config", {}).items():
        if key in ("out", "from_manifest", "command") or not hasattr(args, key):
            continue
        if getattr(args, key) is None:
            setattr(args, key, val)
    return args


def _merge_config(args):
    """Fill unset options from the config file section of the subcommand."""
    if not getattr(args, "config", None):
        return args
    if not os.path.exists(args.config):
        raise DataIOError(f"config file not found: {args.config}", args.config)
    cp = configparser.ConfigParser()
    cp.read(args.config, encoding="utf-8")
    sections = ["common", _SECTIONS[args.command], "mcmc", "picar", "step1", "heuristic"]
    for sec in sections:
        if not cp.has_section(sec):
            continue
        for key, raw in cp.items(sec):
            attr = key.replace("-", "_")
            if attr == "t":
                attr = "T"
            if not hasattr(args, attr) or getattr(args, attr) is not None:
                continue
            setattr(args, attr, _coerce(raw))
    return args


def _coerce(raw):
    raw = raw.strip()
    if raw.lower() in ("true", "yes", "on"):
        return True
    if raw.lower() in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def _opt(args, name, default):
    v = getattr(args, name, None)
    return default if v is None else v


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise InvalidInputError(f"--{n.replace('_', '-')} is required")


class _Run:
    """Collects the manifest for one subcommand invocation."""

    def __init__(self, args):
        self.args = args
        self.out = _opt(args, "out", ".")
        os.makedirs(self.out, exist_ok=True)
        self.t0 = time.perf_counter()
        self.inputs = {}
        self.decisions = {}
        self.outputs = []

    def path(self, name):
        p = os.path.join(self.out, name)
        self.outputs.append(name)
        return p

    def input(self, path):
        if path is None:
            return None
        if not os.path.exists(path):
            raise DataIOError(f"input file not found: {path}", path)
        digest = sio.file_digest(path)
        _check_upstream(path, digest)
        self.inputs[path] = digest
        return path

    def manifest(self):
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        sio.write_json(os.path.join(self.out, "manifest.json"), {
            "tool": "sismap",
            "version": __version__,
            "command": self.args.command,
            "config": config,
            "inputs": self.inputs,
            "outputs": {n: sio.file_digest(os.path.join(self.out, n)) for n in sorted(set(self.outputs))
                        if os.path.exists(os.path.join(self.out, n))},
            "decisions": self.decisions,
            "wall_clock_seconds": time.perf_counter() - self.t0,
        })


def _check_upstream(path, digest):
    """Refuse an artifact that changed since the run that produced it."""
    man = os.path.join(os.path.dirname(os.path.abspath(path)), "manifest.json")
    if not os.path.exists(man):
        return
    try:
        recorded = sio.read_json(man).get("outputs", {})
    except SismapError:
        return
    name = os.path.basename(path)
    if name in recorded and recorded[name] != digest:
        raise InvalidInputError(f"{path}: contents differ from the digest recorded in {man}")


def _mcmc_config(args, seed, label):
    return McmcConfig(
        n_iter=_opt(args, "n_iter", 50000),
        burn_in=_opt(args, "burn_in", 20000),
        thin=_opt(args, "thin", 10),
        seed=int(stream(seed, label).integers(2**63)),
        exclude_infected_prev=bool(_opt(args, "exclude_infected_prev", False)),
    )


def _load_data(run, args):
    _require(args, "locations", "panel")
    units = sio.read_locations(run.input(args.locations))
    panel = sio.read_panel(run.input(args.panel), units)
    return units, panel


def _load_step1(run, args):
    _require(args, "step1")
    rep = sio.read_json(run.input(args.step1))
    try:
        return float(rep["gamma"]), KernelParams(float(rep["phi"]), float(rep["b0"]))
    except (KeyError, TypeError, ValueError):
        raise InvalidInputError(f"{args.step1}: not a step-one report") from None


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args, run):
    seed = _opt(args, "seed", None)
    if seed is None:
        raise InvalidInputError("--seed is required for simulate")
    if args.locations:
        units = sio.read_locations(run.input(args.locations))
    else:
        n = _opt(args, "n_units", 250)
        xy = stream(seed, "sites").uniform(
            [0.0, 0.0], [_opt(args, "width_km", 1500.0), _opt(args, "height_km", 700.0)], size=(n, 2))
        units = SpatialUnits([f"s{i:04d}" for i in range(n)], xy)
    kind = _opt(args, "field", "gp")
    if kind == "gp":
        params = GpHyperparams(_opt(args, "omega", -1.5), _opt(args, "sigma2", 1.0), _opt(args, "rho", 400.0))
    else:
        params = IsmPrior(_opt(args, "alpha", math.exp(-1.0)))
    init = args.initial_ids.split(",") if args.initial_ids else None
    sc = SimScenario(
        units=units,
        kernel=KernelParams(_opt(args, "phi", 10.0), _opt(args, "b0", 3.0)),
        gamma=_opt(args, "gamma", 0.1),
        T=_opt(args, "T", 100),
        field_kind=kind,
        field_params=params,
        seed=seed,
        p0=_opt(args, "p0", 0.05),
        initial_ids=init,
    )
    beta, panel = simulate(sc)
    sio.write_locations(run.path("locations.csv"), units)
    sio.write_panel(run.path("panel.csv"), panel)
    sio.write_beta(run.path("beta_true.csv"), units.ids, beta)
    echo = configparser.ConfigParser()
    echo["simulate"] = {
        "seed": str(seed), "n_units": str(units.n), "phi": repr(sc.kernel.phi), "b0": repr(sc.kernel.b0),
        "gamma": repr(sc.gamma), "T": str(sc.T), "field": kind, "p0": repr(sc.p0),
        **({"omega": repr(params.omega), "sigma2": repr(params.sigma2), "rho": repr(params.rho)}
           if kind == "gp" else {"alpha": repr(params.alpha)}),
    }
    with open(run.path("scenario.ini"), "w", encoding="utf-8") as fh:
        echo.write(fh)
    run.decisions.update(incidence=float(panel.y.mean()))


def _step_one(args, units, panel, d):
    T = panel.T
    if args.t1 is not None or args.t2 is not None:
        _require(args, "t1", "t2")
        window = QuietWindow(args.t1, args.t2)
        auto = False
    else:
        window = find_quiet_window(panel, _opt(args, "window_width", default_window_width(T)))
        auto = True
    g = estimate_gamma_mom(panel, window)
    b0 = _opt(args, "b0", 3.0)
    m = _opt(args, "grid_size", 20)
    if args.grid_min is not None or args.grid_max is not None:
        base = default_phi_grid(d, m)
        grid = np.geomspace(_opt(args, "grid_min", base[0]), _opt(args, "grid_max", base[-1]), m)
    else:
        grid = default_phi_grid(d, m)
    ph = estimate_phi_grid(panel, d, grid, b0)
    report = {
        "gamma": g.gamma,
        "phi": ph.phi,
        "b0": b0,
        "window": {"t1": window.t1, "t2": window.t2, "auto": auto, "n_outbreaks": g.n_outbreaks},
        "gamma_degenerate": g.degenerate,
        "grid": ph.grid,
        "residuals": ph.residuals,
        "amplitudes": ph.amplitudes,
        "criterion": "least squares with profiled amplitude per candidate",
    }
    return report, ph


def cmd_estimate_background(args, run):
    units, panel = _load_data(run, args)
    d = pairwise_distances(units)
    report, ph = _step_one(args, units, panel, d)
    sio.write_json(run.path("step1.json"), report)
    sio.write_rows(run.path("phi_residuals.csv"), sio.SCHEMAS["phi_residuals"],
                   zip(ph.grid, ph.residuals, ph.amplitudes))
    run.decisions.update(gamma_hat=report["gamma"], phi_hat=report["phi"], b0=report["b0"])


def _rule(args):
    return RuleParams(
        first_bins=_opt(args, "first_bins", 5),
        min_exceed=_opt(args, "min_exceed", 2),
        n_bins=_opt(args, "n_bins", 20),
        n_permutations=_opt(args, "n_perms", 999),
    )


def _choose(args, run, units, panel, d, gamma, kernel, prefix=""):
    seed = _seed(args)
    cfg = _mcmc_config(args, seed, "choose-model")
    cg, dec = dependence_heuristic(panel, units, d, kernel, gamma, cfg, _rule(args),
                                   seed=int(stream(seed, "correlogram").integers(2**63)))
    sio.write_rows(run.path(prefix + "correlogram.csv"), sio.SCHEMAS["correlogram"],
                   zip(cg.bin_centers, cg.estimate, cg.env_lo, cg.env_hi, cg.n_pairs))
    sio.write_rows(run.path(prefix + "losses.csv"), sio.SCHEMAS["losses"], zip(units.ids, dec.losses))
    record = {"verdict": dec.verdict, "model": dec.model, "flagged_bins": dec.flagged_bins,
              "rule": vars(dec.rule) if hasattr(dec.rule, "__dict__") else str(dec.rule),
              "point_estimate": "posterior mean"}
    with open(run.path(prefix + "verdict.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(sio._jsonable(record), sort_keys=True) + "\n")
    run.decisions.update(verdict=dec.verdict, recommended_model=dec.model)
    return dec


def _seed(args):
    seed = _opt(args, "seed", None)
    if seed is None:
        raise InvalidInputError("--seed is required for stochastic subcommands")
    return seed


def cmd_choose_model(args, run):
    units, panel = _load_data(run, args)
    gamma, kernel = _load_step1(run, args)
    _choose(args, run, units, panel, pairwise_distances(units), gamma, kernel)


def _basis_for(args, run, units, fit_units=None, auto=None):
    cache = getattr(args, "basis_cache", None)
    if cache and os.path.exists(os.path.join(cache, "M.csv")):
        basis = load_basis(cache)
        for name in ("vertices.csv", "M.csv", "A.csv"):
            run.input(os.path.join(cache, name))
        return basis
    rank = _opt(args, "rank", 50)
    if rank == "auto":
        if auto is None:
            raise InvalidInputError("--rank auto needs panel data")
        panel, d, kernel, gamma, cfg = auto
        rank, scores = choose_rank(units if fit_units is None else fit_units, panel, d, kernel, gamma,
                                   cfg=cfg, buffer=args.buffer, seed=cfg.seed)
        run.decisions.update(rank=rank, rank_scores={str(k): v for k, v in scores.items()})
    basis = build_basis(units, rank=rank, buffer=args.buffer, fit_units=fit_units)
    if cache:
        save_basis(basis, cache)
    return basis


def _write_fit(run, chain, prefix="", save_chain=None):
    s = posterior_summary(chain)
    sio.write_rows(run.path(prefix + "posterior_summary.csv"), sio.SCHEMAS["posterior_summary"],
                   zip(s.ids, s.beta_mean, s.beta_sd, s.beta_q025, s.beta_q975))
    sio.write_rows(run.path(prefix + "hyper_summary.csv"), sio.SCHEMAS["hyper_summary"],
                   ((k, v["mean"], v["sd"], v["q025"], v["q975"], v["ess"], v["rhat"])
                    for k, v in sorted(s.hyper.items())))
    if save_chain:
        names, cols = [], []
        for k in sorted(chain.draws):
            arr = chain.draws[k]
            if arr.ndim == 1:
                names.append(k)
                cols.append(arr[:, None])
            else:
                ids = chain.ids if k == "beta" else range(arr.shape[1])
                names.extend(f"{k}[{i}]" for i in ids)
                cols.append(arr)
        data = np.hstack(cols + [chain.log_post[:, None]])
        out = save_chain if os.path.isabs(save_chain) else os.path.join(run.out, save_chain)
        sio.write_rows(out, ["draw"] + names + ["log_post"],
                       ([i] + list(row) for i, row in enumerate(data)))
        run.outputs.append(os.path.relpath(out, run.out))
    rhat = max((v["rhat"] for v in s.hyper.values() if np.isfinite(v["rhat"])), default=float("nan"))
    print(f"{chain.model}: {chain.n_draws} draws, max split R-hat {rhat:.3f}", file=sys.stderr)
    return s


def _single_unit(run, args):
    """A one-row locations file, accepted only where geometry plays no role."""
    _require(args, "locations", "panel")
    ids, _ = sio.read_location_table(run.input(args.locations))
    if len(ids) != 1:
        return None
    panel = sio.read_panel(run.input(args.panel), types.SimpleNamespace(ids=ids))
    return panel


def cmd_fit(args, run):
    model = _opt(args, "model", "ism")
    panel = _single_unit(run, args) if model == "ism" else None
    if panel is not None:
        units, d = None, np.zeros((1, 1))
    else:
        units, panel = _load_data(run, args)
        d = pairwise_distances(units)
    gamma, kernel = _load_step1(run, args)
    seed = _seed(args)
    auto = (panel, d, kernel, gamma, _mcmc_config(args, seed, "rank"))
    basis = _basis_for(args, run, units, auto=auto) if model == "sdsm-picar" else None
    chain = fit_model(model, panel, d, kernel, gamma, _mcmc_config(args, seed, "fit"), basis=basis)
    _write_fit(run, chain, save_chain=args.save_chain)
    run.decisions.update(model=model, gamma=gamma, phi=kernel.phi, b0=kernel.b0,
                         acceptance={k: float(np.mean(v)) for k, v in chain.acceptance.items()})


def cmd_evaluate(args, run):
    units, panel = _load_data(run, args)
    _require(args, "beta_true")
    _, beta_true = sio.read_beta(run.input(args.beta_true), units)
    seed = _seed(args)
    model = _opt(args, "model", "ism")
    split = train_test_split(units, _opt(args, "fraction", 0.9), seed=seed)
    tr = units.index_of(split.train_ids)
    d = pairwise_distances(units)
    if args.step1:
        gamma, kernel = _load_step1(run, args)
    else:
        report, _ = _step_one(_Step1Defaults(), units.subset(tr), panel.subset(tr), d[np.ix_(tr, tr)])
        gamma, kernel = report["gamma"], KernelParams(report["phi"], report["b0"])
    basis = None
    if model == "sdsm-picar":
        auto = (panel.subset(tr), d[np.ix_(tr, tr)], kernel, gamma, _mcmc_config(args, seed, "rank"))
        basis = _basis_for(args, run, units, fit_units=units.subset(tr), auto=auto)
    chain = fit_model(model, panel.subset(tr), d[np.ix_(tr, tr)], kernel, gamma,
                      _mcmc_config(args, seed, "evaluate"), basis=basis)
    rep = evaluate_fit(model, chain, units, panel, beta_true, split, d, kernel, gamma, basis)
    rows = [("mspe_test", rep.mspe_test), ("spearman_model", rep.spearman_model),
            ("spearman_incidence", rep.spearman_incidence), ("oos_cross_entropy", rep.oos_cross_entropy)]
    sio.write_rows(run.path("evaluation.csv"), ("metric", "value"), rows)
    sio.write_rows(run.path("split.csv"), ("id", "role"),
                   [(u, "train") for u in split.train_ids] + [(u, "test") for u in split.test_ids])
    run.decisions.update(model=model, **dict(rows))


class _Step1Defaults:
    t1 = t2 = window_width = grid_min = grid_max = grid_size = b0 = None


def cmd_bench_table1(args, run):
    seed = _seed(args)
    base = BenchmarkSettings()
    settings = BenchmarkSettings(
        n_units=_opt(args, "n_units", base.n_units),
        T=_opt(args, "T", base.T),
        n_iter=_opt(args, "n_iter", base.n_iter),
        burn_in=_opt(args, "burn_in", base.burn_in),
        thin=_opt(args, "thin", base.thin),
        estimate_step1=not bool(_opt(args, "true_step1", False)),
    )
    scenarios = _opt(args, "scenarios", "independent,low,medium,high").split(",")
    models = _opt(args, "models", "ism,sdsm,sdsm-picar").split(",")
    rows = run_benchmark(scenarios, models, _opt(args, "replicates", 20), settings, seed,
                         threads=_opt(args, "threads", 1), budget_seconds=args.budget_seconds)
    sio.write_rows(run.path("benchmark.csv"), BENCH_COLUMNS,
                   ([r[c] for c in BENCH_COLUMNS] for r in rows))
    table, checks = summarise_benchmark(rows)
    sio.write_rows(run.path("table1.csv"), sio.SCHEMAS["table1"],
                   ((sc, m, v["mspe"], v["spearman_model"], v["spearman_incidence"], v["oos_ce"])
                    for (sc, m), v in table.items()))
    sio.write_json(run.path("checks.json"), checks)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    run.decisions.update(checks=checks, settings=vars(settings) if hasattr(settings, "__dict__") else
                         {k: getattr(settings, k) for k in settings.__dataclass_fields__})


class _Stage:
    """Tag errors raised inside a pipeline stage with its name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, err, tb):
        if err is not None and not hasattr(err, "stage"):
            try:
                err.stage = self.name
            except AttributeError:
                pass
        return False


def cmd_pipeline(args, run):
    with _Stage("load"):
        units, panel = _load_data(run, args)
    seed = _seed(args)
    d = pairwise_distances(units)
    with _Stage("estimate-background"):
        report, ph = _step_one(args, units, panel, d)
    sio.write_json(run.path("step1.json"), report)
    sio.write_rows(run.path("phi_residuals.csv"), sio.SCHEMAS["phi_residuals"],
                   zip(ph.grid, ph.residuals, ph.amplitudes))
    gamma, kernel = report["gamma"], KernelParams(report["phi"], report["b0"])
    run.decisions.update(gamma_hat=gamma, phi_hat=kernel.phi, b0=kernel.b0)
    with _Stage("choose-model"):
        dec = _choose(args, run, units, panel, d, gamma, kernel)
    model = dec.model
    if model == "sdsm":
        model = _opt(args, "spatial_model", "sdsm")
    with _Stage("fit"):
        auto = (panel, d, kernel, gamma, _mcmc_config(args, seed, "rank"))
        basis = _basis_for(args, run, units, auto=auto) if model == "sdsm-picar" else None
        chain = fit_model(model, panel, d, kernel, gamma, _mcmc_config(args, seed, "fit"), basis=basis)
        s = _write_fit(run, chain)
    run.decisions.update(fitted_model=model)
    if args.beta_true:
        _, beta_true = sio.read_beta(run.input(args.beta_true), units)
        from .evaluate import spearman, incidence_ranking

        rows = [("spearman_model", spearman(s.beta_mean, beta_true)),
                ("spearman_incidence", spearman(incidence_ranking(panel), beta_true)),
                ("mse_in_sample", float(np.mean((s.beta_mean - beta_true) ** 2)))]
        sio.write_rows(run.path("evaluation.csv"), ("metric", "value"), rows)
        run.decisions.update(**dict(rows))


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate-background": cmd_estimate_background,
    "choose-model": cmd_choose_model,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "bench-table1": cmd_bench_table1,
    "pipeline": cmd_pipeline,
}


def run(argv=None):
    """Entry point returning the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    out = getattr(args, "out", None)
    try:
        args = _merge_config(_merge_manifest(args))
        if getattr(args, "threads", None) is None and hasattr(args, "threads"):
            args.threads = os.cpu_count() or 1
        out = getattr(args, "out", None)
        r = _Run(args)
        COMMANDS[args.command](args, r)
        r.manifest()
        return 0
    except SismapError as err:
        return _fail(err, err.exit_code, args.command, out)
    except (ValueError, OSError) as err:
        return _fail(err, 2 if isinstance(err, ValueError) else 3, args.command, out)


def _fail(err, code, command, out):
    record = {"error": type(err).__name__, "message": str(err), "exit_code": code, "command": command}
    path = getattr(err, "filename", None)
    if path:
        record["path"] = path
    stage = getattr(err, "stage", None)
    if stage:
        record["stage"] = stage
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out:
        try:
            sio.write_json(os.path.join(out, "error.json"), record)
        except OSError:
            pass
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
