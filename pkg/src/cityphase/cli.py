"""Command-line entry point.

Subcommands::

    cityphase sweep        --config run.toml [--seed N] [--workers N] [--out DIR] [--preset paper|desk]
    cityphase rfim fit     --grid phase_grid.csv [--t T] [--config run.toml] [--out DIR]
    cityphase rfim solve   --params rfim_params.json [--config run.toml] [--preset ...] [--out DIR]
    cityphase rfim critical --params rfim_params.json [--out DIR]
    cityphase diagnostics  --config run.toml [--mw MW] [--out DIR]
    cityphase cost         --config run.toml [--out DIR]

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import tempfile

import numpy as np
import scipy

from . import __version__, _seeding
from .config import CAPACITY_MODES, CATEGORIZATIONS, RfimConfig, load_config
from .critstats import distribution_summary, replica_diagnostics
from .ensemble import (
    GridSpec,
    SweepError,
    critical_diversity_empirical,
    diversity_seed,
    heatmap,
    run_cell,
    sweep_grid,
)
from .errors import CityPhaseError, ConfigError, NumericError, ValidationError
from .rfim import (
    FitConfig,
    RfimParams,
    critical_points,
    fit_parameters,
    free_energy_slice,
    rfim_phase_diagram,
)
from .tables import read_phase_grids, write_json, write_phase_grids, write_table

log = logging.getLogger("cityphase")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# helpers


def prepare_out(path):
    """Create ``path`` and prove it is writable before any computation."""
    os.makedirs(path, exist_ok=True)
    fd, probe = tempfile.mkstemp(prefix=".probe-", dir=path)
    os.close(fd)
    os.unlink(probe)
    return path


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, config_hash, seed, files, extra=None):
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": int(seed),
        "versions": {
            "cityphase": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "files": {name: file_sha256(os.path.join(out, name)) for name in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(out, "manifest.json"), manifest)


def _hash_obj(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _overrides(args):
    return {
        "seed": getattr(args, "seed", None),
        "workers": getattr(args, "workers", None),
        "out": getattr(args, "out", None),
        "preset": getattr(args, "preset", None),
    }


def _require_config(args):
    if not args.config:
        raise ConfigError(f"'{args.command}' needs --config")
    return load_config(args.config, _overrides(args))


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(cfg):
    out = prepare_out(cfg.out)
    portfolio = cfg.portfolio_for()
    hazard = cfg.hazard()
    log.info("sweep: %d buildings, %d cells", len(portfolio),
             len(cfg.grid.mw_values) * len(cfg.grid.sigma_values) * len(cfg.grid.t_values))
    result = sweep_grid(cfg.grid, portfolio, hazard, cfg.cell_options(retain_spins=False), cfg.workers)
    ens = result.ensembles

    rows = []
    for e in ens:
        for k in range(e.n_realizations):
            rows.append((e.t, e.mw, e.sigma, k, int(e.replicas[k]), int(e.seeds[k]),
                         float(e.damage_fractions[k]), float(e.cost_fractions[k])))
    write_table(os.path.join(out, "ensembles.csv"),
                ("t", "mw", "sigma", "realization", "replica", "block_seed", "m_d", "cost_fraction"), rows)
    write_phase_grids(os.path.join(out, "phase_grid.csv"), [result.phase_grids[float(t)] for t in cfg.grid.t_values])

    hrows = []
    for t in cfg.grid.t_values:
        at_t = [e for e in ens if e.t == float(t)]
        for axis, fixed_attr in (("mw", "sigma"), ("sigma", "mw")):
            for fixed in sorted({getattr(e, fixed_attr) for e in at_t}):
                hm = heatmap([e for e in at_t if getattr(e, fixed_attr) == fixed], axis)
                ii, kk = np.nonzero(hm.values)
                for i, k in zip(ii, kk):
                    hrows.append((float(t), axis, hm.fixed_value, float(hm.tuning_values[i]),
                                  float(hm.md_edges[k]), float(hm.md_edges[k + 1]), float(hm.values[i, k])))
    write_table(os.path.join(out, "heatmaps.csv"),
                ("t", "axis", "fixed_value", "tuning_value", "md_lo", "md_hi", "value"), hrows)

    files = ["ensembles.csv", "phase_grid.csv", "heatmaps.csv"]
    if cfg.critical_mw:
        crow = []
        for t in cfg.grid.t_values:
            for mw in cfg.critical_mw:
                crow.append((float(t), mw, critical_diversity_empirical(ens, mw, float(t))))
        write_table(os.path.join(out, "sigma_c.csv"), ("t", "mw", "sigma_c"), crow)
        files.append("sigma_c.csv")
    write_manifest(out, "sweep", cfg.config_hash(), cfg.seed, files)
    return files


# ---------------------------------------------------------------------------
# rfim


def _rfim_settings(args):
    if args.config:
        return load_config(args.config, _overrides(args))
    return None


def cmd_rfim_fit(args):
    cfg = _rfim_settings(args)
    rc = cfg.rfim if cfg else RfimConfig()
    out = prepare_out(args.out or (cfg.out if cfg else "results"))
    grids = read_phase_grids(args.grid)
    if args.t is not None:
        match = [t for t in grids if math.isclose(t, args.t, abs_tol=1e-12)]
        if not match:
            raise ValidationError(f"phase grid has no t={args.t}; available {sorted(grids)}")
        grid = grids[match[0]]
    elif len(grids) == 1:
        grid = next(iter(grids.values()))
    else:
        raise ValidationError(f"phase grid holds several temperatures {sorted(grids)}; pass --t")
    fc = FitConfig(rc.sigma_threshold, rc.ridge, rc.slope_prior, rc.n_starts)
    params = fit_parameters(grid, fc)
    write_json(os.path.join(out, "rfim_params.json"), params.to_dict())
    settings = {"grid_sha256": file_sha256(args.grid), "t": grid.t, "fit": fc.__dict__}
    write_manifest(out, "rfim fit", _hash_obj(settings), args.seed or 0, ["rfim_params.json"])
    return params


def _load_params(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return RfimParams.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None


def _write_critical(out, params):
    cp = critical_points(params)
    rows = [
        ("mw_c", math.nan if cp.mw_c is None else cp.mw_c, cp.mw_status),
        ("sigma_c", math.nan if cp.sigma_c is None else cp.sigma_c, cp.sigma_status),
    ]
    write_table(os.path.join(out, "critical_points.csv"), ("quantity", "value", "status"), rows)
    return cp


def cmd_rfim_solve(args):
    cfg = _rfim_settings(args)
    rc = cfg.rfim if cfg else RfimConfig()
    if cfg:
        grid = cfg.grid
    else:
        grid = GridSpec.paper() if args.preset == "paper" else GridSpec.desk()
    out = prepare_out(args.out or (cfg.out if cfg else "results"))
    params = _load_params(args.params)
    mw_axis, sg_axis = grid.mw_values, grid.sigma_values
    pg = rfim_phase_diagram(params, mw_axis, sg_axis)
    write_phase_grids(os.path.join(out, "rfim_phase_grid.csv"), [pg])
    cp = _write_critical(out, params)

    slice_mw = rc.slice_mw or ((cp.mw_c,) if cp.mw_c is not None else (float(np.median(mw_axis)),))
    m_grid = np.linspace(-1.0, 1.0, rc.m_points)
    rows = []
    for mw in slice_mw:
        fs = free_energy_slice([params.point(mw, s) for s in sg_axis], m_grid, rc.power_norm)
        for j, s in enumerate(sg_axis):
            for k in range(m_grid.size):
                rows.append((mw, float(s), float(fs.m[k]), float(fs.m_d[k]), float(fs.values[j, k])))
    write_table(os.path.join(out, "free_energy_slices.csv"), ("mw", "sigma", "m", "m_d", "f_norm"), rows)
    files = ["rfim_phase_grid.csv", "critical_points.csv", "free_energy_slices.csv"]
    settings = {"params_sha256": file_sha256(args.params), "mw": list(mw_axis), "sigma": list(sg_axis),
                "rfim": rc.__dict__}
    write_manifest(out, "rfim solve", _hash_obj(settings), args.seed or 0, files)
    return pg


def cmd_rfim_critical(args):
    out = prepare_out(args.out or "results")
    params = _load_params(args.params)
    cp = _write_critical(out, params)
    write_manifest(out, "rfim critical", _hash_obj({"params_sha256": file_sha256(args.params)}),
                   args.seed or 0, ["critical_points.csv"])
    return cp


# ---------------------------------------------------------------------------
# diagnostics


def cmd_diagnostics(cfg, mw=None):
    dg = cfg.diagnostics
    if not dg.retain_spins:
        raise ConfigError("diagnostics need spin matrices; set diagnostics.retain_spins = true in the config")
    mw = dg.mw if mw is None else mw
    if mw is None:
        raise ConfigError("diagnostics need a magnitude: set diagnostics.mw or pass --mw")
    out = prepare_out(cfg.out)
    portfolio = cfg.portfolio_for()
    hazard = cfg.hazard()
    sigmas = dg.sigmas or tuple(float(s) for s in cfg.grid.sigma_values)
    t = float(cfg.grid.t_values[0])
    div = diversity_seed(cfg.grid)

    sus, summ, corr, lan, pca = [], [], [], [], []
    for j, sg in enumerate(sigmas):
        seed = _seeding.mix_seed(cfg.seed, _seeding.TAG_CELL, 0, j, 0)
        ens = run_cell(mw, sg, t, portfolio, hazard, dg.n_realizations * dg.n_replicas, seed,
                       options=cfg.cell_options(retain_spins=True), n_replicas=dg.n_replicas, diversity_seed=div)
        reports = replica_diagnostics(ens, portfolio.positions, dg.f, dg.min_count, dg.dr, dg.r_max,
                                      dg.n_bins, dg.landau_k)
        for rp in reports:
            s = rp.summary
            sus.append((s.sigma, s.replica, s.chi_fluct, s.chi_curv, s.m_star, s.xi))
            if rp.profile is not None:
                for r, c, n in zip(rp.profile.r, rp.profile.normalized, rp.profile.pair_counts):
                    corr.append((s.sigma, s.replica, float(r), float(c), int(n)))
            L = rp.landau
            lan.append((s.sigma, s.replica, L.c0, L.c1, L.c2, L.c4, L.ck, L.k, L.m_star, L.chi, L.residual_norm))
            p = rp.pca
            r1 = math.nan if p.degenerate else float(p.explained[0])
            r2 = math.nan if p.degenerate or p.explained.size < 2 else float(p.explained[1])
            pca.append((s.sigma, s.replica, r1, r2, p.corr_pc1_md, p.degenerate))
        for name in ("chi_fluct", "chi_curv", "m_star", "xi"):
            d = distribution_summary([getattr(rp.summary, name) for rp in reports])
            summ.append((float(sg), name, d["median"], d["q25"], d["q75"], d["n"]))

    write_table(os.path.join(out, "susceptibility.csv"),
                ("sigma", "replica", "chi_fluct", "chi_curv", "m_star", "xi"), sus)
    write_table(os.path.join(out, "susceptibility_summary.csv"),
                ("sigma", "quantity", "median", "q25", "q75", "n"), summ)
    write_table(os.path.join(out, "correlations.csv"), ("sigma", "replica", "r", "C_over_C0", "pairs"), corr)
    write_table(os.path.join(out, "landau.csv"),
                ("sigma", "replica", "c0", "c1", "c2", "c4", "ck", "k", "m_star", "chi", "residual_norm"), lan)
    write_table(os.path.join(out, "pca.csv"),
                ("sigma", "replica", "pc1_ratio", "pc2_ratio", "corr_pc1_md", "degenerate"), pca)
    files = ["susceptibility.csv", "susceptibility_summary.csv", "correlations.csv", "landau.csv", "pca.csv"]
    write_manifest(out, "diagnostics", cfg.config_hash(), cfg.seed, files, {"mw": mw})
    return files


# ---------------------------------------------------------------------------
# cost


QUANTILES = (0.01, 0.05, 0.95, 0.99)


def cmd_cost(cfg):
    out = prepare_out(cfg.out)
    cc = cfg.cost
    hazard = cfg.hazard()
    portfolios = {cat: cfg.portfolio_for(cat) for cat in CATEGORIZATIONS}
    base = portfolios["individual"]
    if len(base) == 0 or not base.replacement_costs.sum() > 0:
        raise ValidationError("cost analysis needs replacement costs; the portfolio has none")
    mws = cc.mw or tuple(float(m) for m in cfg.grid.mw_values)
    t = float(cfg.grid.t_values[0])
    div = diversity_seed(cfg.grid)

    dist, exceed, samples = [], [], []
    for i, mw in enumerate(mws):
        seed = _seeding.mix_seed(cfg.seed, _seeding.TAG_COST, i)
        for cat in CATEGORIZATIONS:
            for mode in CAPACITY_MODES:
                ens = run_cell(mw, cc.sigma, t, portfolios[cat], hazard, cc.n_realizations, seed,
                               options=cfg.cell_options(capacity_mode=mode, retain_spins=False),
                               diversity_seed=div)
                r = ens.cost_fractions
                qs = np.quantile(r, QUANTILES)
                dist.append((mw, cat, mode, r.size, float(r.mean()), *map(float, qs)))
                exceed.append((mw, cat, mode, *(float(np.mean(r > thr)) for thr in cc.thresholds)))
                if cc.write_samples:
                    samples.extend((mw, cat, mode, k, float(v)) for k, v in enumerate(r))

    write_table(os.path.join(out, "cost_distributions.csv"),
                ("mw", "categorization", "capacity_mode", "n", "mean", "q01", "q05", "q95", "q99"), dist)
    write_table(os.path.join(out, "exceedance.csv"),
                ("mw", "categorization", "capacity_mode", *(f"p_exceed_{thr!r}" for thr in cc.thresholds)), exceed)
    files = ["cost_distributions.csv", "exceedance.csv"]
    if cc.write_samples:
        write_table(os.path.join(out, "cost_samples.csv"),
                    ("mw", "categorization", "capacity_mode", "realization", "cost_fraction"), samples)
        files.append("cost_samples.csv")
    write_manifest(out, "cost", cfg.config_hash(), cfg.seed, files)
    return files


# ---------------------------------------------------------------------------
# argument parsing


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--workers", type=_positive, help="worker processes")
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=("paper", "desk"), help="grid axes preset")
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")

    parser = argparse.ArgumentParser(prog="cityphase", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cityphase {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("sweep", parents=[common], help="simulate the (mw, sigma, T) grid")

    rf = sub.add_parser("rfim", help="mean-field mapping")
    rsub = rf.add_subparsers(dest="action", required=True)
    fit = rsub.add_parser("fit", parents=[common], help="fit a1(mw), a2(sigma) to an empirical phase grid")
    fit.add_argument("--grid", required=True, help="phase_grid.csv from a sweep")
    fit.add_argument("--t", type=float, help="temperature block to fit")
    solve = rsub.add_parser("solve", parents=[common], help="solve the mean-field model on a grid")
    solve.add_argument("--params", required=True, help="rfim_params.json")
    crit = rsub.add_parser("critical", parents=[common], help="critical points of fitted parameters")
    crit.add_argument("--params", required=True, help="rfim_params.json")

    dg = sub.add_parser("diagnostics", parents=[common], help="replica susceptibility and correlation diagnostics")
    dg.add_argument("--mw", type=float, help="magnitude of the diagnosed cells")

    sub.add_parser("cost", parents=[common], help="repair-cost distributions for the simplification experiments")
    return parser


def run(args):
    if args.command == "sweep":
        return cmd_sweep(_require_config(args))
    if args.command == "rfim":
        return {"fit": cmd_rfim_fit, "solve": cmd_rfim_solve, "critical": cmd_rfim_critical}[args.action](args)
    if args.command == "diagnostics":
        return cmd_diagnostics(_require_config(args), args.mw)
    if args.command == "cost":
        return cmd_cost(_require_config(args))
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        run(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SweepError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CityPhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
