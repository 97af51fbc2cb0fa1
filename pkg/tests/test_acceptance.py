"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
collected into the terminal summary.
"""

import math
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, SMOKE_TOML, SYNC_SPEC, make_hazard, two_class_portfolio, write_config
from cityphase import cli
from cityphase.critstats import (
    connected_correlation,
    correlation_length,
    empirical_free_energy,
    fit_landau_polynomial,
    pca_order_parameter,
    susceptibility_fluctuation,
)
from cityphase.ensemble import (
    CellOptions,
    GridSpec,
    critical_diversity_empirical,
    critical_diversity_from_flags,
    detect_bimodality,
    run_cell,
    sweep_grid,
)
from cityphase.hazard import demand_factor, median_demand_field, sample_ln_demands
from cityphase.inventory import apply_diversity, generate_synthetic_portfolio, pool_by_class, sample_ln_capacities
from cityphase.rfim import (
    MeanFieldPoint,
    RfimParams,
    fit_parameters,
    free_energy,
    free_energy_gradient,
    mean_field_susceptibility,
    rfim_phase_diagram,
    stable_solutions,
)
from cityphase.tables import read_phase_grids

MW_LADDER = np.round(np.linspace(6.0, 7.0, 11), 10)
N_REAL = 2000


def check(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def fixture_city():
    return generate_synthetic_portfolio(SYNC_SPEC, 1), make_hazard()


@pytest.fixture(scope="module")
def ladder(fixture_city):
    """mw ladder at sigma = 0 plus the timing of building it."""
    pf, hz = fixture_city
    t0 = time.perf_counter()
    cells = [run_cell(mw, 0.0, 0.0, pf, hz, N_REAL, 1000 + i, options=CellOptions(retain_spins=True))
             for i, mw in enumerate(MW_LADDER)]
    return cells, time.perf_counter() - t0


@pytest.fixture(scope="module")
def transition(ladder):
    cells, _ = ladder
    return min(cells, key=lambda e: abs(e.damage_fractions.mean() - 0.5))


# ---------------------------------------------------------------------------
# mean-field layer


def test_criterion_01_critical_disorder():
    t0 = time.perf_counter()
    lo, hi = 0.5, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if stable_solutions(MeanFieldPoint(0.0, mid)).bistable:
            lo = mid
        else:
            hi = mid
    a2c = 0.5 * (lo + hi)
    dt = time.perf_counter() - t0
    err = abs(a2c - math.sqrt(2 / math.pi))
    check(1, err <= 1e-3 and dt < 1.0, f"a2c={a2c:.6f} target={math.sqrt(2 / math.pi):.6f} err={err:.2e} t={dt:.2f}s")


def test_criterion_02_fixed_points():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        a1, a2 = rng.uniform(-2, 2), rng.uniform(0.1, 2)
        s = stable_solutions(MeanFieldPoint(a1, a2))
        worst = max(worst,
                    abs(s.m_minus - oracles.fixed_point_from(a1, a2, -1.0)),
                    abs(s.m_plus - oracles.fixed_point_from(a1, a2, 1.0)))
    dt = time.perf_counter() - t0
    check(2, worst <= 1e-8 and dt < 5.0, f"max |m - oracle|={worst:.2e} t={dt:.2f}s")


def test_criterion_03_free_energy_gradient():
    rng = np.random.default_rng(3)
    m = np.linspace(-1.0, 1.0, 1001)
    h = 1e-5
    worst_rel, worst_stat = 0.0, 0.0
    for _ in range(20):
        p = MeanFieldPoint(rng.uniform(-2, 2), rng.uniform(0.1, 2))
        fd = (free_energy(m + h, p) - free_energy(m - h, p)) / (2 * h)
        an = np.array([oracles.g_residual(x, p.a1, p.a2) for x in m])
        assert np.allclose(free_energy_gradient(m, p), an, rtol=0, atol=1e-14)
        worst_rel = max(worst_rel, float(np.max(np.abs(fd - an) / np.maximum(np.abs(an), 1.0))))
        # stationary points of F located by bisection on the finite-difference slope
        slope = lambda x: (free_energy(x + h, p) - free_energy(x - h, p)) / (2 * h)
        s = stable_solutions(p)
        for root, start in ((s.m_minus, -1.0), (s.m_plus, 1.0)):
            xs = np.linspace(start, -start, 20_001)
            v = np.array([slope(x) for x in xs])
            k = int(np.argmax(np.sign(v) != np.sign(v[0])))
            lo, hi = sorted((xs[k - 1], xs[k]))
            stat = oracles.bisect(slope, lo, hi)
            worst_stat = max(worst_stat, abs(stat - root))
    check(3, worst_rel <= 1e-6 and worst_stat <= 1e-6,
          f"max rel gradient err={worst_rel:.2e} max |stationary - root|={worst_stat:.2e}")


def test_criterion_04_fit_round_trip():
    a1_true, a2_true = (-2.1056, 0.152, 0.04), (0.4, 0.5)
    mw = np.round(np.linspace(3.5, 8.5, 21), 10)
    sg = np.round(np.linspace(0.0, 1.0, 21), 10)
    t0 = time.perf_counter()
    grid = rfim_phase_diagram(RfimParams(a1_true, a2_true), mw, sg)
    fit = fit_parameters(grid)
    back = rfim_phase_diagram(fit, mw, sg)
    dt = time.perf_counter() - t0
    rel = max(abs(g / w - 1) for g, w in zip(fit.a1_coeffs + fit.a2_coeffs, a1_true + a2_true))
    rms = float(np.sqrt(np.mean((back.mdstar - grid.mdstar) ** 2)))
    check(4, rel <= 0.02 and rms <= 0.01 and dt < 30,
          f"max coef rel err={rel:.4f} solve-back rms={rms:.4f} t={dt:.1f}s")


# ---------------------------------------------------------------------------
# phenomenology on the synthetic city


def test_criterion_05_first_order(ladder, transition):
    _, dt = ladder
    md = transition.damage_fractions
    extreme = float(np.mean((md < 0.1) | (md > 0.9)))
    bimodal = detect_bimodality(md).is_bimodal
    check(5, bimodal and extreme >= 0.6 and dt < 120,
          f"mw={transition.mw} mean={md.mean():.3f} bimodal={bimodal} extreme share={extreme:.3f} t={dt:.1f}s")


def test_criterion_06_diversity_smoothing(fixture_city, transition):
    pf, hz = fixture_city
    mw = transition.mw
    t0 = time.perf_counter()
    cells = [run_cell(mw, s, 0.0, pf, hz, N_REAL, 2000 + j) for j, s in enumerate((0.0, 0.5, 1.0))]
    dt = time.perf_counter() - t0
    flags = [detect_bimodality(e.damage_fractions).is_bimodal for e in cells]
    sc = critical_diversity_empirical(cells, mw)
    check(6, flags[0] and not flags[2] and 0.0 < sc < 1.0 and dt < 180,
          f"mw={mw} bimodal at sigma 0/0.5/1={flags} sigma_c={sc} t={dt:.1f}s")


def median_margin_scale(pf, hz, mw, n=500, seed=0):
    """Median |C - D| over joint capacity/demand draws at sigma = 0."""
    rng = np.random.default_rng(seed)
    real = apply_diversity(pf, 0.0, 0)
    lnc = sample_ln_capacities(real, "dependent", rng, n)
    lnmed = median_demand_field(hz.scenario.at_magnitude(mw), pf, hz.gmpe)
    lnd = sample_ln_demands(lnmed, hz.gmpe.tau, hz.gmpe.phi, demand_factor(pf.positions, hz.correlation), rng, n)
    return float(np.median(np.abs(np.exp(lnc) - np.exp(lnd))))


def test_criterion_07_temperature_smoothing(fixture_city, transition):
    pf, hz = fixture_city
    mw = transition.mw
    scale = median_margin_scale(pf, hz, mw)
    temps = (0.0, 0.25 * scale, scale)
    sig = np.round(np.linspace(0.0, 1.0, 11), 10)
    t0 = time.perf_counter()
    sc = []
    for ti, t in enumerate(temps):
        flags = [detect_bimodality(run_cell(mw, s, t, pf, hz, N_REAL, 3000 + 100 * ti + j).damage_fractions).is_bimodal
                 for j, s in enumerate(sig)]
        sc.append(critical_diversity_from_flags(sig, flags))
    dt = time.perf_counter() - t0
    ok = all(b <= a for a, b in zip(sc, sc[1:]))
    check(7, ok and dt < 300, f"T={[round(t, 5) for t in temps]} sigma_c={sc} t={dt:.1f}s")


# ---------------------------------------------------------------------------
# critical statistics


def test_criterion_08_susceptibility():
    rng = np.random.default_rng(8)
    worst = 0.0
    for n_b in (50, 200, 1000):
        md = rng.uniform(size=500)
        m = (2 * md - 1).tolist()
        want = n_b * oracles.two_pass_variance(m)
        got = susceptibility_fluctuation(md, n_b)
        worst = max(worst, abs(got - want) / want)
    chi = mean_field_susceptibility(MeanFieldPoint(0.0, 2 * math.sqrt(2 / math.pi)), 0.0).chi_curvature
    check(8, worst <= 1e-12 and chi == pytest.approx(2.0, abs=1e-12),
          f"max rel err vs two-pass={worst:.2e} chi_curvature={chi!r}")


def test_criterion_09_correlation_length():
    t0 = time.perf_counter()
    g = np.arange(20.0)
    X, Y = np.meshgrid(g, g)
    xy = np.column_stack([X.ravel(), Y.ravel()])
    d = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1))
    chol = np.linalg.cholesky(np.exp(-d / 3.0))
    z = np.random.default_rng(9).standard_normal((2000, 400)) @ chol.T
    spins = np.where(z > 0, 1.0, -1.0)
    r_max = 9.0
    xi = correlation_length(connected_correlation(spins, xy, dr=1.0), r_max)
    cov = np.cov(z, rowvar=False, bias=True)
    r, c = oracles.binned_profile(cov, xy, 1.0)
    xi_oracle = oracles.exp_decay_length(r, c / np.mean(np.diag(cov)), r_max)
    dt = time.perf_counter() - t0
    rel = abs(xi / xi_oracle - 1)
    check(9, rel <= 0.15 and dt < 120, f"xi={xi:.3f} oracle={xi_oracle:.3f} rel={rel:.3f} t={dt:.1f}s")


def boltzmann_samples(beta, n, seed):
    rng = np.random.default_rng(seed)
    out, have = [], 0
    while have < n:
        m = rng.uniform(-1, 1, 4 * n)
        f = -m**2 / 2 + m**4 / 4
        keep = m[rng.uniform(size=m.size) < np.exp(-beta * (f + 0.25))]
        out.append(keep)
        have += keep.size
    return np.concatenate(out)[:n]


def test_criterion_10_landau():
    m = boltzmann_samples(20.0, 100_000, 10)
    fit = fit_landau_polynomial(empirical_free_energy((m + 1) / 2, n_bins=50))
    mins = fit.local_minima()
    chi = [float(1 / fit.second_derivative(x)) for x in mins]
    ok = (len(mins) == 2 and abs(mins[0] + 1) <= 0.05 and abs(mins[1] - 1) <= 0.05
          and abs(chi[0] / chi[1] - 1) <= 0.10)
    check(10, ok, f"minima={[round(x, 4) for x in mins]} chi={[round(c, 4) for c in chi]}")


def test_criterion_11_pca(transition):
    md = transition.damage_fractions
    res = pca_order_parameter(transition.spins, md)
    check(11, abs(res.corr_pc1_md) >= 0.99,
          f"mw={transition.mw} |corr(PC1, m_d)|={abs(res.corr_pc1_md):.5f} pc1 share={res.explained[0]:.3f}")


# ---------------------------------------------------------------------------
# engineering simplifications and determinism


def test_criterion_12_simplifications():
    t0 = time.perf_counter()
    pf = two_class_portfolio()
    pooled = pool_by_class(pf)
    hz = make_hazard()
    gs = GridSpec(mw_range=(5.0, 8.5, 0.25), sigma_range=(0.0, 1.0, 0.1), n_realizations=1000, master_seed=11)
    fits = {}
    for name, p in (("individual", pf), ("pooled-class", pooled)):
        fits[name] = fit_parameters(sweep_grid(gs, p, hz, workers=4).phase_grids[0.0])
    sg = np.linspace(0.6, 1.0, 5)
    a2_ind, a2_pool = fits["individual"].a2(sg), fits["pooled-class"].a2(sg)
    a2_ok = bool(np.all(a2_pool < a2_ind))

    mw = 6.75
    stats = {}
    for mode in ("dependent", "conditionally-independent"):
        r = run_cell(mw, 0.0, 0.0, pf, hz, 4000, 123, options=CellOptions(capacity_mode=mode)).cost_fractions
        stats[mode] = (float(r.mean()), float(np.quantile(r, 0.99)))
    (mean_d, q_d), (mean_i, q_i) = stats["dependent"], stats["conditionally-independent"]
    mean_rel = abs(mean_i / mean_d - 1)
    dt = time.perf_counter() - t0
    ok = a2_ok and q_i < q_d and mean_rel < 0.10 and dt < 300
    check(12, ok, f"a2(0.8) individual={fits['individual'].a2(0.8):.3f} pooled={fits['pooled-class'].a2(0.8):.3f}; "
                  f"q99 dep={q_d:.4f} indep={q_i:.4f}; mean dep={mean_d:.4f} indep={mean_i:.4f} "
                  f"(rel {mean_rel:.3f}) t={dt:.1f}s")


def test_criterion_13_determinism(tmp_path):
    cfg = write_config(tmp_path, SMOKE_TOML)
    outs = {}
    for w in (1, 4, 1):
        out = tmp_path / f"out{len(outs)}_w{w}"
        assert cli.main(["sweep", "--config", str(cfg), "--workers", str(w), "--out", str(out)]) == 0
        outs[out] = w
    dirs = list(outs)
    names = ["ensembles.csv", "phase_grid.csv", "heatmaps.csv", "sigma_c.csv", "manifest.json"]
    same = all((dirs[0] / n).read_bytes() == (d / n).read_bytes() for d in dirs[1:] for n in names)
    read_phase_grids(dirs[0] / "phase_grid.csv")
    check(13, same, f"{len(names)} files byte-identical across runs with workers 1, 4, 1")
