import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gmpe_default
from cityphase.errors import ConfigError, ValidationError
from cityphase.hazard import (
    CorrelationModel,
    GmpeModel,
    ScalingRelation,
    Scenario,
    default_gmpe,
    demand_correlation_matrix,
    demand_factor,
    gmpe_evaluate,
    load_gmpe_file,
    median_demand_field,
    register_gmpe_form,
    rupture_geometry,
    sample_demand_field,
    sample_ln_demands,
    source_to_site_distance,
)
from cityphase.inventory import Building, FragilityMarginal, Portfolio

COEFFS = dict(c0=-1.0, c1=0.8, c2=0.0, c3=1.2, c4=0.01, c5=0.7, c6=-0.4)


def sites_portfolio(xy, vs30=760.0):
    frag = FragilityMarginal.lognormal(math.log(0.3), 0.4)
    blds = tuple(
        Building(str(i), float(x), float(y), 1, 1990, "W1", "RES", vs30, 1.0, frag) for i, (x, y) in enumerate(xy)
    )
    return Portfolio(blds, np.eye(len(blds)))


# ---------------------------------------------------------------------------
# scenario and rupture


@pytest.mark.parametrize("kw", [dict(mw=2.9), dict(mw=9.1), dict(mw=6, dip=0), dict(mw=6, dip=91), dict(mw=6, ztor=-1)])
def test_scenario_invariants(kw):
    with pytest.raises(ValidationError):
        Scenario(**kw)


@given(st.floats(3.0, 8.0))
def test_length_ratio_per_unit_magnitude(mw):
    sc = ScalingRelation()
    a = rupture_geometry(Scenario(mw), sc).length
    b = rupture_geometry(Scenario(mw + 1), sc).length
    assert b / a == pytest.approx(10**sc.b_length, rel=1e-12)


def test_length_ratio_hand_value():
    sc = ScalingRelation(b_length=0.59)
    ratio = rupture_geometry(Scenario(7.0), sc).length / rupture_geometry(Scenario(6.0), sc).length
    assert ratio == pytest.approx(3.890, abs=1e-3)


def test_width_cap():
    sc = ScalingRelation(a_width=0.0, b_width=0.5, seismogenic_depth=15.0)
    geo = rupture_geometry(Scenario(8.0, ztor=3.0), sc)
    assert geo.width == 12.0
    uncapped = rupture_geometry(Scenario(8.0, ztor=3.0), ScalingRelation(a_width=0.0, b_width=0.5, cap_width=False))
    assert uncapped.width == pytest.approx(1e4)


@settings(max_examples=30)
@given(st.floats(3.0, 9.0), st.floats(3.0, 9.0))
def test_rupture_dimensions_monotone(m1, m2):
    lo, hi = sorted((m1, m2))
    g_lo, g_hi = rupture_geometry(Scenario(lo)), rupture_geometry(Scenario(hi))
    assert 0 < g_lo.length <= g_hi.length
    assert 0 < g_lo.width <= g_hi.width


def test_trace_centred_on_epicenter_along_strike():
    geo = rupture_geometry(Scenario(6.5, epicenter=(2.0, -1.0), strike=90.0))
    (x0, y0), (x1, y1) = geo.trace_start, geo.trace_end
    assert (x0 + x1) / 2 == pytest.approx(2.0) and (y0 + y1) / 2 == pytest.approx(-1.0)
    assert y0 == pytest.approx(-1.0) and y1 == pytest.approx(-1.0)
    assert x1 - x0 == pytest.approx(geo.length)


def test_distance_examples():
    sc = Scenario(6.5, strike=90.0, ztor=0.0)
    geo = rupture_geometry(sc)
    assert source_to_site_distance(geo, sc, np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)
    sc3 = Scenario(6.5, strike=90.0, ztor=3.0)
    assert source_to_site_distance(rupture_geometry(sc3), sc3, np.array([0.5, 0.0])) == pytest.approx(3.0)
    assert source_to_site_distance(rupture_geometry(sc3), sc3, np.array([0.0, 4.0])) == pytest.approx(5.0, abs=1e-12)


def test_distance_beyond_trace_end():
    sc = Scenario(6.0, strike=0.0, ztor=0.0)
    geo = rupture_geometry(sc)
    tip = geo.trace_end
    r = source_to_site_distance(geo, sc, np.array([[tip[0] + 3.0, tip[1] + 4.0]]))
    assert r[0] == pytest.approx(5.0)


# ---------------------------------------------------------------------------
# GMPE


def test_gmpe_hand_value():
    model = GmpeModel("default", COEFFS, 0.3, 0.5)
    ln_med, tau, phi = gmpe_evaluate(model, 6.0, 10.0, 760.0)
    assert ln_med == pytest.approx(-1.0 - 1.2 * math.log(10 + 0.01 * math.exp(4.2)), abs=1e-12)
    assert ln_med == pytest.approx(-3.8405, abs=1e-4)
    assert (tau, phi) == (0.3, 0.5)


@settings(max_examples=50)
@given(st.floats(3.0, 9.0), st.floats(0.0, 300.0), st.floats(100.0, 2000.0))
def test_gmpe_matches_oracle(mw, r, vs30):
    model, _ = default_gmpe()
    ln_med, _, _ = gmpe_evaluate(model, mw, r, vs30)
    assert ln_med == pytest.approx(gmpe_default(model.coeffs, mw, r, vs30), abs=1e-12)


def test_equal_sites_equal_medians_and_site_term():
    model, _ = default_gmpe()
    med, _, _ = gmpe_evaluate(model, 6.5, np.array([12.0, 12.0]), np.array([400.0, 400.0]))
    assert med[0] == med[1]
    soft, _, _ = gmpe_evaluate(model, 6.5, 12.0, 360.0)
    rock, _, _ = gmpe_evaluate(model, 6.5, 12.0, 760.0)
    assert soft - rock == pytest.approx(model.coeffs["c6"] * math.log(360 / 760), abs=1e-12)
    assert soft > rock


@pytest.mark.parametrize("mw", [3.0, 5.0, 6.5, 8.0, 9.0])
def test_median_strictly_decreasing_in_distance(mw):
    model, _ = default_gmpe()
    r = np.linspace(1.0, 200.0, 2000)
    med, _, _ = gmpe_evaluate(model, mw, r, 760.0)
    assert np.all(np.diff(med) < 0)


def test_missing_coefficient_is_named():
    with pytest.raises(ConfigError, match="c4"):
        GmpeModel("default", {k: v for k, v in COEFFS.items() if k != "c4"}, 0.3, 0.5)


def test_gmpe_file_errors(tmp_path):
    p = tmp_path / "g.toml"
    p.write_text("[gmpe]\nc0=1\nc1=1\nc2=1\nc3=1\nc4=1\nc5=1\ntau=0.3\nphi=0.4\n[scaling]\naL=-2\nbL=0.6\naW=-1\nbW=0.3\n")
    with pytest.raises(ConfigError, match="c6"):
        load_gmpe_file(p)
    p.write_text("[gmpe]\nc0=1\nc1=1\nc2=1\nc3=1\nc4=1\nc5=1\nc6=0\nphi=0.4\n")
    with pytest.raises(ConfigError, match="tau"):
        load_gmpe_file(p)


def test_alternate_table_changes_constants_only(tmp_path):
    p = tmp_path / "g.toml"
    body = "\n".join(f"{k} = {v}" for k, v in COEFFS.items())
    p.write_text(f"[gmpe]\n{body}\ntau = 0.1\nphi = 0.2\n[scaling]\naL=-2.44\nbL=0.59\naW=-1.01\nbW=0.32\n")
    model, scaling = load_gmpe_file(p)
    assert gmpe_evaluate(model, 6.0, 10.0, 760.0)[0] == pytest.approx(-3.8405, abs=1e-4)
    assert scaling.b_length == 0.59


def test_registered_form_is_pluggable():
    register_gmpe_form("flat", ("level",), lambda c, mw, r, v: c["level"] + 0.0 * r)
    model = GmpeModel("flat", {"level": -2.0}, 0.0, 0.1)
    med, _, _ = gmpe_evaluate(model, 7.0, np.array([1.0, 50.0]), np.array([300.0, 800.0]))
    assert np.all(med == -2.0)
    with pytest.raises(ConfigError):
        GmpeModel("missing-form", {}, 0.1, 0.1)


def test_gmpe_domain_checks():
    model, _ = default_gmpe()
    with pytest.raises(ValidationError):
        gmpe_evaluate(model, 6.0, -1.0, 760.0)
    with pytest.raises(ValidationError):
        gmpe_evaluate(model, 6.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        model.with_dispersion(-0.1, 0.3)


# ---------------------------------------------------------------------------
# correlation


def test_correlation_examples():
    b = 8.5
    xy = np.array([[0, 0], [0, 0], [b, 0], [0, b * math.log(2) / 3]])
    rho = demand_correlation_matrix(xy, CorrelationModel(b))
    assert rho[0, 1] == 1.0
    assert rho[0, 2] == pytest.approx(math.exp(-3), abs=1e-15)
    assert rho[0, 2] == pytest.approx(0.0498, abs=1e-4)
    assert rho[0, 3] == pytest.approx(0.5, abs=1e-12)
    assert np.array_equal(rho, rho.T) and np.all(np.diag(rho) == 1)


@settings(max_examples=30)
@given(st.floats(0.1, 50.0), st.lists(st.floats(0, 100), min_size=2, max_size=20))
def test_correlation_non_increasing_in_distance(b, hs):
    xy = np.column_stack([np.sort(hs), np.zeros(len(hs))])
    rho = demand_correlation_matrix(xy, CorrelationModel(b))
    assert np.all(np.diff(rho[0]) <= 0)


def test_invalid_correlation_model():
    with pytest.raises(ValidationError):
        CorrelationModel(0.0)
    with pytest.raises(ValidationError):
        CorrelationModel(5.0, kernel="gaussian")


# ---------------------------------------------------------------------------
# demand sampling


def test_zero_dispersion_gives_the_median():
    pf = sites_portfolio([(0, 5), (3, 9), (10, 2)])
    model, _ = default_gmpe()
    model = model.with_dispersion(0.0, 0.0)
    sc = Scenario(6.5)
    d = sample_demand_field(sc, pf, model, CorrelationModel(), 5)
    assert np.array_equal(d, median_demand_field(sc, pf, model))


def test_inter_event_only_shifts_every_site_equally():
    pf = sites_portfolio([(0, 5), (3, 9), (10, 2), (40, 40)])
    model, _ = default_gmpe()
    model = model.with_dispersion(0.4, 0.0)
    sc = Scenario(6.5)
    med = median_demand_field(sc, pf, model)
    for seed in range(5):
        resid = sample_demand_field(sc, pf, model, CorrelationModel(), seed) - med
        assert np.allclose(resid, resid[0], atol=1e-12)


def test_colocated_sites_are_nearly_perfectly_correlated():
    xy = np.array([[0.0, 0.0], [1e-4, 0.0]])
    factor = demand_factor(xy, CorrelationModel(8.5))
    draws = sample_ln_demands(np.zeros(2), 0.0, 0.5, factor, np.random.default_rng(0), 10_000)
    assert np.corrcoef(draws.T)[0, 1] >= 0.99


def test_ensemble_moments():
    xy = np.array([[0.0, 10.0], [5.0, 10.0], [20.0, 10.0]])
    pf = sites_portfolio(xy)
    model, _ = default_gmpe()
    sc = Scenario(6.5)
    med = median_demand_field(sc, pf, model)
    draws = sample_ln_demands(
        med, model.tau, model.phi, demand_factor(xy, CorrelationModel()), np.random.default_rng(1), 10_000
    )
    var = model.tau**2 + model.phi**2
    se = math.sqrt(var / 10_000)
    assert np.all(np.abs(draws.mean(axis=0) - med) < 3 * se)
    assert np.all(np.abs(draws.var(axis=0) / var - 1) < 0.05)


def test_empirical_correlation_tracks_kernel():
    b = 9.0
    xy = np.array([[0.0, 0.0], [0.1, 0.0], [b / 3, 0.0], [b, 0.0]])
    draws = sample_ln_demands(
        np.zeros(4), 0.0, 0.5, demand_factor(xy, CorrelationModel(b)), np.random.default_rng(2), 10_000
    )
    r = np.corrcoef(draws.T)
    for j, h in ((1, 0.1), (2, b / 3), (3, b)):
        assert abs(r[0, j] - math.exp(-3 * h / b)) < 0.05


def test_demand_field_is_deterministic():
    pf = sites_portfolio(np.random.default_rng(3).uniform(0, 20, (30, 2)))
    model, _ = default_gmpe()
    a = sample_demand_field(Scenario(7.0), pf, model, CorrelationModel(), 99)
    b = sample_demand_field(Scenario(7.0), pf, model, CorrelationModel(), 99)
    c = sample_demand_field(Scenario(7.0), pf, model, CorrelationModel(), 100)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)
