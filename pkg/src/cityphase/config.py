"""Run configuration loaded from TOML.

A minimal sweep config::

    seed = 7

    [portfolio.synthetic]
    n_buildings = 200
    bbox = [0.0, 20.0, 1.0, 21.0]

    [[portfolio.synthetic.classes]]
    mu_mean = -2.302585
    beta = 0.07

    [scenario]
    epicenter = [0.0, 0.0]

    [grid]
    preset = "desk"

Unknown keys are rejected so typos surface as configuration errors.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

from .ensemble import CellOptions, GridSpec, HazardConfig
from .errors import ConfigError, ValidationError
from .hazard import CorrelationModel, Scenario, load_gmpe_file
from .inventory import (
    CapacityCorrelationModel,
    ClassSpec,
    SyntheticPortfolioSpec,
    build_capacity_correlation,
    generate_synthetic_portfolio,
    load_inventory,
    pool_by_class,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

CATEGORIZATIONS = ("individual", "pooled-class")
CAPACITY_MODES = ("dependent", "conditionally-independent")


@dataclass(frozen=True)
class PortfolioSource:
    path: str | None = None
    synthetic: SyntheticPortfolioSpec | None = None
    fragility_defaults: dict | None = None
    capacity_correlation: CapacityCorrelationModel = CapacityCorrelationModel()


@dataclass(frozen=True)
class DiagnosticsConfig:
    retain_spins: bool = False
    mw: float | None = None
    sigmas: tuple = ()
    n_replicas: int = 1
    n_realizations: int = 1000
    f: float = 0.10
    min_count: int = 10
    dr: float | None = None
    r_max: float = math.inf
    n_bins: int = 50
    landau_k: int = 100


@dataclass(frozen=True)
class RfimConfig:
    sigma_threshold: float = 0.6
    ridge: float = 1e-3
    slope_prior: float = 0.0
    n_starts: int = 5
    slice_mw: tuple = ()
    power_norm: float = 1.0
    m_points: int = 201


@dataclass(frozen=True)
class CostConfig:
    mw: tuple = ()
    sigma: float = 0.0
    n_realizations: int = 1000
    thresholds: tuple = (0.01, 0.1)
    write_samples: bool = True


@dataclass(frozen=True)
class RunConfig:
    portfolio: PortfolioSource
    scenario: Scenario
    gmpe_file: str = "default"
    gmpe_tau: float | None = None
    gmpe_phi: float | None = None
    correlation: CorrelationModel = CorrelationModel()
    grid: GridSpec = GridSpec.desk()
    capacity_mode: str = "dependent"
    categorization: str = "individual"
    margin_domain: str = "linear"
    cost_ratio: float = 0.2
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    rfim: RfimConfig = RfimConfig()
    cost: CostConfig = CostConfig()
    critical_mw: tuple = ()
    out: str = "results"
    workers: int = 1
    base_dir: str = field(default=".", compare=False)

    @property
    def seed(self):
        return self.grid.master_seed

    def semantic_dict(self):
        """Every field that can change a result; excludes ``out`` and ``workers``."""
        d = asdict(self)
        for key in ("out", "workers", "base_dir"):
            d.pop(key)
        if self.portfolio.path is not None:
            d["portfolio"]["path"] = os.path.abspath(self._resolve(self.portfolio.path))
        if self.gmpe_file != "default":
            d["gmpe_file"] = os.path.abspath(self._resolve(self.gmpe_file))
        return d

    def config_hash(self):
        text = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def _resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    # -- builders -----------------------------------------------------------

    def hazard(self):
        gmpe, scaling = load_gmpe_file(None if self.gmpe_file == "default" else self._resolve(self.gmpe_file))
        if self.gmpe_tau is not None or self.gmpe_phi is not None:
            tau = gmpe.tau if self.gmpe_tau is None else self.gmpe_tau
            phi = gmpe.phi if self.gmpe_phi is None else self.gmpe_phi
            gmpe = gmpe.with_dispersion(tau, phi)
        return HazardConfig(self.scenario, gmpe, scaling, self.correlation)

    def base_portfolio(self):
        src = self.portfolio
        if src.path is not None:
            pf = load_inventory(self._resolve(src.path), src.fragility_defaults)
        else:
            pf = generate_synthetic_portfolio(src.synthetic, self.seed)
        if len(pf) and src.capacity_correlation.rho_class > 0:
            pf = build_capacity_correlation(pf, src.capacity_correlation)
        return pf

    def portfolio_for(self, categorization=None):
        pf = self.base_portfolio()
        if (categorization or self.categorization) == "pooled-class":
            pf = pool_by_class(pf, seed=self.seed)
        return pf

    def cell_options(self, capacity_mode=None, retain_spins=None):
        return CellOptions(
            capacity_mode=capacity_mode or self.capacity_mode,
            margin_domain=self.margin_domain,
            cost_ratio=self.cost_ratio,
            retain_spins=self.diagnostics.retain_spins if retain_spins is None else retain_spins,
        )


# ---------------------------------------------------------------------------
# parsing


class _Section:
    """Dict view that records which keys were consumed."""

    def __init__(self, data, name):
        if not isinstance(data, dict):
            raise ConfigError(f"[{name}] must be a table")
        self.data = data
        self.name = name
        self.used = set()

    def get(self, key, default=None, kind=None):
        self.used.add(key)
        if key not in self.data:
            return default
        value = self.data[key]
        if kind is not None:
            try:
                if kind is tuple:
                    if not isinstance(value, (list, tuple)):
                        raise TypeError
                    return tuple(value)
                if kind is float and isinstance(value, bool):
                    raise TypeError
                if kind is int and (isinstance(value, bool) or not float(value).is_integer()):
                    raise TypeError
                return kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{self.name}.{key}: expected {kind.__name__}, got {value!r}") from None
        return value

    def sub(self, key):
        self.used.add(key)
        return _Section(self.data.get(key, {}), f"{self.name}.{key}" if self.name else key)

    def check(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            where = self.name or "top level"
            raise ConfigError(f"unknown key(s) {extra} in {where}")


def _range3(sec, key, default):
    value = sec.get(key, default, tuple)
    if value is None:
        return None
    if len(value) != 3:
        raise ConfigError(f"{sec.name}.{key} must be [lo, hi, step]")
    return tuple(float(v) for v in value)


def _class_spec(data, k):
    sec = _Section(data, f"portfolio.synthetic.classes[{k}]")
    kw = {}
    for key, kind in (("name", str), ("weight", float), ("mu_mean", float), ("mu_std", float),
                      ("beta", float), ("year_range", tuple), ("stories_range", tuple), ("occupancy", str)):
        v = sec.get(key, None, kind)
        if v is not None:
            kw[key] = v
    median = sec.get("median_g", None, float)
    if median is not None:
        if "mu_mean" in kw:
            raise ConfigError(f"{sec.name}: give mu_mean or median_g, not both")
        if not median > 0:
            raise ConfigError(f"{sec.name}.median_g must be > 0")
        kw["mu_mean"] = math.log(median)
    sec.check()
    kw.setdefault("name", f"C{k + 1}")
    if kw.get("beta", 0.4) <= 0:
        raise ConfigError(f"{sec.name}.beta must be > 0")
    return ClassSpec(**kw)


def _portfolio(sec, base_dir):
    path = sec.get("path", None, str)
    syn_data = sec.data.get("synthetic")
    sec.used.add("synthetic")
    if (path is None) == (syn_data is None):
        raise ConfigError("portfolio needs exactly one source: 'path' or [portfolio.synthetic]")
    synthetic = None
    if path is not None:
        full = path if os.path.isabs(path) else os.path.join(base_dir, path)
        if not os.path.isfile(full):
            raise ConfigError(f"portfolio.path: file not found: {full}")
    else:
        s = _Section(syn_data, "portfolio.synthetic")
        classes = s.get("classes", None)
        classes = (ClassSpec(),) if classes is None else tuple(_class_spec(c, k) for k, c in enumerate(classes))
        kw = {"n_buildings": s.get("n_buildings", None, int)}
        if kw["n_buildings"] is None:
            raise ConfigError("portfolio.synthetic.n_buildings is required")
        for key, kind in (("layout", str), ("bbox", tuple), ("vs30_range", tuple), ("cost_median", float),
                          ("cost_dispersion", float), ("class_layout", str)):
            v = s.get(key, None, kind)
            if v is not None:
                kw[key] = tuple(float(x) for x in v) if kind is tuple else v
        s.check()
        synthetic = SyntheticPortfolioSpec(classes=classes, **kw)
        try:
            synthetic.validate()
        except ValidationError as exc:
            raise ConfigError(f"portfolio.synthetic: {exc}") from None

    defaults = sec.get("fragility_defaults", None)
    cc = sec.sub("capacity_correlation")
    model = CapacityCorrelationModel(cc.get("rho_class", 0.0, float), cc.get("length_km", 1.0, float))
    cc.check()
    try:
        model.validate()
    except ValidationError as exc:
        raise ConfigError(f"portfolio.capacity_correlation: {exc}") from None
    sec.check()
    return PortfolioSource(path, synthetic, defaults, model)


def _grid(sec, overrides):
    preset = overrides.get("preset") or sec.get("preset", "desk", str)
    if preset not in ("paper", "desk"):
        raise ConfigError(f"grid.preset must be 'paper' or 'desk', got {preset!r}")
    base = GridSpec.paper() if preset == "paper" else GridSpec.desk()
    kw = {}
    mw = _range3(sec, "mw", None)
    sg = _range3(sec, "sigma", None)
    if mw is not None:
        kw["mw_range"] = mw
    if sg is not None:
        kw["sigma_range"] = sg
    for key, kind in (("n_realizations", int), ("n_portfolio_realizations", int), ("seed_policy", str)):
        v = sec.get(key, None, kind)
        if v is not None:
            kw[key] = v
    sec.check()
    return replace(base, **kw)


def _float_or_inf(v, name):
    if v is None:
        return math.inf
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {v!r}") from None


def parse_config(data, base_dir=".", overrides=None):
    """Build a :class:`RunConfig` from a parsed TOML mapping.

    ``overrides`` may carry ``seed``, ``workers``, ``out`` and ``preset``;
    they take precedence over file values.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    top = _Section(data, "")
    seed = overrides.get("seed", top.get("seed", 0, int))
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    workers = overrides.get("workers", top.get("workers", 1, int))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    out = overrides.get("out", top.get("out", "results", str))

    portfolio = _portfolio(top.sub("portfolio"), base_dir)

    sc = top.sub("scenario")
    try:
        scenario = Scenario(
            mw=sc.get("mw", 6.0, float),
            epicenter=tuple(float(v) for v in sc.get("epicenter", (0.0, 0.0), tuple)),
            strike=sc.get("strike", 325.0, float),
            dip=sc.get("dip", 90.0, float),
            rake=sc.get("rake", 180.0, float),
            ztor=sc.get("ztor", 3.0, float),
        )
    except ValidationError as exc:
        raise ConfigError(f"scenario: {exc}") from None
    sc.check()

    gm = top.sub("gmpe")
    gmpe_file = gm.get("file", "default", str)
    if gmpe_file != "default":
        full = gmpe_file if os.path.isabs(gmpe_file) else os.path.join(base_dir, gmpe_file)
        if not os.path.isfile(full):
            raise ConfigError(f"gmpe.file: file not found: {full}")
    tau = gm.get("tau", None, float)
    phi = gm.get("phi", None, float)
    gm.check()

    co = top.sub("correlation")
    try:
        correlation = CorrelationModel(co.get("range_km", 8.5, float), co.get("kernel", "exponential", str))
    except ValidationError as exc:
        raise ConfigError(f"correlation: {exc}") from None
    co.check()

    g = top.sub("grid")
    try:
        grid = replace(_grid(g, overrides), master_seed=int(seed))
        temps = top.get("temperatures", None, tuple)
        if temps is not None:
            grid = replace(grid, t_values=tuple(float(t) for t in temps))
    except ValidationError as exc:
        raise ConfigError(f"grid: {exc}") from None

    cap = top.sub("capacity")
    mode = cap.get("mode", "dependent", str)
    if mode not in CAPACITY_MODES:
        raise ConfigError(f"capacity.mode must be one of {CAPACITY_MODES}, got {mode!r}")
    cap.check()
    categorization = top.get("categorization", "individual", str)
    if categorization not in CATEGORIZATIONS:
        raise ConfigError(f"categorization must be one of {CATEGORIZATIONS}, got {categorization!r}")

    dm = top.sub("damage")
    margin_domain = dm.get("margin_domain", "linear", str)
    if margin_domain not in ("linear", "log"):
        raise ConfigError(f"damage.margin_domain must be 'linear' or 'log', got {margin_domain!r}")
    cost_ratio = dm.get("cost_ratio", 0.2, float)
    if not 0 < cost_ratio <= 1:
        raise ConfigError("damage.cost_ratio must lie in (0, 1]")
    dm.check()

    dg = top.sub("diagnostics")
    diagnostics = DiagnosticsConfig(
        retain_spins=bool(dg.get("retain_spins", False)),
        mw=dg.get("mw", None, float),
        sigmas=tuple(float(s) for s in dg.get("sigmas", (), tuple)),
        n_replicas=dg.get("n_replicas", grid.n_portfolio_realizations, int),
        n_realizations=dg.get("n_realizations", 1000, int),
        f=dg.get("f", 0.10, float),
        min_count=dg.get("min_count", 10, int),
        dr=dg.get("dr", None, float),
        r_max=_float_or_inf(dg.get("r_max", None), "diagnostics.r_max"),
        n_bins=dg.get("n_bins", 50, int),
        landau_k=dg.get("landau_k", 100, int),
    )
    if diagnostics.n_replicas < 1 or diagnostics.n_realizations < 1:
        raise ConfigError("diagnostics.n_replicas and n_realizations must be >= 1")
    dg.check()

    rf = top.sub("rfim")
    rfim = RfimConfig(
        sigma_threshold=rf.get("sigma_threshold", 0.6, float),
        ridge=rf.get("ridge", 1e-3, float),
        slope_prior=rf.get("slope_prior", 0.0, float),
        n_starts=rf.get("n_starts", 5, int),
        slice_mw=tuple(float(v) for v in rf.get("slice_mw", (), tuple)),
        power_norm=rf.get("power_norm", 1.0, float),
        m_points=rf.get("m_points", 201, int),
    )
    if rfim.ridge < 0 or not 1 <= rfim.n_starts <= 5 or rfim.power_norm <= 0 or rfim.m_points < 3:
        raise ConfigError("rfim: ridge >= 0, 1 <= n_starts <= 5, power_norm > 0 and m_points >= 3 required")
    rf.check()

    cs = top.sub("cost")
    cost = CostConfig(
        mw=tuple(float(v) for v in cs.get("mw", (), tuple)),
        sigma=cs.get("sigma", 0.0, float),
        n_realizations=cs.get("n_realizations", 1000, int),
        thresholds=tuple(float(v) for v in cs.get("thresholds", (0.01, 0.1), tuple)),
        write_samples=bool(cs.get("write_samples", True)),
    )
    if cost.sigma < 0 or cost.n_realizations < 1:
        raise ConfigError("cost: sigma >= 0 and n_realizations >= 1 required")
    cs.check()

    critical_mw = tuple(float(v) for v in top.get("critical_mw", (), tuple))
    top.check()

    return RunConfig(
        portfolio=portfolio,
        scenario=scenario,
        gmpe_file=gmpe_file,
        gmpe_tau=tau,
        gmpe_phi=phi,
        correlation=correlation,
        grid=grid,
        capacity_mode=mode,
        categorization=categorization,
        margin_domain=margin_domain,
        cost_ratio=cost_ratio,
        diagnostics=diagnostics,
        rfim=rfim,
        cost=cost,
        critical_mw=critical_mw,
        out=out,
        workers=int(workers),
        base_dir=base_dir,
    )


def load_config(path, overrides=None):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, os.path.dirname(os.path.abspath(path)), overrides)
