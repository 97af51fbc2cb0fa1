"""Building portfolios, fragility marginals and correlated capacity sampling.

Capacities are the PGA (g) at which a building first reaches the slight
damage state. Each building carries a fragility marginal on ln-capacity,
either lognormal ``N(mu, beta**2)`` or a Gaussian KDE over ln-capacity
samples. Inter-building dependence is a Gaussian copula whose correlation
matrix lives on the :class:`Portfolio`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy import special

from . import _seeding
from ._linalg import check_correlation, factorize, pairwise_distances, repair_psd
from .errors import ParseError, ValidationError

EARTH_RADIUS_KM = 6371.0088

INVENTORY_COLUMNS = (
    "id",
    "lon",
    "lat",
    "stories",
    "year_built",
    "structure_class",
    "occupancy",
    "vs30",
    "replacement_cost",
)
FRAGILITY_COLUMNS = ("frag_mu", "frag_beta")

# Hazus-style design eras used by the pooled categorization
ERA_BREAKS = (1941, 1976)

CAPACITY_MODES = ("dependent", "independent")


def _ndtr(x):
    return special.ndtr(x)


# ---------------------------------------------------------------------------
# fragility marginals


@dataclass(frozen=True)
class FragilityMarginal:
    """Distribution of ln-capacity (ln g) for one building.

    Use :meth:`lognormal` or :meth:`kde` rather than the raw constructor.
    """

    kind: str
    mu: float = math.nan
    beta: float = math.nan
    samples: tuple = ()
    bandwidth: float = math.nan

    def __post_init__(self):
        if self.kind == "lognormal":
            if not (math.isfinite(self.mu) and self.beta > 0 and math.isfinite(self.beta)):
                raise ValidationError(
                    f"lognormal fragility needs finite mu and beta > 0, got mu={self.mu}, beta={self.beta}"
                )
        elif self.kind == "kde":
            if len(self.samples) < 2:
                raise ValidationError("kde fragility needs at least 2 samples")
            if not self.bandwidth > 0:
                raise ValidationError(f"kde bandwidth must be > 0, got {self.bandwidth}")
        else:
            raise ValidationError(f"unknown fragility kind {self.kind!r}")

    @classmethod
    def lognormal(cls, mu, beta):
        return cls("lognormal", mu=float(mu), beta=float(beta))

    @classmethod
    def kde(cls, samples, bandwidth=None):
        """Gaussian KDE over ln-capacity ``samples``.

        The default bandwidth is ``1.06 * std * n**(-1/5)``.
        """
        s = np.asarray(samples, dtype=float).ravel()
        if s.size < 2:
            raise ValidationError("kde fragility needs at least 2 samples")
        if bandwidth is None:
            bandwidth = 1.06 * s.std(ddof=1) * s.size ** (-0.2)
        return cls("kde", samples=tuple(float(v) for v in s), bandwidth=float(bandwidth))

    @cached_property
    def _sample_array(self):
        return np.asarray(self.samples, dtype=float)

    @property
    def mean_ln(self):
        if self.kind == "lognormal":
            return self.mu
        return float(self._sample_array.mean())

    @property
    def std_ln(self):
        if self.kind == "lognormal":
            return self.beta
        s = self._sample_array
        return float(math.sqrt(s.var() + self.bandwidth**2))

    def shifted(self, eps):
        """Marginal with every ln-capacity moved by ``eps``."""
        if eps == 0.0:
            return self
        if self.kind == "lognormal":
            return replace(self, mu=self.mu + eps)
        return replace(self, samples=tuple(float(v) for v in self._sample_array + eps))

    def cdf_ln(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "lognormal":
            return _ndtr((x - self.mu) / self.beta)
        s = self._sample_array
        z = (x[..., None] - s) / self.bandwidth
        return _ndtr(z).mean(axis=-1)

    def pdf_ln(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "lognormal":
            z = (x - self.mu) / self.beta
            return np.exp(-0.5 * z * z) / (self.beta * math.sqrt(2 * math.pi))
        s = self._sample_array
        z = (x[..., None] - s) / self.bandwidth
        return np.exp(-0.5 * z * z).mean(axis=-1) / (self.bandwidth * math.sqrt(2 * math.pi))

    def ppf_ln(self, u):
        """Inverse CDF in ln-space."""
        u = np.asarray(u, dtype=float)
        if self.kind == "lognormal":
            return self.mu + self.beta * special.ndtri(u)
        return self._kde_ppf(u)

    def _kde_ppf(self, u):
        s = self._sample_array
        h = self.bandwidth
        grid = np.linspace(s.min() - 9 * h, s.max() + 9 * h, 4097)
        table = self.cdf_ln(grid)
        uc = np.clip(u, 1e-15, 1 - 1e-15)
        x = np.interp(uc, table, grid)
        # Newton polish; interpolation already puts x inside the right cell
        for _ in range(3):
            f = self.pdf_ln(x)
            step = np.where(f > 1e-300, (self.cdf_ln(x) - uc) / np.maximum(f, 1e-300), 0.0)
            x = np.clip(x - step, grid[0], grid[-1])
        return x


def fragility_probability(fragility, im):
    """P(damage >= slight | IM = im) for intensity ``im`` in g."""
    im_arr = np.asarray(im, dtype=float)
    if np.any(~(im_arr > 0)):
        raise ValidationError("intensity must be > 0")
    p = np.clip(fragility.cdf_ln(np.log(im_arr)), 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# buildings and portfolios


@dataclass(frozen=True)
class Building:
    id: str
    x_km: float
    y_km: float
    stories: int
    year_built: int
    structure_class: str
    occupancy: str
    vs30: float
    replacement_cost: float
    fragility: FragilityMarginal
    lon: float | None = None
    lat: float | None = None

    def __post_init__(self):
        if not self.vs30 > 0:
            raise ValidationError(f"building {self.id}: vs30 must be > 0, got {self.vs30}")
        if not self.replacement_cost >= 0:
            raise ValidationError(
                f"building {self.id}: replacement_cost must be >= 0, got {self.replacement_cost}"
            )
        if self.stories < 1:
            raise ValidationError(f"building {self.id}: stories must be >= 1, got {self.stories}")

    @property
    def era(self):
        return design_era(self.year_built)


def design_era(year_built):
    if year_built < ERA_BREAKS[0]:
        return "pre"
    if year_built < ERA_BREAKS[1]:
        return "moderate"
    return "high"


@dataclass(frozen=True, eq=False)
class Portfolio:
    """Ordered buildings plus the capacity correlation matrix.

    ``origin`` is the (lon, lat) projection centre when the portfolio came
    from geographic coordinates, else ``None``.
    """

    buildings: tuple
    capacity_corr: np.ndarray
    origin: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        corr = np.array(self.capacity_corr, dtype=float).reshape(len(self.buildings), len(self.buildings))
        check_correlation(corr)
        corr.setflags(write=False)
        object.__setattr__(self, "capacity_corr", corr)

    def __len__(self):
        return len(self.buildings)

    @cached_property
    def positions(self):
        xy = np.array([[b.x_km, b.y_km] for b in self.buildings], dtype=float).reshape(-1, 2)
        xy.setflags(write=False)
        return xy

    @cached_property
    def vs30(self):
        return np.array([b.vs30 for b in self.buildings], dtype=float)

    @cached_property
    def replacement_costs(self):
        return np.array([b.replacement_cost for b in self.buildings], dtype=float)

    @cached_property
    def distances(self):
        return pairwise_distances(self.positions)

    @cached_property
    def capacity_factor(self):
        """Cholesky factor of the repaired capacity correlation (None if identity)."""
        n = len(self.buildings)
        if np.array_equal(self.capacity_corr, np.eye(n)):
            return None
        return factorize(repair_psd(self.capacity_corr))

    @property
    def diameter_km(self):
        if len(self.buildings) < 2:
            return 0.0
        return float(self.distances.max())

    def with_fragilities(self, fragilities):
        if len(fragilities) != len(self.buildings):
            raise ValidationError("fragility count must match building count")
        blds = tuple(replace(b, fragility=f) for b, f in zip(self.buildings, fragilities))
        return Portfolio(blds, self.capacity_corr, self.origin)


@dataclass(frozen=True, eq=False)
class PortfolioRealization:
    """A portfolio with quenched ln-space median shifts at diversity ``sigma``."""

    base: Portfolio
    sigma: float
    median_shifts: np.ndarray

    @cached_property
    def marginals(self):
        return tuple(
            b.fragility.shifted(float(e)) for b, e in zip(self.base.buildings, self.median_shifts)
        )

    @cached_property
    def _lognormal_params(self):
        """(mu, beta) arrays when every marginal is lognormal, else None."""
        if all(b.fragility.kind == "lognormal" for b in self.base.buildings):
            mu = np.array([b.fragility.mu for b in self.base.buildings]) + self.median_shifts
            beta = np.array([b.fragility.beta for b in self.base.buildings])
            return mu, beta
        return None


def project_lonlat(lon, lat, origin):
    """Equirectangular projection to planar km about ``origin`` = (lon0, lat0)."""
    lon0, lat0 = origin
    k = math.pi / 180.0
    x = EARTH_RADIUS_KM * (np.asarray(lon, dtype=float) - lon0) * k * math.cos(lat0 * k)
    y = EARTH_RADIUS_KM * (np.asarray(lat, dtype=float) - lat0) * k
    return x, y


# ---------------------------------------------------------------------------
# ingestion


def _default_fragility(defaults, structure_class, row):
    if not defaults:
        raise ParseError("missing frag_mu/frag_beta and no fragility defaults given", row=row)
    entry = defaults.get("by_class", {}).get(structure_class, defaults)
    try:
        return FragilityMarginal.lognormal(entry["mu"], entry["beta"])
    except KeyError as exc:
        raise ParseError(f"fragility defaults lack {exc.args[0]!r}", row=row) from None


def load_inventory(path, fragility_defaults=None):
    """Read a delimited inventory file into a :class:`Portfolio`.

    Columns are ``id, lon, lat, stories, year_built, structure_class,
    occupancy, vs30, replacement_cost`` with optional ``frag_mu, frag_beta``.
    Rows are numbered from 1 (first data row) in error messages. The
    capacity correlation starts as the identity.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",;\t|") if sample.strip() else csv.excel
        except csv.Error:
            dialect = csv.excel
        reader = csv.reader(fh, dialect)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("inventory file is empty (no header)") from None
        missing = [c for c in INVENTORY_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"inventory header lacks columns {missing}", row=0)
        col = {name: header.index(name) for name in header}
        has_frag = all(c in col for c in FRAGILITY_COLUMNS)

        raw = []
        for rowno, fields in enumerate(reader, start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(fields)}", row=rowno)
            raw.append((rowno, [f.strip() for f in fields]))

    def num(fields, name, rowno, conv=float):
        text = fields[col[name]]
        try:
            return conv(text)
        except ValueError:
            raise ParseError(f"cannot parse {text!r} as {conv.__name__}", row=rowno, column=name) from None

    if not raw:
        return Portfolio((), np.zeros((0, 0)), None)

    lons = np.array([num(f, "lon", r) for r, f in raw])
    lats = np.array([num(f, "lat", r) for r, f in raw])
    origin = (float(lons.mean()), float(lats.mean()))
    xs, ys = project_lonlat(lons, lats, origin)

    buildings = []
    seen = set()
    for k, (rowno, f) in enumerate(raw):
        bid = f[col["id"]]
        if bid in seen:
            raise ParseError(f"duplicate id {bid!r}", row=rowno, column="id")
        seen.add(bid)
        vs30 = num(f, "vs30", rowno)
        if not vs30 > 0:
            raise ValidationError(f"row {rowno}: vs30 must be > 0, got {vs30}")
        cost = num(f, "replacement_cost", rowno)
        if not cost >= 0:
            raise ValidationError(f"row {rowno}: replacement_cost must be >= 0, got {cost}")
        sclass = f[col["structure_class"]]
        frag_text = [f[col[c]] for c in FRAGILITY_COLUMNS] if has_frag else ["", ""]
        if all(frag_text):
            try:
                frag = FragilityMarginal.lognormal(
                    num(f, "frag_mu", rowno), num(f, "frag_beta", rowno)
                )
            except ValidationError as exc:
                raise ParseError(str(exc), row=rowno, column="frag_beta") from None
        else:
            frag = _default_fragility(fragility_defaults, sclass, rowno)
        stories = num(f, "stories", rowno, int)
        year_built = num(f, "year_built", rowno, int)
        try:
            buildings.append(
                Building(
                    id=bid,
                    x_km=float(xs[k]),
                    y_km=float(ys[k]),
                    stories=stories,
                    year_built=year_built,
                    structure_class=sclass,
                    occupancy=f[col["occupancy"]],
                    vs30=vs30,
                    replacement_cost=cost,
                    fragility=frag,
                    lon=float(lons[k]),
                    lat=float(lats[k]),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"row {rowno}: {exc}") from None
    return Portfolio(tuple(buildings), np.eye(len(buildings)), origin)


# ---------------------------------------------------------------------------
# synthetic portfolios


@dataclass(frozen=True)
class ClassSpec:
    """One structure class of a synthetic portfolio.

    ``mu_mean``/``mu_std`` parameterize a normal distribution of building
    ln-medians; ``beta`` is the per-building ln-dispersion.
    """

    name: str = "C1"
    weight: float = 1.0
    mu_mean: float = math.log(0.3)
    mu_std: float = 0.0
    beta: float = 0.4
    year_range: tuple = (1950, 2000)
    stories_range: tuple = (2, 4)
    occupancy: str = "RES"


@dataclass(frozen=True)
class SyntheticPortfolioSpec:
    n_buildings: int
    layout: str = "grid"
    bbox: tuple = (0.0, 0.0, 1.0, 1.0)
    classes: tuple = (ClassSpec(),)
    vs30_range: tuple = (760.0, 760.0)
    cost_median: float = 1.0e6
    cost_dispersion: float = 0.0
    class_layout: str = "random"

    def validate(self):
        if self.n_buildings < 1:
            raise ValidationError("synthetic portfolio needs n_buildings >= 1")
        xmin, ymin, xmax, ymax = self.bbox
        if not (xmax > xmin and ymax > ymin):
            raise ValidationError(f"degenerate bounding box {self.bbox}")
        if self.layout not in ("grid", "uniform"):
            raise ValidationError(f"unknown layout {self.layout!r}")
        if self.class_layout not in ("random", "striped"):
            raise ValidationError(f"unknown class_layout {self.class_layout!r}")
        if not self.classes:
            raise ValidationError("at least one class is required")
        if any(c.weight <= 0 for c in self.classes):
            raise ValidationError("class weights must be > 0")
        lo, hi = self.vs30_range
        if not (0 < lo <= hi):
            raise ValidationError(f"invalid vs30_range {self.vs30_range}")


def _grid_positions(n, bbox):
    xmin, ymin, xmax, ymax = bbox
    nx = math.ceil(math.sqrt(n))
    ny = math.ceil(n / nx)
    xs = np.linspace(xmin, xmax, nx) if nx > 1 else np.array([(xmin + xmax) / 2])
    ys = np.linspace(ymin, ymax, ny) if ny > 1 else np.array([(ymin + ymax) / 2])
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])[:n]


def generate_synthetic_portfolio(spec, seed):
    """Deterministic synthetic portfolio drawn from ``spec``."""
    spec.validate()
    n = spec.n_buildings
    rng_pos = _seeding.rng_from(seed, 1)
    rng_cls = _seeding.rng_from(seed, 2)
    rng_frag = _seeding.rng_from(seed, 3)
    rng_attr = _seeding.rng_from(seed, 4)

    if spec.layout == "grid":
        xy = _grid_positions(n, spec.bbox)
    else:
        xmin, ymin, xmax, ymax = spec.bbox
        xy = np.column_stack(
            [rng_pos.uniform(xmin, xmax, n), rng_pos.uniform(ymin, ymax, n)]
        )

    weights = np.array([c.weight for c in spec.classes], dtype=float)
    weights /= weights.sum()
    if spec.class_layout == "striped":
        # contiguous bands along x, sized by weight
        order = np.argsort(xy[:, 0], kind="stable")
        counts = np.floor(weights * n).astype(int)
        counts[-1] = n - counts[:-1].sum()
        cls_idx = np.empty(n, dtype=int)
        cls_idx[order] = np.repeat(np.arange(len(spec.classes)), counts)
    else:
        cls_idx = rng_cls.choice(len(spec.classes), size=n, p=weights)

    z_mu = rng_frag.standard_normal(n)
    lo, hi = spec.vs30_range
    vs30 = rng_attr.uniform(lo, hi, n) if hi > lo else np.full(n, lo)
    cost = spec.cost_median * np.exp(spec.cost_dispersion * rng_attr.standard_normal(n))
    u_year = rng_attr.random(n)
    u_story = rng_attr.random(n)

    buildings = []
    for i in range(n):
        c = spec.classes[cls_idx[i]]
        y0, y1 = c.year_range
        s0, s1 = c.stories_range
        buildings.append(
            Building(
                id=f"B{i:06d}",
                x_km=float(xy[i, 0]),
                y_km=float(xy[i, 1]),
                stories=int(s0 + math.floor(u_story[i] * (s1 - s0 + 1))),
                year_built=int(y0 + math.floor(u_year[i] * (y1 - y0 + 1))),
                structure_class=c.name,
                occupancy=c.occupancy,
                vs30=float(vs30[i]),
                replacement_cost=float(cost[i]),
                fragility=FragilityMarginal.lognormal(c.mu_mean + c.mu_std * z_mu[i], c.beta),
            )
        )
    return Portfolio(tuple(buildings), np.eye(n), None)


# ---------------------------------------------------------------------------
# capacity correlation and diversity


@dataclass(frozen=True)
class CapacityCorrelationModel:
    """Class affinity times exponential spatial decay."""

    rho_class: float = 0.0
    length_km: float = 1.0

    def validate(self):
        if not (0.0 <= self.rho_class < 1.0):
            raise ValidationError(f"rho_class must lie in [0, 1), got {self.rho_class}")
        if not self.length_km > 0:
            raise ValidationError(f"length_km must be > 0, got {self.length_km}")


def capacity_correlation_matrix(portfolio, model):
    """Raw (unrepaired) surrogate correlation matrix."""
    model.validate()
    classes = np.array([b.structure_class for b in portfolio.buildings])
    same = (classes[:, None] == classes[None, :]).astype(float)
    corr = same * model.rho_class * np.exp(-portfolio.distances / model.length_km)
    np.fill_diagonal(corr, 1.0)
    return corr


def build_capacity_correlation(portfolio, model):
    """Return a copy of ``portfolio`` carrying the PSD-repaired capacity correlation."""
    corr = repair_psd(capacity_correlation_matrix(portfolio, model))
    return Portfolio(portfolio.buildings, corr, portfolio.origin)


def apply_diversity(portfolio, sigma, seed):
    """Quenched ln-space median shifts ``eps_i ~ N(0, sigma**2)``.

    The shifts are ``sigma * z`` with ``z`` fixed by ``seed``, so the same
    seed yields common random numbers across diversity levels.
    """
    if not sigma >= 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    n = len(portfolio)
    if sigma == 0:
        shifts = np.zeros(n)
    else:
        shifts = sigma * _seeding.rng_from(seed, _seeding.TAG_DIVERSITY).standard_normal(n)
    shifts.setflags(write=False)
    return PortfolioRealization(portfolio, float(sigma), shifts)


# ---------------------------------------------------------------------------
# capacity sampling


def _normalize_mode(mode):
    if mode in ("conditionally-independent", "conditionally_independent"):
        return "independent"
    if mode not in CAPACITY_MODES:
        raise ValidationError(f"unknown capacity mode {mode!r}")
    return mode


def sample_ln_capacities(realization, mode, rng, size):
    """``size`` x N matrix of ln-capacities drawn through the Gaussian copula."""
    mode = _normalize_mode(mode)
    base = realization.base
    n = len(base)
    z = rng.standard_normal((size, n))
    if mode == "dependent" and base.capacity_factor is not None:
        z = z @ base.capacity_factor.T
    params = realization._lognormal_params
    if params is not None:
        mu, beta = params
        return mu + beta * z
    out = np.empty_like(z)
    u = _ndtr(z)
    for i, marg in enumerate(realization.marginals):
        if marg.kind == "lognormal":
            out[:, i] = marg.mu + marg.beta * z[:, i]
        else:
            out[:, i] = marg.ppf_ln(u[:, i])
    return out


def sample_capacities(realization, mode, seed):
    """One capacity vector (g) for ``realization``."""
    rng = _seeding.rng_from(seed, _seeding.TAG_CAPACITY)
    return np.exp(sample_ln_capacities(realization, mode, rng, 1)[0])


# ---------------------------------------------------------------------------
# coarse categorization


def pool_by_class(portfolio, n_reference=100, seed=0):
    """Replace fragilities with per-(structure_class, era) pooled lognormals.

    Pooled mu is the mean of member ln-medians; pooled beta is the standard
    deviation of a reference ln-capacity sample with ``n_reference`` draws
    per member.
    """
    groups = {}
    for i, b in enumerate(portfolio.buildings):
        groups.setdefault((b.structure_class, b.era), []).append(i)
    frags = [None] * len(portfolio)
    rng = _seeding.rng_from(seed, _seeding.TAG_REFERENCE)
    for key in sorted(groups):
        members = groups[key]
        mus = [portfolio.buildings[i].fragility.mean_ln for i in members]
        ref = np.concatenate(
            [
                portfolio.buildings[i].fragility.ppf_ln(
                    np.clip(rng.random(n_reference), 1e-12, 1 - 1e-12)
                )
                for i in members
            ]
        )
        pooled = FragilityMarginal.lognormal(float(np.mean(mus)), float(ref.std(ddof=1)))
        for i in members:
            frags[i] = pooled
    return portfolio.with_fragilities(frags)


__all__ = [
    "Building",
    "CapacityCorrelationModel",
    "ClassSpec",
    "FragilityMarginal",
    "Portfolio",
    "PortfolioRealization",
    "SyntheticPortfolioSpec",
    "apply_diversity",
    "build_capacity_correlation",
    "capacity_correlation_matrix",
    "design_era",
    "fragility_probability",
    "generate_synthetic_portfolio",
    "load_inventory",
    "pool_by_class",
    "project_lonlat",
    "sample_capacities",
    "sample_ln_capacities",
]
