"""Seeded Monte Carlo sweeps over (mw, sigma, T) and their phase representations.

Seeding
-------
Each cell seed is ``mix_seed(master, TAG_CELL, i_mw, i_sigma, i_t)``
(``i_mw`` is forced to 0 under the ``"common"`` policy, which gives common
random numbers along magnitude). Inside a cell, realizations are processed
in fixed blocks of :data:`BLOCK` rows; block ``b`` draws capacities,
demands and finite-T coin flips from independent streams keyed by
``mix_seed(cell_seed, TAG_BLOCK, b)``. Diversity replicas use
``mix_seed(diversity_seed, k)`` with one diversity seed per sweep, so the
quenched portfolio is shared by every cell. Nothing depends on worker
count or execution order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from . import _seeding
from .damage import DEFAULT_COST_RATIO, damage_indicators, repair_cost_fraction
from .errors import CityPhaseError, ValidationError
from .hazard import (
    CorrelationModel,
    GmpeModel,
    Scenario,
    ScalingRelation,
    default_gmpe,
    demand_factor,
    median_demand_field,
    sample_ln_demands,
)
from .inventory import apply_diversity, sample_ln_capacities

BLOCK = 256
ABOVE_RANGE = math.inf


# ---------------------------------------------------------------------------
# configuration types


def _axis(rng):
    lo, hi, step = (float(v) for v in rng)
    if not step > 0:
        raise ValidationError(f"axis step must be > 0, got {step}")
    if hi < lo:
        raise ValidationError(f"axis max {hi} below min {lo}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 10)


@dataclass(frozen=True)
class GridSpec:
    mw_range: tuple = (3.5, 8.5, 0.05)
    sigma_range: tuple = (0.0, 1.0, 0.01)
    t_values: tuple = (0.0,)
    n_realizations: int = 10_000
    master_seed: int = 0
    n_portfolio_realizations: int = 1
    seed_policy: str = "cell"

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValidationError("n_realizations must be >= 1")
        if self.n_portfolio_realizations < 1:
            raise ValidationError("n_portfolio_realizations must be >= 1")
        if self.seed_policy not in ("cell", "common"):
            raise ValidationError(f"unknown seed_policy {self.seed_policy!r}")
        if not self.t_values or any(t < 0 for t in self.t_values):
            raise ValidationError("t_values must be non-empty and >= 0")
        _axis(self.mw_range)
        _axis(self.sigma_range)

    @property
    def mw_values(self):
        return _axis(self.mw_range)

    @property
    def sigma_values(self):
        return _axis(self.sigma_range)

    @classmethod
    def paper(cls, **overrides):
        kw = dict(mw_range=(3.5, 8.5, 0.05), sigma_range=(0.0, 1.0, 0.01), n_realizations=10_000)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, **overrides):
        kw = dict(mw_range=(3.5, 8.5, 0.25), sigma_range=(0.0, 1.0, 0.1), n_realizations=1_000)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class HazardConfig:
    scenario: Scenario
    gmpe: GmpeModel = None
    scaling: ScalingRelation = ScalingRelation()
    correlation: CorrelationModel = CorrelationModel()

    def __post_init__(self):
        if self.gmpe is None:
            gmpe, _ = default_gmpe()
            object.__setattr__(self, "gmpe", gmpe)


@dataclass(frozen=True)
class CellOptions:
    capacity_mode: str = "dependent"
    margin_domain: str = "linear"
    cost_ratio: float = DEFAULT_COST_RATIO
    retain_spins: bool = False


@dataclass(frozen=True, eq=False)
class CellEnsemble:
    mw: float
    sigma: float
    t: float
    damage_fractions: np.ndarray
    cost_fractions: np.ndarray
    seeds: np.ndarray
    replicas: np.ndarray
    cell_seed: int
    spins: np.ndarray | None = None

    @property
    def n_realizations(self):
        return len(self.damage_fractions)


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    """``mdstar[i, j]`` is the most probable damage fraction at ``(mw[i], sigma[j])``."""

    mw: np.ndarray
    sigma: np.ndarray
    mdstar: np.ndarray
    bistable: np.ndarray
    source: str = "empirical"
    t: float = 0.0

    def __post_init__(self):
        mw = np.asarray(self.mw, dtype=float)
        sg = np.asarray(self.sigma, dtype=float)
        if mw.size > 1 and np.any(np.diff(mw) <= 0):
            raise ValidationError("mw axis must be strictly increasing")
        if sg.size > 1 and np.any(np.diff(sg) <= 0):
            raise ValidationError("sigma axis must be strictly increasing")
        md = np.asarray(self.mdstar, dtype=float).reshape(mw.size, sg.size)
        bi = np.asarray(self.bistable, dtype=bool).reshape(mw.size, sg.size)
        object.__setattr__(self, "mw", mw)
        object.__setattr__(self, "sigma", sg)
        object.__setattr__(self, "mdstar", md)
        object.__setattr__(self, "bistable", bi)


@dataclass(eq=False)
class SweepResult:
    ensembles: list
    phase_grids: dict = field(default_factory=dict)


class SweepError(CityPhaseError):
    """One or more cells failed; ``failures`` maps (mw, sigma, t) to the error text."""

    def __init__(self, failures):
        self.failures = failures
        lines = [f"(mw={k[0]}, sigma={k[1]}, t={k[2]}): {v}" for k, v in failures.items()]
        super().__init__(f"{len(failures)} cell(s) failed:\n" + "\n".join(lines))


# ---------------------------------------------------------------------------
# one cell


def run_cell(
    mw,
    sigma,
    t,
    portfolio,
    hazard,
    n_realizations,
    seed,
    *,
    options=CellOptions(),
    n_replicas=1,
    diversity_seed=None,
):
    """Simulate ``n_realizations`` damage outcomes at one (mw, sigma, t) cell."""
    if len(portfolio) == 0:
        raise ValidationError("portfolio is empty")
    n = int(n_realizations)
    if n < 1:
        raise ValidationError("n_realizations must be >= 1")
    scenario = hazard.scenario.at_magnitude(mw)
    gmpe = hazard.gmpe
    ln_med = median_demand_field(scenario, portfolio, gmpe, hazard.scaling)
    factor = demand_factor(portfolio.positions, hazard.correlation) if gmpe.phi > 0 else None
    costs = portfolio.replacement_costs
    has_costs = costs.sum() > 0

    div_seed = seed if diversity_seed is None else diversity_seed
    reps = [
        apply_diversity(portfolio, sigma, _seeding.mix_seed(div_seed, k)) for k in range(n_replicas)
    ]
    replica_of = (np.arange(n) * n_replicas) // n

    md = np.empty(n)
    rr = np.full(n, np.nan)
    seeds = np.empty(n, dtype=np.uint64)
    spins = np.empty((n, len(portfolio)), dtype=np.int8) if options.retain_spins else None

    for b, start in enumerate(range(0, n, BLOCK)):
        stop = min(start + BLOCK, n)
        bseed = _seeding.mix_seed(seed, _seeding.TAG_BLOCK, b)
        rng_cap = _seeding.rng_from(bseed, _seeding.TAG_CAPACITY)
        rng_dem = _seeding.rng_from(bseed, _seeding.TAG_DEMAND)
        rng_dmg = _seeding.rng_from(bseed, _seeding.TAG_DAMAGE)
        rows = np.arange(start, stop)
        seeds[rows] = bseed
        ln_d = sample_ln_demands(ln_med, gmpe.tau, gmpe.phi, factor, rng_dem, stop - start)
        ln_c = np.empty_like(ln_d)
        for k in np.unique(replica_of[rows]):
            sel = replica_of[rows] == k
            ln_c[sel] = sample_ln_capacities(reps[k], options.capacity_mode, rng_cap, int(sel.sum()))
        ind = damage_indicators(np.exp(ln_c), np.exp(ln_d), t, rng_dmg, options.margin_domain)
        md[rows] = ind.mean(axis=1)
        if has_costs:
            rr[rows] = repair_cost_fraction(ind, costs, options.cost_ratio)
        if spins is not None:
            spins[rows] = 2 * ind.astype(np.int8) - 1

    return CellEnsemble(
        mw=float(mw),
        sigma=float(sigma),
        t=float(t),
        damage_fractions=md,
        cost_fractions=rr,
        seeds=seeds,
        replicas=replica_of,
        cell_seed=int(seed),
        spins=spins,
    )


# ---------------------------------------------------------------------------
# sweeps


def cell_seed(spec, i_mw, i_sigma, i_t):
    if spec.seed_policy == "common":
        i_mw = 0
    return _seeding.mix_seed(spec.master_seed, _seeding.TAG_CELL, i_mw, i_sigma, i_t)


def diversity_seed(spec):
    return _seeding.mix_seed(spec.master_seed, _seeding.TAG_DIVERSITY)


_WORKER_STATE = {}


def _init_worker(portfolio, hazard, options, spec):
    _WORKER_STATE.update(portfolio=portfolio, hazard=hazard, options=options, spec=spec)


def _run_indexed(task):
    i_t, i_mw, i_sigma = task
    st = _WORKER_STATE
    spec = st["spec"]
    mw = spec.mw_values[i_mw]
    sg = spec.sigma_values[i_sigma]
    t = spec.t_values[i_t]
    try:
        return task, run_cell(
            mw,
            sg,
            t,
            st["portfolio"],
            st["hazard"],
            spec.n_realizations,
            cell_seed(spec, i_mw, i_sigma, i_t),
            options=st["options"],
            n_replicas=spec.n_portfolio_realizations,
            diversity_seed=diversity_seed(spec),
        ), None
    except Exception as exc:  # collected and re-raised with coordinates
        return task, None, f"{type(exc).__name__}: {exc}"


def sweep_grid(spec, portfolio, hazard, options=CellOptions(), workers=1):
    """Run every (t, mw, sigma) cell once and build one PhaseGrid per temperature."""
    tasks = [
        (i_t, i_mw, i_s)
        for i_t in range(len(spec.t_values))
        for i_mw in range(len(spec.mw_values))
        for i_s in range(len(spec.sigma_values))
    ]
    if workers <= 1:
        _init_worker(portfolio, hazard, options, spec)
        results = [_run_indexed(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (8 * workers))
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(portfolio, hazard, options, spec),
        ) as pool:
            results = list(pool.map(_run_indexed, tasks, chunksize=chunk))

    failures = {}
    ensembles = []
    for (i_t, i_mw, i_s), ens, err in results:
        if err is not None:
            key = (float(spec.mw_values[i_mw]), float(spec.sigma_values[i_s]), float(spec.t_values[i_t]))
            failures[key] = err
        else:
            ensembles.append(ens)
    if failures:
        raise SweepError(failures)

    grids = {}
    for t in spec.t_values:
        cells = [e for e in ensembles if e.t == float(t)]
        grids[float(t)] = phase_grid_from_ensembles(cells, spec.mw_values, spec.sigma_values, t)
    return SweepResult(ensembles, grids)


def phase_grid_from_ensembles(ensembles, mw_values, sigma_values, t=0.0):
    mw_values = np.asarray(mw_values, dtype=float)
    sigma_values = np.asarray(sigma_values, dtype=float)
    md = np.full((mw_values.size, sigma_values.size), np.nan)
    bi = np.zeros_like(md, dtype=bool)
    for e in ensembles:
        i = int(np.argmin(np.abs(mw_values - e.mw)))
        j = int(np.argmin(np.abs(sigma_values - e.sigma)))
        md[i, j] = most_probable_fraction(e.damage_fractions)
        bi[i, j] = detect_bimodality(e.damage_fractions).is_bimodal
    return PhaseGrid(mw_values, sigma_values, md, bi, "empirical", float(t))


# ---------------------------------------------------------------------------
# phase representations


def _bin_index(samples, n_bins):
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, samples, side="right") - 1
    return np.clip(idx, 0, n_bins - 1)


def most_probable_fraction(samples, n_bins=100, mass=0.01):
    """Mean of the samples in the smallest set of top-count bins holding > ``mass`` of them.

    Bins are ranked by count, ties broken toward the lower bin index; the
    prefix must hold strictly more than ``ceil(mass * n)`` samples (or all
    of them when that is impossible).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValidationError("most_probable_fraction needs at least one sample")
    idx = _bin_index(x, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    order = np.lexsort((np.arange(n_bins), -counts))
    need = math.ceil(mass * x.size)
    cum = np.cumsum(counts[order])
    over = np.nonzero(cum > need)[0]
    k = int(over[0]) + 1 if over.size else n_bins
    chosen = np.zeros(n_bins, dtype=bool)
    chosen[order[:k]] = True
    return float(x[chosen[idx]].mean())


@dataclass(frozen=True)
class Bimodality:
    is_bimodal: bool
    peaks: tuple


def detect_bimodality(samples, n_bins=100, prominence=0.05, min_separation=0.2, smooth_bins=3.0):
    """Two or more well-separated, prominent modes on the m_d histogram.

    The 100-bin histogram is smoothed with a Gaussian kernel of
    ``smooth_bins`` bins (zero padding outside [0, 1]) before peak finding;
    peaks need prominence >= ``prominence`` x the highest smoothed bin and
    are accepted greedily by height when at least ``min_separation`` apart.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        return Bimodality(False, ())
    counts = np.bincount(_bin_index(x, n_bins), minlength=n_bins).astype(float)
    if smooth_bins > 0:
        counts = ndimage.gaussian_filter1d(counts, smooth_bins, mode="constant", cval=0.0)
    padded = np.concatenate([[0.0], counts, [0.0]])
    top = padded.max()
    if top <= 0:
        return Bimodality(False, ())
    idx, _ = signal.find_peaks(padded, prominence=prominence * top)
    idx = idx - 1
    centers = (idx + 0.5) / n_bins
    order = np.argsort(-counts[idx], kind="stable")
    chosen = []
    for k in order:
        c = centers[k]
        if all(abs(c - other) >= min_separation - 1e-12 for other in chosen):
            chosen.append(float(c))
    chosen.sort()
    return Bimodality(len(chosen) >= 2, tuple(chosen))


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Normalized occurrence table; ``values[i, k]`` is tuning bin ``i``, m_d bin ``k``."""

    axis: str
    fixed_value: float
    tuning_values: np.ndarray
    md_edges: np.ndarray
    values: np.ndarray
    clip_value: float


AXIS_BIN_WIDTH = {"mw": 0.05, "sigma": 0.01}
AXIS_CLIP_PERCENTILE = {"mw": 95.0, "sigma": 99.0}


def heatmap(ensembles, axis, clip_percentile=None, md_bin_width=1e-3, tuning_bin_width=None):
    """2-D histogram of m_d against the tuning parameter, clipped and normalized.

    ``axis`` names the tuning parameter; the other one must be shared by
    every ensemble. Counts are clipped at ``clip_percentile`` of the
    nonzero counts and divided by the clip value.
    """
    if axis not in AXIS_BIN_WIDTH:
        raise ValidationError(f"axis must be 'mw' or 'sigma', got {axis!r}")
    if not ensembles:
        raise ValidationError("heatmap needs at least one ensemble")
    fixed_attr = "sigma" if axis == "mw" else "mw"
    fixed = {getattr(e, fixed_attr) for e in ensembles}
    temps = {e.t for e in ensembles}
    if len(fixed) != 1 or len(temps) != 1:
        raise ValidationError(f"ensembles must share one {fixed_attr} and one t value")
    width = tuning_bin_width or AXIS_BIN_WIDTH[axis]
    pct = AXIS_CLIP_PERCENTILE[axis] if clip_percentile is None else clip_percentile

    n_md = int(round(1.0 / md_bin_width))
    edges = np.linspace(0.0, 1.0, n_md + 1)
    keys = sorted({int(round(getattr(e, axis) / width)) for e in ensembles})
    col = {k: i for i, k in enumerate(keys)}
    counts = np.zeros((len(keys), n_md))
    for e in ensembles:
        i = col[int(round(getattr(e, axis) / width))]
        counts[i] += np.bincount(_bin_index(e.damage_fractions, n_md), minlength=n_md)
    nz = counts[counts > 0]
    clip = float(np.percentile(nz, pct)) if nz.size else 1.0
    values = np.minimum(counts, clip) / clip
    return Heatmap(axis, float(next(iter(fixed))), np.array(keys) * width, edges, values, clip)


def critical_diversity_from_flags(sigmas, bimodal):
    """Smallest sigma from which every larger sigma is unimodal; ``inf`` if none."""
    s = np.asarray(sigmas, dtype=float)
    f = np.asarray(bimodal, dtype=bool)
    order = np.argsort(s)
    s, f = s[order], f[order]
    if s.size == 0:
        raise ValidationError("no sigma values")
    if f[-1]:
        return ABOVE_RANGE
    bimodal_idx = np.nonzero(f)[0]
    if bimodal_idx.size == 0:
        return float(s[0])
    return float(s[bimodal_idx[-1] + 1])


def critical_diversity_empirical(ensembles, mw_row, t=None):
    """Empirical critical diversity along the magnitude row ``mw_row``."""
    row = [
        e
        for e in ensembles
        if math.isclose(e.mw, mw_row, abs_tol=1e-9) and (t is None or math.isclose(e.t, t, abs_tol=1e-12))
    ]
    if not row:
        raise ValidationError(f"no ensembles at mw={mw_row}")
    if t is None and len({e.t for e in row}) > 1:
        raise ValidationError("ensembles span several temperatures; pass t")
    flags = [detect_bimodality(e.damage_fractions).is_bimodal for e in row]
    return critical_diversity_from_flags([e.sigma for e in row], flags)
