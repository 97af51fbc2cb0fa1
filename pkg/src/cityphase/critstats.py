"""Empirical critical-phenomena diagnostics over cell ensembles.

Everything here works on the magnetization ``m = 2 m_d - 1`` or on spin
matrices (realization x building, entries +-1).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

DIVERGENT = math.inf
DEFAULT_LANDAU_K = 100
CK_FLOOR = 1e-8
MIN_PAIRS = 30
PROFILE_BINS = 30


@dataclass(frozen=True, eq=False)
class EquilibriumSubset:
    indices: np.ndarray
    md_lo: float
    md_hi: float
    fraction: float

    @property
    def width(self):
        return self.md_hi - self.md_lo


def equilibrium_subset(samples, f=0.10, min_count=10):
    """Narrowest window holding ``ceil(f n)`` samples; ties go to the lowest start.

    Returned indices refer to the original sample order (sorted ascending).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if not 0 < f <= 1:
        raise ValidationError(f"f must lie in (0, 1], got {f}")
    n = x.size
    if n == 0 or n * f < min_count:
        raise ValidationError(f"need n*f >= {min_count}; got n={n}, f={f}")
    w = min(n, math.ceil(f * n - 1e-9))
    order = np.argsort(x, kind="stable")
    xs = x[order]
    widths = xs[w - 1 :] - xs[: n - w + 1]
    start = int(np.argmin(widths))
    idx = np.sort(order[start : start + w])
    return EquilibriumSubset(idx, float(xs[start]), float(xs[start + w - 1]), float(f))


def susceptibility_fluctuation(md_values, n_buildings):
    """``N * Var(m)`` (population variance) with ``m = 2 m_d - 1``."""
    m = 2.0 * np.asarray(md_values, dtype=float) - 1.0
    if m.size == 0:
        raise ValidationError("empty subset")
    return float(n_buildings) * float(np.var(m))


# ---------------------------------------------------------------------------
# spatial correlations


@dataclass(frozen=True, eq=False)
class CorrelationProfile:
    r: np.ndarray
    c: np.ndarray
    c0: float
    dr: float
    pair_counts: np.ndarray

    @property
    def normalized(self):
        if self.c0 <= 0:
            return np.full_like(self.c, np.nan)
        return self.c / self.c0


class CorrelationAccumulator:
    """Streaming sums for connected spin correlations.

    Feed spin rows with :meth:`update`; independent accumulators over the same
    sites combine with :meth:`merge`.
    """

    def __init__(self, n_sites):
        self.n = 0
        self.s1 = np.zeros(n_sites)
        self.s2 = np.zeros((n_sites, n_sites))

    def update(self, spins):
        s = np.atleast_2d(np.asarray(spins, dtype=float))
        if s.shape[1] != self.s1.size:
            raise ValidationError("spin row length does not match the accumulator")
        self.n += s.shape[0]
        self.s1 += s.sum(axis=0)
        self.s2 += s.T @ s
        return self

    def merge(self, other):
        out = CorrelationAccumulator(self.s1.size)
        out.n = self.n + other.n
        out.s1 = self.s1 + other.s1
        out.s2 = self.s2 + other.s2
        return out

    def connected(self):
        if self.n == 0:
            raise ValidationError("no realizations accumulated")
        mean = self.s1 / self.n
        return self.s2 / self.n - np.outer(mean, mean), mean


def connected_correlation(spins, positions, dr=None, min_realizations=10):
    """Radially averaged connected correlation over bins ``[k dr, (k+1) dr)``.

    ``C0`` is the mean over sites of ``1 - <s_i>**2``. ``dr`` defaults to a
    thirtieth of the largest pair distance.
    """
    s = np.asarray(spins, dtype=float)
    xy = np.asarray(positions, dtype=float).reshape(-1, 2)
    if s.ndim != 2 or s.shape[1] != len(xy):
        raise ValidationError("spins must be realization x building, matching positions")
    if s.shape[1] < 2:
        raise ValidationError("need at least 2 buildings")
    if s.shape[0] < min_realizations:
        raise ValidationError(f"need at least {min_realizations} realizations, got {s.shape[0]}")
    acc = CorrelationAccumulator(s.shape[1]).update(s)
    return profile_from_accumulator(acc, xy, dr)


def profile_from_accumulator(acc, positions, dr=None):
    cij, mean = acc.connected()
    xy = np.asarray(positions, dtype=float)
    iu = np.triu_indices(len(xy), k=1)
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))[iu]
    if dr is None:
        dmax = float(d.max()) if d.size else 0.0
        dr = dmax / PROFILE_BINS if dmax > 0 else 1.0
    if not dr > 0:
        raise ValidationError(f"dr must be > 0, got {dr}")
    k = np.floor(d / dr).astype(np.int64)
    nb = int(k.max()) + 1
    counts = np.bincount(k, minlength=nb)
    sums = np.bincount(k, weights=cij[iu], minlength=nb)
    occupied = counts > 0
    if occupied.sum() == 1:
        warnings.warn("all pairs fall in one distance bin; dr is too large", RuntimeWarning, stacklevel=2)
    centers = (np.arange(nb) + 0.5) * dr
    c0 = float(np.mean(1.0 - mean**2))
    return CorrelationProfile(
        centers[occupied], sums[occupied] / counts[occupied], c0, float(dr), counts[occupied]
    )


def correlation_length(profile, r_max=math.inf, min_pairs=MIN_PAIRS):
    """``xi = -1/slope`` of ``ln(C/C0)`` versus r; ``inf`` when the slope is >= 0.

    Bins are used in order of distance up to ``r_max`` and stop at the first
    non-positive value; bins with fewer than ``min_pairs`` pairs are skipped.
    """
    r = np.asarray(profile.r, dtype=float)
    c = np.asarray(profile.c, dtype=float)
    counts = np.asarray(profile.pair_counts)
    if profile.c0 <= 0:
        raise ValidationError("on-site variance is zero")
    use_r, use_c = [], []
    for ri, ci, ni in zip(r, c, counts):
        if ri > r_max:
            break
        if ni < min_pairs:
            continue
        if ci <= 0:
            break
        use_r.append(ri)
        use_c.append(ci / profile.c0)
    if len(use_r) < 3:
        raise ValidationError(f"need >= 3 positive bins below r_max, got {len(use_r)}")
    slope, _ = np.polyfit(np.array(use_r), np.log(use_c), 1)
    if slope >= 0:
        return DIVERGENT
    return float(-1.0 / slope)


# ---------------------------------------------------------------------------
# Landau analysis


@dataclass(frozen=True, eq=False)
class EmpiricalFreeEnergy:
    m: np.ndarray
    f: np.ndarray
    probability: np.ndarray
    offset_eps: float


def empirical_free_energy(md_samples, n_bins=50, offset_eps=None):
    """``-ln(P(m) + eps)`` on ``n_bins`` equal bins over ``m`` in [-1, 1]."""
    md = np.asarray(md_samples, dtype=float).ravel()
    if md.size == 0:
        raise ValidationError("no samples")
    if n_bins < 20:
        raise ValidationError(f"n_bins must be >= 20, got {n_bins}")
    eps = 0.5 / md.size if offset_eps is None else float(offset_eps)
    if not eps > 0:
        raise ValidationError("offset_eps must be > 0")
    m = 2.0 * md - 1.0
    counts, edges = np.histogram(m, bins=n_bins, range=(-1.0, 1.0))
    p = counts / md.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    return EmpiricalFreeEnergy(centers, -np.log(p + eps), p, eps)


@dataclass(frozen=True, eq=False)
class LandauFit:
    c0: float
    c1: float
    c2: float
    c4: float
    ck: float
    k: int
    m_star: float
    chi: float
    residual_norm: float

    @property
    def coefficients(self):
        return (self.c0, self.c1, self.c2, self.c4, self.ck)

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        return self.c0 + self.c1 * m + self.c2 * m**2 + self.c4 * m**4 + self.ck * m**self.k

    def second_derivative(self, m):
        m = np.asarray(m, dtype=float)
        k = self.k
        return 2 * self.c2 + 12 * self.c4 * m**2 + k * (k - 1) * self.ck * m ** (k - 2)

    def local_minima(self, n_grid=10_001):
        """Minima on the closed interval [-1, 1], endpoints included."""
        grid = np.linspace(-1.0, 1.0, n_grid)
        f = self(grid)
        padded = np.concatenate([[np.inf], f, [np.inf]])
        idx = np.flatnonzero((padded[1:-1] < padded[:-2]) & (padded[1:-1] <= padded[2:]))
        return [_refine(self, grid, i) for i in idx]


def _refine(poly, grid, i):
    if i <= 0 or i >= len(grid) - 1:
        return float(grid[i])
    h = grid[1] - grid[0]
    fl, fc, fr = poly(grid[i - 1 : i + 2])
    denom = fl - 2 * fc + fr
    if denom <= 0:
        return float(grid[i])
    return float(grid[i] + 0.5 * h * (fl - fr) / denom)


def fit_landau_polynomial(free_energy, k=DEFAULT_LANDAU_K, ck_floor=CK_FLOOR, weights=None):
    """Least squares over ``1, m, m^2, m^4, m^k`` with ``ck >= ck_floor``.

    Accepts an :class:`EmpiricalFreeEnergy` or an ``(m, F)`` pair. When the
    unconstrained ``ck`` falls below the floor it is clamped there and the
    other four coefficients are refit.
    """
    if isinstance(free_energy, EmpiricalFreeEnergy):
        m, f = free_energy.m, free_energy.f
    else:
        m, f = (np.asarray(a, dtype=float) for a in free_energy)
    if m.size < 20:
        raise ValidationError(f"need >= 20 bins, got {m.size}")
    if k < 6 or k % 2:
        raise ValidationError(f"k must be an even integer >= 6, got {k}")
    w = np.ones_like(m) if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    basis = np.column_stack([np.ones_like(m), m, m**2, m**4, m**k])
    a = basis * w[:, None]
    b = f * w
    if np.linalg.matrix_rank(a) < 5:
        raise NumericError("Landau design matrix is singular")
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    if not coef[4] >= ck_floor:
        head, *_ = np.linalg.lstsq(a[:, :4], b - ck_floor * a[:, 4], rcond=None)
        coef = np.append(head, ck_floor)
    resid = float(np.linalg.norm(a @ coef - b))

    probe = LandauFit(*coef, k=int(k), m_star=math.nan, chi=math.nan, residual_norm=resid)
    grid = np.linspace(-1.0, 1.0, 10_001)
    i = int(np.argmin(probe(grid)))
    m_star = _refine(probe, grid, i)
    curv = float(probe.second_derivative(m_star))
    chi = 1.0 / curv if curv > 0 else DIVERGENT
    return LandauFit(*coef, k=int(k), m_star=m_star, chi=chi, residual_norm=resid)


# ---------------------------------------------------------------------------
# principal components


@dataclass(frozen=True, eq=False)
class PcaResult:
    """``explained`` is ``None`` when the matrix has zero variance."""

    explained: np.ndarray | None
    pc1: np.ndarray | None
    pc2: np.ndarray | None
    corr_pc1_md: float

    @property
    def degenerate(self):
        return self.explained is None


def pca_order_parameter(spins, md=None):
    s = np.asarray(spins, dtype=float)
    if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 2:
        raise ValidationError("need a matrix with >= 2 realizations and >= 2 buildings")
    md = (s > 0).mean(axis=1) if md is None else np.asarray(md, dtype=float)
    x = s - s.mean(axis=0)
    u, sv, _ = np.linalg.svd(x, full_matrices=False)
    total = float((sv**2).sum())
    if total <= 1e-12 * s.size:
        return PcaResult(None, None, None, math.nan)
    explained = sv**2 / total
    scores = u * sv
    pc1 = scores[:, 0]
    pc2 = scores[:, 1] if scores.shape[1] > 1 else np.zeros_like(pc1)
    if np.std(md) > 0 and np.std(pc1) > 0:
        corr = float(np.corrcoef(pc1, md)[0, 1])
    else:
        corr = math.nan
    if corr < 0:
        pc1 = -pc1
        corr = -corr
    return PcaResult(explained, pc1, pc2, corr)


# ---------------------------------------------------------------------------
# replica protocol


@dataclass(frozen=True)
class ReplicaDiagnostics:
    sigma: float
    replica: int
    chi_fluct: float
    chi_curv: float
    m_star: float
    xi: float


@dataclass(frozen=True, eq=False)
class ReplicaReport:
    summary: ReplicaDiagnostics
    profile: CorrelationProfile | None
    landau: LandauFit
    pca: PcaResult
    subset: EquilibriumSubset


def replica_diagnostics(ensemble, positions, f=0.10, min_count=10, dr=None, r_max=math.inf,
                        n_bins=50, k=DEFAULT_LANDAU_K):
    """Per-replica susceptibility, Landau, correlation-length and PCA diagnostics.

    The ensemble must carry spins. Fluctuation and correlation estimators run
    on each replica's equilibrium subset; the Landau fit and PCA use all of
    the replica's realizations. A correlation length that cannot be fitted
    is reported as ``nan``.
    """
    if ensemble.spins is None:
        raise ValidationError("ensemble has no spin matrix; enable diagnostics.retain_spins")
    n_sites = ensemble.spins.shape[1]
    reports = []
    for rep in np.unique(ensemble.replicas):
        sel = np.flatnonzero(ensemble.replicas == rep)
        md = ensemble.damage_fractions[sel]
        sub = equilibrium_subset(md, f, min_count)
        chosen = sel[sub.indices]
        chi_fluct = susceptibility_fluctuation(ensemble.damage_fractions[chosen], n_sites)
        landau = fit_landau_polynomial(empirical_free_energy(md, n_bins), k)
        profile = None
        xi = math.nan
        try:
            profile = connected_correlation(ensemble.spins[chosen], positions, dr, min_realizations=min_count)
            xi = correlation_length(profile, r_max)
        except ValidationError:
            pass
        pca = pca_order_parameter(ensemble.spins[sel], md) if len(sel) >= 2 else PcaResult(None, None, None, math.nan)
        row = ReplicaDiagnostics(float(ensemble.sigma), int(rep), chi_fluct, landau.chi, landau.m_star, xi)
        reports.append(ReplicaReport(row, profile, landau, pca, sub))
    return reports


def distribution_summary(values):
    """Median and interquartile range over finite values (nan when none)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"median": math.nan, "q25": math.nan, "q75": math.nan, "n": 0}
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75), "n": int(v.size)}
