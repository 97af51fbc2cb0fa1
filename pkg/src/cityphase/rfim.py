"""Mean-field random-field Ising model with unit coupling.

The magnetization solves ``m = erf((m + a1) / (sqrt(2) a2))`` where ``a1`` is
the effective field and ``a2`` the disorder width. The matching free energy
(up to a constant) is::

    F(m) = m**2/2 - (m + a1) erf(u) - sqrt(2/pi) a2 exp(-u**2),
    u = (m + a1) / (sqrt(2) a2)

Root finding exploits the shape of the residual ``g(m) = m - erf(u)``:
``g' = 1 - q(m)`` with ``q(m) = sqrt(2/pi) / a2 * exp(-(m + a1)**2 / (2 a2**2))``,
so ``g`` is monotone on at most three intervals and each holds at most one root.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .ensemble import PhaseGrid
from .errors import NumericError, ValidationError

SQRT2 = math.sqrt(2.0)
A2_CRITICAL = math.sqrt(2.0 / math.pi)
BISTABLE_GAP = 1e-4
TIE_RTOL = 1e-12
DIVERGENT = math.inf


@dataclass(frozen=True)
class MeanFieldPoint:
    a1: float
    a2: float

    def __post_init__(self):
        if not self.a2 > 0:
            raise ValidationError(f"a2 must be > 0, got {self.a2}")


def residual(m, point):
    return m - special.erf((m + point.a1) / (SQRT2 * point.a2))


def stability_q(m, point):
    """Slope of the mean-field map at ``m``; a fixed point is stable iff q < 1."""
    z = (m + point.a1) / point.a2
    return A2_CRITICAL / point.a2 * np.exp(-0.5 * z * z)


def _g(m, a1, a2):
    return m - math.erf((m + a1) / (SQRT2 * a2))


def _monotone_breaks(a1, a2):
    """Interior points in (-1, 1) where g changes monotonicity."""
    if a2 >= A2_CRITICAL:
        return []
    w = a2 * math.sqrt(2.0 * math.log(A2_CRITICAL / a2))
    return [b for b in (-a1 - w, -a1 + w) if -1.0 < b < 1.0]


def _bisect(a1, a2, lo, hi, glo):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        gm = _g(mid, a1, a2)
        if gm == 0.0:
            return mid
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _nearest_root(a1, a2, m, direction):
    """Nearest root of g from ``m`` walking in ``direction`` (+1 or -1)."""
    gm = _g(m, a1, a2)
    if gm == 0.0:
        return m
    bounds = sorted({-1.0, 1.0, *_monotone_breaks(a1, a2)})
    if direction > 0:
        stops = [b for b in bounds if b > m] or [1.0]
    else:
        stops = [b for b in reversed(bounds) if b < m] or [-1.0]
    start, gstart = m, gm
    for stop in stops:
        gstop = _g(stop, a1, a2)
        if gstop == 0.0:
            return stop
        if (gstop < 0) != (gstart < 0):
            lo, hi = (start, stop) if start < stop else (stop, start)
            glo = gstart if start < stop else gstop
            return _bisect(a1, a2, lo, hi, glo)
        start, gstart = stop, gstop
    return None


def self_consistent_m(point, m0=1.0, tol=1e-12, max_iter=200, damping=0.5):
    """Fixed point reached from ``m0`` by the damped mean-field iteration.

    The damped map is monotone, so iterates approach the nearest fixed point
    in the direction of ``erf(u(m0)) - m0`` without crossing it. After at
    most ``max_iter`` steps (or on a step below ``tol``) the root is located
    exactly by bisection on the monotone piece of the residual that holds it.
    """
    if not -1.0 <= m0 <= 1.0:
        raise ValidationError(f"m0 must lie in [-1, 1], got {m0}")
    if not tol > 0:
        raise ValidationError("tol must be > 0")
    a1, a2 = float(point.a1), float(point.a2)
    g0 = _g(m0, a1, a2)
    if g0 == 0.0:
        return float(m0)
    direction = -1 if g0 > 0 else 1

    m = float(m0)
    prev = 0.0
    for _ in range(max_iter):
        step = damping * (math.erf((m + a1) / (SQRT2 * a2)) - m)
        if step * prev < 0:
            break  # oscillation; cannot happen for damping <= 1 but guard anyway
        m += step
        prev = step
        if abs(step) < tol:
            break

    root = _nearest_root(a1, a2, m, direction)
    if root is None:
        raise NumericError(f"no fixed point found from m0={m0} (a1={a1}, a2={a2}); residual {_g(m, a1, a2):.3e}")
    res = abs(_g(root, a1, a2))
    if res >= 10 * tol and res > 1e-15:
        raise NumericError(f"fixed point residual {res:.3e} exceeds tolerance (a1={a1}, a2={a2})")
    return float(root)


@dataclass(frozen=True)
class StableSolutions:
    m_minus: float
    m_plus: float
    bistable: bool
    q_minus: float
    q_plus: float

    @property
    def stable(self):
        return self.q_minus < 1 and self.q_plus < 1


def stable_solutions(point, tol=1e-12):
    """Fixed points reached from m0 = -1 and m0 = +1."""
    lo = self_consistent_m(point, -1.0, tol)
    hi = self_consistent_m(point, 1.0, tol)
    return StableSolutions(
        m_minus=lo,
        m_plus=hi,
        bistable=abs(hi - lo) > BISTABLE_GAP,
        q_minus=float(stability_q(lo, point)),
        q_plus=float(stability_q(hi, point)),
    )


def free_energy(m, point):
    """Mean-field free energy with zero additive constant."""
    m = np.asarray(m, dtype=float)
    x = m + point.a1
    u = x / (SQRT2 * point.a2)
    f = 0.5 * m * m - x * special.erf(u) - A2_CRITICAL * point.a2 * np.exp(-u * u)
    return float(f) if f.ndim == 0 else f


def free_energy_gradient(m, point):
    return residual(np.asarray(m, dtype=float), point)


# ---------------------------------------------------------------------------
# landscapes


@dataclass(frozen=True, eq=False)
class FreeEnergySlice:
    """Normalized landscapes; row ``k`` belongs to ``points[k]``."""

    m: np.ndarray
    m_d: np.ndarray
    values: np.ndarray
    minima: np.ndarray
    divisor: float
    power_norm: float
    points: tuple = ()


def normalize_slices(rows, power_norm=1.0):
    """Subtract each row's minimum, divide by the global maximum, raise to ``power_norm``.

    Returns ``(values, minima, divisor)``. A zero global height leaves zeros.
    """
    f = np.atleast_2d(np.asarray(rows, dtype=float))
    if f.size == 0:
        raise ValidationError("empty free-energy slice")
    mins = f.min(axis=1)
    shifted = f - mins[:, None]
    divisor = float(shifted.max())
    out = shifted / divisor if divisor > 0 else np.zeros_like(shifted)
    if power_norm != 1.0:
        out = out**power_norm
    return out, mins, divisor


def free_energy_slice(points, m_grid=None, power_norm=1.0):
    m = np.linspace(-1.0, 1.0, 401) if m_grid is None else np.asarray(m_grid, dtype=float)
    if m.size == 0:
        raise ValidationError("empty m grid")
    if m.min() > -1.0 or m.max() < 1.0:
        raise ValidationError("m grid must cover [-1, 1]")
    points = tuple(points)
    if not points:
        raise ValidationError("no mean-field points given")
    rows = np.vstack([free_energy(m, p) for p in points])
    values, mins, divisor = normalize_slices(rows, power_norm)
    return FreeEnergySlice(m, 0.5 * (m + 1.0), values, mins, divisor, float(power_norm), points)


# ---------------------------------------------------------------------------
# parameter maps


@dataclass(frozen=True)
class RfimParams:
    """``a1(mw) = c0 + c1 mw + c2 mw**2``, ``a2(sigma) = b0 + b1 sigma`` with b1 >= 0."""

    a1_coeffs: tuple
    a2_coeffs: tuple
    mw_range: tuple = (3.5, 8.5)
    sigma_range: tuple = (0.0, 1.0)
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "a1_coeffs", tuple(float(c) for c in self.a1_coeffs))
        object.__setattr__(self, "a2_coeffs", tuple(float(c) for c in self.a2_coeffs))
        if len(self.a1_coeffs) != 3 or len(self.a2_coeffs) != 2:
            raise ValidationError("a1 needs 3 coefficients and a2 needs 2")
        if self.a2_coeffs[1] < 0:
            raise ValidationError("a2 slope must be >= 0")

    def a1(self, mw):
        c0, c1, c2 = self.a1_coeffs
        mw = np.asarray(mw, dtype=float)
        return c0 + c1 * mw + c2 * mw * mw

    def a2(self, sigma):
        b0, b1 = self.a2_coeffs
        return b0 + b1 * np.asarray(sigma, dtype=float)

    def point(self, mw, sigma):
        return MeanFieldPoint(float(self.a1(mw)), float(self.a2(sigma)))

    def to_dict(self):
        return {
            "a1_coeffs": list(self.a1_coeffs),
            "a2_coeffs": list(self.a2_coeffs),
            "mw_range": list(self.mw_range),
            "sigma_range": list(self.sigma_range),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                tuple(d["a1_coeffs"]),
                tuple(d["a2_coeffs"]),
                tuple(d.get("mw_range", (3.5, 8.5))),
                tuple(d.get("sigma_range", (0.0, 1.0))),
                dict(d.get("diagnostics", {})),
            )
        except KeyError as exc:
            raise ValidationError(f"params lack {exc.args[0]!r}") from None

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class FitConfig:
    sigma_threshold: float = 0.6
    ridge: float = 1e-3
    slope_prior: float = 0.0
    n_starts: int = 5
    saturation: float = 1e-6


_STARTS = ((0.8, 0.0), (0.5, 0.5), (1.0, 0.3), (0.3, 1.0), (1.5, 0.1))


def fit_parameters(grid, config=FitConfig()):
    """Least-squares map from an empirical phase grid to (a1(mw), a2(sigma)).

    Cells with ``sigma > sigma_threshold`` and finite ``mdstar`` enter the
    residual ``m* - erf((m* + a1) / (sqrt(2) a2))`` with ``m* = 2 mdstar - 1``.
    A ridge term ``ridge * (slope - slope_prior)**2`` regularizes the a2
    slope, which is bounded below by zero. Deterministic multi-start; the
    lowest cost wins.
    """
    mw_mesh, sg_mesh = np.meshgrid(grid.mw, grid.sigma, indexing="ij")
    md = np.asarray(grid.mdstar, dtype=float)
    keep = (sg_mesh > config.sigma_threshold) & np.isfinite(md)
    if not keep.any():
        raise ValidationError(f"no cells with sigma > {config.sigma_threshold}")
    mw = mw_mesh[keep]
    sg = sg_mesh[keep]
    ms = np.clip(2.0 * md[keep] - 1.0, -1.0, 1.0)
    if not np.any(np.abs(ms) < 1.0 - config.saturation):
        raise ValidationError("phase grid is degenerate: no volatile (unsaturated) cells retained")

    center = 0.5 * (mw.min() + mw.max())
    scale = max(0.5 * (mw.max() - mw.min()), 1e-6)
    x = (mw - center) / scale
    design = np.column_stack([np.ones_like(x), x, x * x])
    msafe = np.clip(ms, -1 + 1e-12, 1 - 1e-12)
    erfinv_m = special.erfinv(msafe)
    lam = math.sqrt(config.ridge)

    def unpack(theta):
        return theta[:3], theta[3], theta[4]

    def resid(theta):
        p, b0, b1 = unpack(theta)
        a1 = design @ p
        a2 = b0 + b1 * sg
        r = ms - special.erf((ms + a1) / (SQRT2 * a2))
        return np.append(r, lam * (b1 - config.slope_prior))

    lower = [-np.inf, -np.inf, -np.inf, 1e-6, 0.0]
    upper = [np.inf] * 5
    best = None
    for b0, b1 in _STARTS[: config.n_starts]:
        a2_init = b0 + b1 * sg
        target = SQRT2 * a2_init * erfinv_m - ms
        p0, *_ = np.linalg.lstsq(design, target, rcond=None)
        theta0 = np.concatenate([p0, [b0, b1]])
        try:
            sol = optimize.least_squares(
                resid, theta0, bounds=(lower, upper), method="trf", x_scale="jac",
                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000,
            )
        except (ValueError, np.linalg.LinAlgError):
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None or best.status <= 0 and best.cost > 1e-20:
        cost = math.nan if best is None else float(best.cost)
        raise NumericError(f"RFIM parameter fit did not converge (best cost {cost:.3e})")

    p, b0, b1 = unpack(best.x)
    c2 = p[2] / scale**2
    c1 = p[1] / scale - 2.0 * p[2] * center / scale**2
    c0 = p[0] - p[1] * center / scale + p[2] * center**2 / scale**2
    res_norm = float(np.linalg.norm(best.fun[:-1]))
    diagnostics = {
        "residual_norm": res_norm,
        "n_cells": int(keep.sum()),
        "n_excluded": int(keep.size - keep.sum()),
        "sigma_threshold": config.sigma_threshold,
        "ridge": config.ridge,
        "optimizer_status": int(best.status),
    }
    return RfimParams(
        (c0, c1, c2),
        (float(b0), float(b1)),
        (float(grid.mw.min()), float(grid.mw.max())),
        (float(grid.sigma.min()), float(grid.sigma.max())),
        diagnostics,
    )


# ---------------------------------------------------------------------------
# critical points and phase diagram


@dataclass(frozen=True)
class CriticalPoints:
    """``None`` marks a critical value outside the fitted range."""

    mw_c: float | None
    sigma_c: float | None

    @property
    def mw_status(self):
        return "ok" if self.mw_c is not None else "out_of_range"

    @property
    def sigma_status(self):
        return "ok" if self.sigma_c is not None else "out_of_range"


def critical_points(params, mw_range=None, sigma_range=None):
    """Smallest root of a1 in the magnitude range and the sigma where a2 = sqrt(2/pi)."""
    lo, hi = mw_range or params.mw_range
    slo, shi = sigma_range or params.sigma_range
    c0, c1, c2 = params.a1_coeffs
    if c2 != 0.0:
        roots = np.roots([c2, c1, c0])
        roots = sorted(float(r.real) for r in roots if abs(r.imag) <= 1e-12 * max(1.0, abs(r.real)))
    elif c1 != 0.0:
        roots = [-c0 / c1]
    else:
        roots = []
    tol = 1e-12
    in_range = [r for r in roots if lo - tol <= r <= hi + tol]
    mw_c = in_range[0] if in_range else None

    b0, b1 = params.a2_coeffs
    sigma_c = None
    if b1 > 0:
        s = (A2_CRITICAL - b0) / b1
        if slo - tol <= s <= shi + tol:
            sigma_c = float(s)
    elif b0 == A2_CRITICAL:
        sigma_c = float(slo)
    return CriticalPoints(mw_c, sigma_c)


def select_equilibrium(point, sols=None):
    """Equilibrium magnetization: lower free energy when bistable, ties to the lower root."""
    sols = sols or stable_solutions(point)
    if not sols.bistable:
        return sols.m_plus
    f_lo = free_energy(sols.m_minus, point)
    f_hi = free_energy(sols.m_plus, point)
    # differences at rounding level count as ties
    tie = abs(f_hi - f_lo) <= TIE_RTOL * max(1.0, abs(f_lo))
    return sols.m_minus if tie or f_lo < f_hi else sols.m_plus


def rfim_phase_diagram(params, mw_values, sigma_values):
    """Solve the mean-field model on every grid cell (``source='rfim'``)."""
    mw_values = np.asarray(mw_values, dtype=float)
    sigma_values = np.asarray(sigma_values, dtype=float)
    md = np.empty((mw_values.size, sigma_values.size))
    bi = np.zeros_like(md, dtype=bool)
    for i, mw in enumerate(mw_values):
        for j, sg in enumerate(sigma_values):
            try:
                point = params.point(mw, sg)
                sols = stable_solutions(point)
                m = select_equilibrium(point, sols)
            except (NumericError, ValidationError) as exc:
                raise NumericError(f"cell (mw={mw}, sigma={sg}): {exc}") from exc
            md[i, j] = 0.5 * (m + 1.0)
            bi[i, j] = sols.bistable
    return PhaseGrid(mw_values, sigma_values, md, bi, "rfim", 0.0)


@dataclass(frozen=True)
class MeanFieldSusceptibility:
    chi_linear: float
    chi_curvature: float
    q: float


def mean_field_susceptibility(point, m_star):
    """Linear-response ``q/(1-q)`` and inverse-curvature ``1/(1-q)`` susceptibilities.

    Both are ``inf`` when ``q >= 1``.
    """
    q = float(stability_q(m_star, point))
    if q >= 1.0:
        return MeanFieldSusceptibility(DIVERGENT, DIVERGENT, q)
    return MeanFieldSusceptibility(q / (1.0 - q), 1.0 / (1.0 - q), q)
