"""Scenario earthquakes, GMPE evaluation and spatially correlated demand.

Demands are PGA in g. For one realization the ln-demand at site ``i`` is::

    ln D_i = ln_median_i + eta + eps_i

with ``eta ~ N(0, tau**2)`` shared by every site (inter-event residual) and
``eps ~ N(0, phi**2 * rho)`` spatially correlated (intra-event residual),
``rho_ij = exp(-3 h_ij / range_km)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from threading import Lock

import numpy as np

from . import _seeding
from ._linalg import factorize, pairwise_distances, repair_psd
from .errors import ConfigError, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class Scenario:
    """Single strike-slip rupture; ``epicenter`` is planar km in the portfolio frame."""

    mw: float
    epicenter: tuple = (0.0, 0.0)
    strike: float = 325.0
    dip: float = 90.0
    rake: float = 180.0
    ztor: float = 3.0

    def __post_init__(self):
        if not 3.0 <= self.mw <= 9.0:
            raise ValidationError(f"mw must lie in [3, 9], got {self.mw}")
        if not 0.0 < self.dip <= 90.0:
            raise ValidationError(f"dip must lie in (0, 90], got {self.dip}")
        if not self.ztor >= 0:
            raise ValidationError(f"ztor must be >= 0, got {self.ztor}")

    def at_magnitude(self, mw):
        return replace(self, mw=float(mw))


@dataclass(frozen=True)
class ScalingRelation:
    """log10 rupture length and width regressions on magnitude."""

    a_length: float = -2.57
    b_length: float = 0.62
    a_width: float = -0.76
    b_width: float = 0.27
    seismogenic_depth: float = 15.0
    cap_width: bool = True


@dataclass(frozen=True)
class RuptureGeometry:
    length: float
    width: float
    trace_start: tuple
    trace_end: tuple


def rupture_geometry(scenario, scaling=ScalingRelation()):
    """Rupture dimensions and surface trace centred on the epicenter."""
    length = 10.0 ** (scaling.a_length + scaling.b_length * scenario.mw)
    width = 10.0 ** (scaling.a_width + scaling.b_width * scenario.mw)
    if scaling.cap_width:
        cap = (scaling.seismogenic_depth - scenario.ztor) / math.sin(math.radians(scenario.dip))
        if cap > 0:
            width = min(width, cap)
    # strike is clockwise from north; x east, y north
    s = math.radians(scenario.strike)
    ux, uy = math.sin(s), math.cos(s)
    ex, ey = scenario.epicenter
    half = 0.5 * length
    return RuptureGeometry(
        length=length,
        width=width,
        trace_start=(ex - half * ux, ey - half * uy),
        trace_end=(ex + half * ux, ey + half * uy),
    )


def joyner_boore_distance(rupture, sites):
    """Horizontal distance from each site to the surface trace (km)."""
    p = np.asarray(sites, dtype=float).reshape(-1, 2)
    a = np.asarray(rupture.trace_start, dtype=float)
    b = np.asarray(rupture.trace_end, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(p)) if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.sqrt(((p - closest) ** 2).sum(axis=1))


def source_to_site_distance(rupture, scenario, sites):
    """Rupture distance ``sqrt(R_jb**2 + ztor**2)`` for each site (km)."""
    rjb = joyner_boore_distance(rupture, sites)
    r = np.sqrt(rjb**2 + scenario.ztor**2)
    return float(r[0]) if np.ndim(sites) == 1 else r


# ---------------------------------------------------------------------------
# ground-motion models


def _default_form(c, mw, r_rup, vs30):
    dm = mw - 6.0
    return (
        c["c0"]
        + c["c1"] * dm
        + c["c2"] * dm * dm
        - c["c3"] * np.log(r_rup + c["c4"] * np.exp(c["c5"] * mw))
        + c["c6"] * np.log(vs30 / 760.0)
    )


# form name -> (required coefficients, ln-median function)
GMPE_FORMS = {
    "default": (("c0", "c1", "c2", "c3", "c4", "c5", "c6"), _default_form),
}


def register_gmpe_form(name, required, func):
    """Register an alternate functional form ``func(coeffs, mw, r_rup, vs30)``."""
    GMPE_FORMS[name] = (tuple(required), func)


@dataclass(frozen=True)
class GmpeModel:
    form: str
    coeffs: dict = field(hash=False)
    tau: float
    phi: float

    def __post_init__(self):
        if self.form not in GMPE_FORMS:
            raise ConfigError(f"unknown GMPE form {self.form!r}")
        required, _ = GMPE_FORMS[self.form]
        for name in required:
            if name not in self.coeffs:
                raise ConfigError(f"GMPE coefficient {name!r} is missing")
        if self.tau < 0 or self.phi < 0 or self.tau**2 + self.phi**2 <= 0:
            if not (self.tau == 0 and self.phi == 0):
                raise ConfigError(f"invalid dispersion tau={self.tau}, phi={self.phi}")

    def with_dispersion(self, tau, phi):
        return replace(self, tau=float(tau), phi=float(phi))


def gmpe_evaluate(gmpe, mw, r_rup, vs30):
    """Return ``(ln_median, tau, phi)``; ``ln_median`` broadcasts over sites."""
    r = np.asarray(r_rup, dtype=float)
    v = np.asarray(vs30, dtype=float)
    if np.any(r < 0):
        raise ValidationError("r_rup must be >= 0")
    if np.any(~(v > 0)):
        raise ValidationError("vs30 must be > 0")
    _, func = GMPE_FORMS[gmpe.form]
    ln_med = func(gmpe.coeffs, float(mw), r, v)
    if np.ndim(ln_med) == 0:
        ln_med = float(ln_med)
    return ln_med, gmpe.tau, gmpe.phi


def _gmpe_from_mapping(data, source):
    try:
        g = dict(data["gmpe"])
    except KeyError:
        raise ConfigError(f"{source}: missing [gmpe] table") from None
    form = g.pop("form", "default")
    for key in ("tau", "phi"):
        if key not in g:
            raise ConfigError(f"{source}: GMPE coefficient {key!r} is missing")
    tau = float(g.pop("tau"))
    phi = float(g.pop("phi"))
    coeffs = {k: float(v) for k, v in g.items()}
    model = GmpeModel(form, coeffs, tau, phi)
    s = data.get("scaling", {})
    try:
        scaling = ScalingRelation(
            a_length=float(s["aL"]),
            b_length=float(s["bL"]),
            a_width=float(s["aW"]),
            b_width=float(s["bW"]),
            seismogenic_depth=float(s.get("seismogenic_depth", 15.0)),
            cap_width=bool(s.get("cap_width", True)),
        )
    except KeyError as exc:
        raise ConfigError(f"{source}: scaling coefficient {exc.args[0]!r} is missing") from None
    return model, scaling


def load_gmpe_file(path=None):
    """Load ``(GmpeModel, ScalingRelation)`` from a TOML coefficient file.

    ``None`` or ``"default"`` selects the packaged fixture table.
    """
    if path is None or path == "default":
        text = resources.files("cityphase.data").joinpath("gmpe_default.toml").read_text()
        return _gmpe_from_mapping(tomllib.loads(text), "gmpe_default.toml")
    with open(path, "rb") as fh:
        return _gmpe_from_mapping(tomllib.load(fh), str(path))


def default_gmpe():
    return load_gmpe_file(None)


# ---------------------------------------------------------------------------
# spatial correlation and sampling


@dataclass(frozen=True)
class CorrelationModel:
    range_km: float = 8.5
    kernel: str = "exponential"

    def __post_init__(self):
        if not self.range_km > 0:
            raise ValidationError(f"range_km must be > 0, got {self.range_km}")
        if self.kernel != "exponential":
            raise ValidationError(f"unsupported kernel {self.kernel!r}")


def demand_correlation_matrix(sites, model):
    h = pairwise_distances(sites)
    rho = np.exp(-3.0 * h / model.range_km)
    np.fill_diagonal(rho, 1.0)
    return rho


_factor_cache = {}
_factor_lock = Lock()


def demand_factor(sites, model):
    """Cached Cholesky factor of the repaired intra-event correlation."""
    xy = np.ascontiguousarray(np.asarray(sites, dtype=float).reshape(-1, 2))
    key = (hashlib.blake2b(xy.tobytes(), digest_size=16).hexdigest(), xy.shape, model)
    hit = _factor_cache.get(key)
    if hit is not None:
        return hit
    factor = factorize(repair_psd(demand_correlation_matrix(xy, model)))
    factor.setflags(write=False)
    with _factor_lock:
        if len(_factor_cache) > 64:
            _factor_cache.clear()
        _factor_cache.setdefault(key, factor)
    return _factor_cache[key]


def median_demand_field(scenario, portfolio, gmpe, scaling=ScalingRelation()):
    """ln-median PGA at every building for ``scenario``."""
    rupture = rupture_geometry(scenario, scaling)
    r = source_to_site_distance(rupture, scenario, portfolio.positions)
    ln_med, _, _ = gmpe_evaluate(gmpe, scenario.mw, r, portfolio.vs30)
    return np.asarray(ln_med, dtype=float)


def sample_ln_demands(ln_median, tau, phi, factor, rng, size):
    """``size`` x N ln-demand matrix around ``ln_median``."""
    n = len(ln_median)
    eta = tau * rng.standard_normal((size, 1)) if tau > 0 else np.zeros((size, 1))
    if phi > 0:
        eps = rng.standard_normal((size, n)) @ factor.T
        eps *= phi
    else:
        eps = 0.0
    return ln_median + eta + eps


def sample_demand_field(scenario, portfolio, gmpe, corr_model, seed, scaling=ScalingRelation()):
    """One ln-demand vector (ln g), deterministic given ``seed``."""
    ln_med = median_demand_field(scenario, portfolio, gmpe, scaling)
    factor = demand_factor(portfolio.positions, corr_model) if gmpe.phi > 0 else None
    rng = _seeding.rng_from(seed, _seeding.TAG_DEMAND)
    return sample_ln_demands(ln_med, gmpe.tau, gmpe.phi, factor, rng, 1)[0]
