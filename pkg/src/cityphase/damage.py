"""Damage rules and cost aggregation.

Zero temperature: a building is damaged iff demand strictly exceeds
capacity. Finite temperature replaces the step with a logistic in the
safety margin ``M = C - D``: ``P(damage) = 1 / (1 + exp(M / T))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _seeding
from .errors import ValidationError

DEFAULT_COST_RATIO = 0.2
MARGIN_DOMAINS = ("linear", "log")


@dataclass(frozen=True, eq=False)
class DamageRealization:
    indicators: np.ndarray
    spins: np.ndarray
    m_d: float
    cost_fraction: float = float("nan")


@dataclass(frozen=True)
class Temperature:
    t: float = 0.0

    def __post_init__(self):
        if not self.t >= 0:
            raise ValidationError(f"temperature must be >= 0, got {self.t}")


def _as_t(temperature):
    t = temperature.t if isinstance(temperature, Temperature) else float(temperature)
    if not t >= 0:
        raise ValidationError(f"temperature must be >= 0, got {t}")
    return t


def _check_pair(capacities, demands):
    c = np.asarray(capacities, dtype=float)
    d = np.asarray(demands, dtype=float)
    if c.shape != d.shape:
        raise ValidationError(f"capacity/demand shape mismatch: {c.shape} vs {d.shape}")
    if not (np.all(c > 0) and np.all(d > 0)):
        raise ValidationError("capacities and demands must be > 0")
    return c, d


def damage_indicators(capacities, demands, t=0.0, rng=None, margin_domain="linear"):
    """Vectorized damage indicators (bool) for matching capacity/demand arrays (g).

    At ``t == 0`` the strict rule ``D > C`` is applied and ``rng`` is not
    touched. At ``t > 0`` one uniform draw per entry is consumed.
    """
    c, d = _check_pair(capacities, demands)
    if t == 0:
        return d > c
    if margin_domain == "linear":
        margin = c - d
    elif margin_domain == "log":
        margin = np.log(c) - np.log(d)
    else:
        raise ValidationError(f"unknown margin domain {margin_domain!r}")
    p = special.expit(-margin / t)
    return rng.random(c.shape) < p


def _realization(ind, costs, cost_ratio):
    ind = np.asarray(ind, dtype=np.uint8)
    spins = (2 * ind.astype(np.int8) - 1).astype(np.int8)
    m_d = float(ind.mean()) if ind.size else float("nan")
    r = float("nan") if costs is None else repair_cost_fraction(ind, costs, cost_ratio)
    return DamageRealization(ind, spins, m_d, r)


def evaluate_damage_zero_t(capacities, demands, replacement_costs=None, cost_ratio=DEFAULT_COST_RATIO):
    """Binary damage ``I_i = 1{D_i > C_i}``; ties count as safe."""
    return _realization(damage_indicators(capacities, demands), replacement_costs, cost_ratio)


def evaluate_damage_finite_t(
    capacities,
    demands,
    temperature,
    seed,
    replacement_costs=None,
    cost_ratio=DEFAULT_COST_RATIO,
    margin_domain="linear",
):
    """Logistic damage rule; identical to the zero-temperature rule at ``t == 0``."""
    t = _as_t(temperature)
    rng = _seeding.rng_from(seed, _seeding.TAG_DAMAGE)
    ind = damage_indicators(capacities, demands, t, rng, margin_domain)
    return _realization(ind, replacement_costs, cost_ratio)


def repair_cost_fraction(indicators, replacement_costs, cost_ratio=DEFAULT_COST_RATIO):
    """``cost_ratio * sum(cost * I) / sum(cost)``; accepts a batch of indicator rows."""
    if not 0 < cost_ratio <= 1:
        raise ValidationError(f"cost_ratio must lie in (0, 1], got {cost_ratio}")
    costs = np.asarray(replacement_costs, dtype=float)
    total = costs.sum()
    if not total > 0:
        raise ValidationError("replacement costs sum to zero")
    ind = np.asarray(indicators, dtype=float)
    r = cost_ratio * (ind @ costs) / total
    return float(r) if np.ndim(r) == 0 else r
