"""Correlated Monte Carlo damage ensembles and random-field Ising diagnostics.

Subpackages map onto the workflow: ``inventory`` (portfolios, fragility,
capacity sampling), ``hazard`` (scenario, GMPE, correlated demand),
``damage`` (damage rules and cost), ``ensemble`` (grid sweeps and phase
representations), ``rfim`` (mean-field layer), ``critstats`` (empirical
critical diagnostics) and ``cli``.
"""

from .errors import (
    CityPhaseError,
    ConfigError,
    NumericError,
    ParseError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CityPhaseError",
    "ConfigError",
    "NumericError",
    "ParseError",
    "ValidationError",
    "__version__",
]
