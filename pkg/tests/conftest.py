import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cityphase.ensemble import HazardConfig
from cityphase.hazard import CorrelationModel, Scenario, default_gmpe
from cityphase.inventory import (
    CapacityCorrelationModel,
    ClassSpec,
    SyntheticPortfolioSpec,
    build_capacity_correlation,
    generate_synthetic_portfolio,
)

# homogeneous city 20-21 km north of the epicenter; demand range far beyond its size
SYNC_SPEC = SyntheticPortfolioSpec(
    n_buildings=200,
    bbox=(0.0, 20.0, 1.0, 21.0),
    classes=(ClassSpec(mu_mean=math.log(0.1), beta=0.07),),
)
SYNC_MW = 6.5


def make_hazard(range_km=1000.0, tau=0.2, phi=0.2):
    gmpe, _ = default_gmpe()
    return HazardConfig(
        Scenario(6.0, (0.0, 0.0), strike=90.0, ztor=3.0),
        gmpe.with_dispersion(tau, phi),
        correlation=CorrelationModel(range_km),
    )


@pytest.fixture(scope="session")
def sync_portfolio():
    return generate_synthetic_portfolio(SYNC_SPEC, 1)


@pytest.fixture(scope="session")
def sync_hazard():
    return make_hazard()


def two_class_portfolio():
    spec = SyntheticPortfolioSpec(
        n_buildings=200,
        bbox=(0.0, 20.0, 1.0, 21.0),
        classes=(
            ClassSpec("A", mu_mean=math.log(0.1), mu_std=0.8, beta=0.3),
            ClassSpec("B", mu_mean=math.log(0.14), mu_std=0.8, beta=0.3),
        ),
    )
    pf = generate_synthetic_portfolio(spec, 1)
    return build_capacity_correlation(pf, CapacityCorrelationModel(0.9, 100.0))


@pytest.fixture(scope="session")
def two_class():
    return two_class_portfolio()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


SMOKE_TOML = """\
seed = 7
critical_mw = [6.5]

[portfolio.synthetic]
n_buildings = 200
bbox = [0.0, 20.0, 1.0, 21.0]

[[portfolio.synthetic.classes]]
median_g = 0.1
beta = 0.07

[scenario]
epicenter = [0.0, 0.0]
strike = 90.0

[gmpe]
tau = 0.2
phi = 0.2

[correlation]
range_km = 1000.0

[grid]
mw = [6.0, 7.0, 0.5]
sigma = [0.0, 1.0, 0.5]
n_realizations = 200

[diagnostics]
retain_spins = true
mw = 6.5
sigmas = [0.0, 0.5]
n_replicas = 3
n_realizations = 200

[cost]
mw = [6.5]
n_realizations = 300
"""


def write_config(directory, text=SMOKE_TOML, name="run.toml"):
    path = directory / name
    path.write_text(text)
    return path
