import sys

import numpy as np
import pytest

from flowcast.data_model import aggregate_parties, build_zones, reconcile_electorates
from flowcast.ei_estimator import FlowTable
from flowcast.synth_oracle import DESTINATIONS, ORIGINS, REGIONAL_FLOWS, SynthSpec, simulate


@pytest.fixture(scope="session")
def table1():
    """Upper panel of the published regional table, in thousands."""
    return FlowTable.from_counts("REGION", ORIGINS, DESTINATIONS, REGIONAL_FLOWS)


@pytest.fixture(scope="session")
def small_synth():
    """A reduced synthetic dataset (6 zones) with its aggregated, reconciled zones."""
    data = simulate(SynthSpec(seed=11, zones=6, stations_per_zone=40))
    zones = [reconcile_electorates(z)
             for z in build_zones(aggregate_parties(data.records, data.aggregation))]
    return data, zones


@pytest.fixture(scope="session")
def default_synth():
    data = simulate(SynthSpec(seed=3))
    zones = [reconcile_electorates(z)
             for z in build_zones(aggregate_parties(data.records, data.aggregation))]
    return data, zones


def random_panel_counts(rng, Z, J, n=2000):
    P = rng.dirichlet(np.full(J, 3.0), size=Z)
    return np.array([rng.multinomial(n, p) for p in P], dtype=float)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
