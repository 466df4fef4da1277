from pathlib import Path

import numpy as np
import pytest

from dampopt.caseio import parse_case, parse_scenario

CASES = Path(__file__).resolve().parents[1] / "src" / "dampopt" / "cases"

KUNDUR_DISPATCH = np.array([7.2, 1.8, 0.0, 1.5])
EIGHTMACH_DISPATCH = np.array([5.9, 1.1, 1.0, 1.0, 0.0, 0.0, 1.8, 1.5])


@pytest.fixture(scope="session")
def kundur():
    return parse_case(CASES / "kundur_2area.case")


@pytest.fixture(scope="session")
def eightmach():
    return parse_case(CASES / "eightmach_2area.case")


@pytest.fixture(scope="session")
def day_scenario_path():
    return CASES / "twoarea_day.scenario"


@pytest.fixture(scope="session")
def peak_scenario_path():
    return CASES / "twoarea_peak.scenario"


@pytest.fixture(scope="session")
def ident_scenario_path():
    return CASES / "eightmach_ident.scenario"


def short_scenario(path, n_intervals=2, **overrides):
    """Parse a scenario and truncate it for fast loop tests."""
    sc = parse_scenario(path)
    sc.horizon_s = n_intervals * sc.t1_s
    for k, v in overrides.items():
        setattr(sc, k, v)
    return sc
