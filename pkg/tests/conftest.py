import importlib.util
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from curesem.distributions import RngStream
from curesem.model import CureData, Params
from curesem.simulation import Scenario, generate_dataset, solve_censoring_rates

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def _has(*mods):
    return all(importlib.util.find_spec(m) is not None for m in mods)


@pytest.fixture(scope="session")
def breast_csv(tmp_path_factory):
    """686-row breast cancer CSV rebuilt by ``scripts/make_breast_csv.py``."""
    if not _has("lifelines", "statsmodels", "pandas"):
        pytest.skip("breast cancer fixture needs lifelines, statsmodels and pandas")
    out = tmp_path_factory.mktemp("breast") / "breast.csv"
    subprocess.run(
        [sys.executable, str(ROOT / "scripts" / "make_breast_csv.py"), "--out", str(out)],
        check=True,
        capture_output=True,
    )
    return out


@pytest.fixture(scope="session")
def breast_data(breast_csv):
    from curesem.cli import read_dataset

    return read_dataset(breast_csv)


@pytest.fixture(scope="session")
def high_scenario():
    return Scenario.from_json(SCENARIOS / "high_phi3_n200.json")


@pytest.fixture(scope="session")
def sim_data(high_scenario):
    """One n=200 high-cure dataset together with its generating parameters."""
    truth = high_scenario.true_params()
    xi = solve_censoring_rates(high_scenario)
    data = generate_dataset(high_scenario, truth, xi, RngStream(11, 0))
    return data, truth


def _small_data(rng, n=30, groups=3):
    g = np.repeat(np.arange(1, groups + 1), n // groups).astype(float)
    x = np.column_stack([np.ones_like(g), g])
    t = rng.exponential(size=g.size) + 0.05
    delta = (rng.uniform(size=g.size) < 0.6).astype(int)
    return CureData(t, delta, x, x.copy())


@pytest.fixture
def toy_params():
    return Params(phi=2.0, alpha=[-0.5, 0.2], beta=[0.1, 0.3], gamma1=0.5)


@pytest.fixture
def make_small():
    """Factory for tiny two-covariate samples used by the cheap property tests."""
    return _small_data


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def emit(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
