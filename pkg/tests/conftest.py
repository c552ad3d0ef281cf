import sys
from pathlib import Path

import numpy as np
import pytest

from qsdlab import config as cfgmod
from qsdlab.protocols import AspirationUniform, hawk_dove, rock_paper_scissors

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def hd():
    """Hawk-Dove (v=2, c=4) with uniform aspirations, s = 0.5."""
    return AspirationUniform(hawk_dove())


@pytest.fixture(scope="session")
def grps():
    return AspirationUniform(rock_paper_scissors())


@pytest.fixture(scope="session")
def two_sink():
    """d = 2 field with sinks at x1 = 1/4, 3/4 and a repeller at 1/2."""
    return cfgmod.build_protocol(cfgmod.load(CONFIGS / "twosink.toml"))


def interior_points(d, n, seed, low=0.02):
    """Random points of the open simplex with every coordinate above ``low``."""
    rng = np.random.default_rng(seed)
    x = rng.dirichlet(np.ones(d), size=8 * n)
    x = x[x.min(axis=1) > low][:n]
    assert len(x) == n
    return x


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
