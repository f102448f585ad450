import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from backend.core.ingest import WindowConfig, build_dataset  # noqa: E402
from backend.core.procgen import TimeSeries  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size reproduction checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    """Noisy AR(1) series windowed at n=6, m=3."""
    gen = np.random.default_rng(7)
    s = np.zeros(400)
    for t in range(1, s.size):
        s[t] = 0.8 * s[t - 1] + 0.3 * gen.standard_normal()
    return build_dataset(TimeSeries(s, name="ar1"), WindowConfig(past_len=6, horizon=3))
