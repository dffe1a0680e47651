"""
Pytest configuration for nutriscreen tests.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Import the package from the checkout without installing it
ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from nutriscreen.data_model import Dataset  # noqa: E402
from nutriscreen.synth import planted_dataset  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_addoption(parser):
    """Add command line options for acceptance-scale tests."""
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="Run acceptance-scale simulations (minutes)",
    )


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line(
        "markers", "slow: acceptance-scale simulations, run with --runslow"
    )


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless --runslow is given."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def survey_csv():
    """Path of the small raw survey extract."""
    return FIXTURES / "survey_sample.csv"


@pytest.fixture
def planted():
    """Two informative columns followed by three noise columns."""
    return planted_dataset(n=400, n_informative=2, n_noise=3, coef=2.0, seed=3)


@pytest.fixture
def separable():
    """Linearly separable toy data in two dimensions."""
    rng = np.random.default_rng(0)
    pos = rng.normal(loc=2.0, scale=0.5, size=(60, 2))
    neg = rng.normal(loc=-2.0, scale=0.5, size=(60, 2))
    features = np.vstack([pos, neg])
    labels = np.array([1] * 60 + [0] * 60)
    return Dataset(features, labels, ("x0", "x1"))
