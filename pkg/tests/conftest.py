from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from mfdefault.model import DefaultSpec

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


def flat(c):
    return lambda t: c + 0.0 * np.asarray(t, dtype=float)


@pytest.fixture
def two_defaults():
    return DefaultSpec(1.0, (flat(0.5), flat(0.5)), 1.0)


@pytest.fixture
def one_default():
    return DefaultSpec(1.0, (flat(0.5),), 1.0)


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def section5_config():
    from mfdefault.cli import parse_config
    return parse_config(CONFIGS / "logutil.yaml")


def section5_problem():
    return section5_config().built["logutil"]
