import pytest

from difftraverse.models import (ClassifierConfig, ClassifierModel, DenoiserConfig,
                                 DenoiserModel)
from difftraverse.prompting import make_table
from difftraverse.synth import sample_dataset


@pytest.fixture(scope="session")
def table():
    return make_table(1)


@pytest.fixture(scope="session")
def small_dataset():
    return sample_dataset(120, seed=11, attr_probs={"effusion": 0.5, "device": 0.5,
                                                    "marker": 0.5, "grid": 0.5})


@pytest.fixture
def tiny_denoiser():
    return DenoiserModel.init(DenoiserConfig(hidden=(24, 16), time_dim=8, prompt_dim=8), seed=3)


@pytest.fixture
def tiny_classifier():
    return ClassifierModel.init(ClassifierConfig(hidden=(20, 12)), seed=4)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion, printed after the test session

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        terminalreporter.write_line(log[n])
