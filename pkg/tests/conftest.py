import numpy as np
import pytest

from detguard.detectors import PerfectCleanDetector
from detguard.local_model import train_local_model
from detguard.pipeline import RunConfig, Suite
from detguard.synthdata import SceneSpec, generate_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def _suite(n_train: int, n_eval: int) -> Suite:
    cfg = RunConfig()
    train = generate_dataset(SceneSpec(n_images=n_train, seed=1))
    model = train_local_model(train.items(), train.n_classes, cfg.r, cfg.s, cfg.learning_rate, cfg.epochs,
                              cfg.seed, cfg.n_proj)
    data = generate_dataset(SceneSpec(n_images=n_eval, seed=0))
    return Suite(data, model, PerfectCleanDetector(data.annotations), cfg)


@pytest.fixture(scope="session")
def small_suite() -> Suite:
    """A trained model with a dozen evaluation scenes, for quick end-to-end checks."""
    return _suite(40, 12)


@pytest.fixture(scope="session")
def desk_suite() -> Suite:
    """The default desk-scale suite: 120 training scenes, 200 evaluation scenes."""
    return _suite(120, 200)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
