import os
import sys
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

# single-threaded BLAS keeps every run bit-reproducible
_limits = threadpool_limits(limits=1)

SMALL_CONFIG = dict(epochs=20, finetune_scenes=40, finetune_epochs=6, finetune_rounds=2)

ACCEPTANCE_LINES = []
TIMINGS = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_model_path(tmp_path_factory):
    """The default pipeline, trained once per session (about two minutes).

    Set RINN_TEST_MODEL to a model file to reuse an earlier run.
    """
    from rinn.network import save_model
    from rinn.training import TrainConfig, train_pipeline

    cached = os.environ.get("RINN_TEST_MODEL")
    if cached and os.path.exists(cached):
        return cached
    t0 = time.perf_counter()
    model, _ = train_pipeline(TrainConfig())
    TIMINGS["train"] = time.perf_counter() - t0
    path = str(tmp_path_factory.mktemp("model") / "model.rinn")
    save_model(model, path)
    return path


@pytest.fixture(scope="session")
def trained_model(trained_model_path):
    from rinn.network import load_model

    return load_model(trained_model_path)


@pytest.fixture(scope="session")
def small_model():
    """A few-second pipeline run, good enough for plumbing tests."""
    from rinn.training import TrainConfig, train_pipeline

    model, _ = train_pipeline(TrainConfig(**SMALL_CONFIG))
    return model
