import functools
import time

import numpy as np
import pytest
from hypothesis import settings

from recalib.config import ExperimentConfig
from recalib.experiments import train_pipeline

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


TRAIN_SECONDS = {}


@functools.lru_cache(maxsize=None)
def trained_default(seed):
    """Default-config pipeline for ``seed``, trained once per session."""
    t0 = time.perf_counter()
    out = train_pipeline(ExperimentConfig().with_seed(seed))
    TRAIN_SECONDS[seed] = time.perf_counter() - t0
    return out


def tiny_config(**overrides):
    """A config small enough to train in about a second."""
    cfg = ExperimentConfig()
    cfg = cfg.override("run", n_train=40, n_test=12)
    cfg = cfg.override("optim", epochs=2, pretrain_epochs=3, pretrain_target=0.0, batch_size=8)
    for section, values in overrides.items():
        cfg = cfg.override(section, **values)
    return cfg.validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
