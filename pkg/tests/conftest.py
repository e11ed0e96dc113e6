import dataclasses

import numpy as np
import pytest

from mcti.backend import ToyBackend
from mcti.core import FewShotDataset, TrainConfig
from mcti.features import build_feature_cache
from mcti.synthetic import SyntheticSpec, make_synthetic


@pytest.fixture
def backend():
    return ToyBackend()


@pytest.fixture(scope="session")
def synthetic():
    be = ToyBackend()
    return be, make_synthetic(be, SyntheticSpec(K=3, n_train=6, n_test=6, seed=3))


@pytest.fixture
def small_split(synthetic):
    """K=3, N=4 split with its feature cache, on a fresh backend."""
    _, data = synthetic
    be = ToyBackend()
    ds = FewShotDataset(K=3, N=4, samples={k: tuple(v[:4]) for k, v in data.train.items()},
                        dataset_id="small")
    return be, ds, build_feature_cache(ds, be)


@pytest.fixture
def fast_config():
    return TrainConfig(warmup_steps=20, mcti_steps=10, rng_seed=7)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
