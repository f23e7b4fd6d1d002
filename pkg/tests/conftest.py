import numpy as np
import pytest

from speechmark.audio import synth_dataset
from speechmark.keys import generate_keyset
from speechmark.optim import OptimizerConfig

# Objective weights that produce live watermarks at this desk scale; the
# published full-scale weights collapse the watermark here (see README).
WORKING_LAMBDAS = (10.0, 0.01, 1000.0)
ROBUST_LAMBDAS = (10.0, 0.01, 1.0)


@pytest.fixture(scope="session")
def dataset():
    """200 clips of 1024 samples at 16 kHz, the default desk-scale instance."""
    return synth_dataset(200, 1024, 16000, seed=42)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(80, 256, 16000, seed=9)


@pytest.fixture(scope="session")
def keyset(dataset):
    ks, results = generate_keyset(dataset, 4, seed=7)
    assert all(r.converged for r in results)
    return ks


@pytest.fixture(scope="session")
def small_keyset(small_dataset):
    ks, results = generate_keyset(small_dataset, 3, seed=13)
    assert all(r.converged for r in results)
    return ks


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture
def fast_opt():
    return OptimizerConfig(batch_size=128)
