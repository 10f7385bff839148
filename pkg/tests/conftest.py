import os
import sys

# One BLAS thread keeps training trajectories bit-reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from nipfan import autodiff as ad


@pytest.fixture
def f64():
    """Run the test body with float64 as the default tensor dtype."""
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two small synthetic raw samples cut from bundled photographs."""
    from nipfan.io import builtin_sources
    from nipfan.raw import synth_dataset
    return synth_dataset(builtin_sources("train")[:2], seed=0, count=4, patch=96)


@pytest.fixture(scope="session")
def builtin_train():
    from nipfan.io import load_samples
    return load_samples("builtin:train")


@pytest.fixture(scope="session")
def builtin_val():
    from nipfan.io import load_samples
    return load_samples("builtin:val")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
