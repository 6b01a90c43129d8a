import numpy as np
import pytest

from wirlab.codec import CodecConfig, make_linear_codec
from wirlab.harness.data import DatasetSpec, synth_dataset
from wirlab.training import TrainConfig, train


@pytest.fixture(scope="session")
def small_corpus():
    return synth_dataset(DatasetSpec(side=16, count=1000, seed=7))


@pytest.fixture(scope="session")
def trained(small_corpus):
    """A clean 16x16, 8-bit codec trained long enough to decode reliably."""
    params, report = train(TrainConfig(batch_size=8, phase1_epochs=15, lr=3e-3, seed=3),
                           small_corpus.train, CodecConfig(side=16, n_bits=8, seed=3),
                           small_corpus.val)
    return params, report


@pytest.fixture
def linear_codec():
    return make_linear_codec(8, (8, 8, 1), amplitude=0.02, seed=0)


@pytest.fixture
def mid_gray():
    rng = np.random.default_rng(11)
    return rng.uniform(0.4, 0.6, (8, 8, 1))


# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
