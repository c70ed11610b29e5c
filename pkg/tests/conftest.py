import numpy as np
import pytest

from sharing_brrr import Dataset, GroupPartition, Hyperparameters


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_dataset(N=30, P=4, K=5, groups=(1, 1, 2, 2, 2), seed=0, signal=0.5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, P))
    Theta = signal * rng.standard_normal((P, K))
    Y = X @ Theta + rng.standard_normal((N, K))
    return Dataset(X, Y, GroupPartition(list(groups)))


@pytest.fixture
def data():
    return small_dataset()


@pytest.fixture
def hyper():
    return Hyperparameters(rank_init_1=2, rank_init_2=2)


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for the acceptance summary and return the verdict."""
    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
