import numpy as np
import pytest

from gridlearn import grid, swingsim

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(k, ok, detail=""):
        ACCEPTANCE[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return _record


def two_node(beta=1.0, g=0.0, m=(1.0, 1.0), d=(0.0, 0.0), P=(0.0, 0.0), v=(1.0, 1.0)):
    return grid.GridNetwork(n=2, lines=((0, 1),), g=[g], b=[beta], m=list(m), d=list(d), P=list(P), v=list(v))


@pytest.fixture(scope="session")
def net68():
    return grid.bundled_68()


@pytest.fixture(scope="session")
def net8():
    return grid.synthesize_grid(8, 3.0, seed=3)


@pytest.fixture(scope="session")
def faults68(net68):
    samples, rejected = swingsim.make_fault_dataset(net68, range(68))
    return samples, rejected


@pytest.fixture(scope="session")
def faults8(net8):
    samples, rejected = swingsim.make_fault_dataset(net8, range(8))
    return samples, rejected


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
