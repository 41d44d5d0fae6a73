import numpy as np
import pytest

from platediff.data import SyntheticSpec, generate_synthetic
from platediff.encoders import StubEncoder


@pytest.fixture(scope="session")
def stub():
    return StubEncoder()


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(seed=3)


@pytest.fixture(scope="session")
def small_samples(small_spec):
    return generate_synthetic(small_spec, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion and return the flag."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
