import numpy as np
import pytest

import jcehb  # noqa: F401  (switches JAX to double precision)
from jcehb.channel import ChannelParams, SystemDims, make_sampler
from jcehb.numerics import crandn, make_rng


@pytest.fixture
def desk():
    return SystemDims.desk()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def sampler(desk):
    return make_sampler(desk, ChannelParams())


def random_complex(rng, shape):
    return crandn(rng, shape)


def relerr(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one acceptance line."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
