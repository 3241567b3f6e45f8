import numpy as np
import pytest

from ndflow.geomio import icosphere, make_synthetic


@pytest.fixture(scope="session")
def star():
    return make_synthetic("star", {"lobes": 5, "amplitude": 0.3, "axes": (1.0, 0.9, 0.8)}, 3)


@pytest.fixture(scope="session")
def torus():
    return make_synthetic("torus", {"R": 1.0, "r": 0.4}, 2)


@pytest.fixture(scope="session")
def sphere2():
    return icosphere(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``report(n, ok, detail, extra)`` records one acceptance line and asserts ``ok``.

    ``extra`` is printed under the line in the terminal summary.
    """
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def report(n, ok, detail="", extra=None):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = (line, extra)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            line, extra = lines[n]
            terminalreporter.write_line(line)
            if extra:
                for row in extra.splitlines():
                    terminalreporter.write_line("    " + row)
