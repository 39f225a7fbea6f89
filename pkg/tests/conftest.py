import numpy as np
import pytest
from hypothesis import settings

from quasistatic.phase import ArraySpec, CircleMap, CurvePiece, MapCurve, PolyPath, linear_curve

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def doubling():
    return CircleMap.doubling()


@pytest.fixture(scope="session")
def doubling_spec(doubling):
    return ArraySpec(MapCurve.constant(doubling))


@pytest.fixture(scope="session")
def smooth_curve():
    return linear_curve(0.1, holder_exponent=1.0)


@pytest.fixture(scope="session")
def sine_map():
    return CircleMap(2, (1,), (0.1,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def jump_curve():
    """Degree 2 with eps = 0.1 t on [0, 1/2), degree 3 with eps = 0.15 - 0.1 t on [1/2, 1]."""
    return MapCurve((CurvePiece(0.0, 0.5, 2, (1,), (PolyPath((0.0, 0.1)),)),
                     CurvePiece(0.5, 1.0, 3, (1,), (PolyPath((0.15, -0.1)),))), 1.0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
