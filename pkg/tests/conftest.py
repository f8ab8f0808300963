import numpy as np
import pytest

from pillars3d.voxelizer import SceneConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene():
    """A 64 x 64 x 16 grid: small enough for full forward passes in tests."""
    return SceneConfig(range_x=(0.0, 10.24), range_y=(-5.12, 5.12), range_z=(-3.0, 1.0))


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
