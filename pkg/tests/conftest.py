import numpy as np
import pytest

from cascade_pose.synth import generate


@pytest.fixture(scope="session")
def small_ds():
    """16 supports, 6 targets; seed 0."""
    return generate(0, 16, 6)


@pytest.fixture(scope="session")
def ds32():
    """32 supports, 8 targets; seed 5."""
    return generate(5, 32, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured_image(rng, h=64, w=64):
    """Smooth random colour texture in [0, 1]."""
    from scipy import ndimage

    img = ndimage.gaussian_filter(rng.random((h, w, 3)), (2, 2, 0))
    img -= img.min()
    return img / img.max()


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip(":ab")), s)):
            terminalreporter.write_line(line)
