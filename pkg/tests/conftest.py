import numpy as np
import pytest
from hypothesis import settings

from semrecon import synth
from semrecon.core import Intrinsics

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def K640():
    return Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


@pytest.fixture(scope="session")
def three_object():
    """Noise-free three-object scene, 8 frames, rendered once."""
    spec = synth.three_object_scene(frame_count=8)
    return spec, synth.render(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one acceptance line: ``verdict(n, text, ok)``."""
    def record(n, text, ok):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"
        print(line)
        _VERDICTS.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
