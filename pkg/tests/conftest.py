import numpy as np
import pytest

from seqvo import _backend, autodiff, dataio


@pytest.fixture(params=sorted(_backend.available_backends()))
def backend(request, monkeypatch):
    """Run a test once per importable kernel backend."""
    mod = _backend.available_backends()[request.param]
    monkeypatch.setattr(autodiff, "kernels", mod)
    monkeypatch.setattr(dataio, "kernels", mod)
    return request.param


@pytest.fixture
def f64():
    with autodiff.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def scene7():
    return dataio.synth_scene(7, 30)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
