import numpy as np
import pytest

from osdkit import _fallback

try:
    from osdkit import _kernels
except ImportError:
    _kernels = None

KERNEL_BACKENDS = [pytest.param(_fallback, id="python")]
if _kernels is not None:
    KERNEL_BACKENDS.append(pytest.param(_kernels, id="cython"))


@pytest.fixture(params=KERNEL_BACKENDS)
def kernels(request):
    """Each available kernel implementation in turn."""
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one status line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
