import numpy as np
import pytest

from mixflowlm import _kernels


@pytest.fixture(params=sorted(_kernels.AVAILABLE))
def kernels(request):
    """Each available kernel backend in turn."""
    return _kernels.AVAILABLE[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "_acceptance_lines", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1][1:].rstrip(":"))):
            terminalreporter.write_line(line)
