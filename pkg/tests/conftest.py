import numpy as np
import pytest

from deconfound.model import build_instance


@pytest.fixture
def small_config():
    """Two arms, three one-hot contexts, fixed truth."""
    return {
        "k": 2,
        "contexts": np.eye(3).tolist(),
        "population": {"weights": [0.5, 0.3, 0.2]},
        "prior": {"mode": "independent-arms", "means": 0.0, "covariance": 1.0},
        "sigma2": 1.0,
        "truth": {"theta": [1.0, 0.0, -1.0, 0.2, 0.3, 0.1]},
    }


@pytest.fixture
def small_instance(small_config):
    return build_instance(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record a criterion outcome and print one PASS/FAIL line immediately."""

    def report(criterion, passed, detail):
        line = f"[{criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s[1:s.index("]")])):
            terminalreporter.write_line(line)
