"""Shared test helpers: a finite-difference gradient oracle and the
acceptance-summary reporting hook."""
import numpy as np
import pytest


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x, one entry at a
    time. Independent of the autodiff engine on purpose."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


class AcceptanceReport:
    """Collects one line per acceptance criterion for the terminal summary."""

    def __init__(self, lines):
        self._lines = lines

    def add(self, number, name, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        suffix = f" — {detail}" if detail else ""
        line = f"ACCEPTANCE {number} ({name}): {status}{suffix}"
        self._lines.append(line)
        print(line)


@pytest.fixture(scope="session")
def acceptance(request):
    lines = request.config._acceptance_lines = []
    return AcceptanceReport(lines)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
