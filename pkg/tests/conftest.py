"""Shared helpers for the test suite.

fd_gradient is the independent oracle used by every gradient test: plain
central differences on float64 copies, no knowledge of the tape.
"""

import numpy as np


def fd_gradient(f, arrays, h=1e-5):
    """Central-difference gradients of a scalar function.

    f takes len(arrays) float64 ndarrays and returns a python float.
    Returns one gradient array per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


# acceptance criterion verdicts, echoed after the run summary so they stay
# visible even though pytest captures stdout
ACCEPTANCE_LINES = []


def record_acceptance(line):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
