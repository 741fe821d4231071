import math

import numpy as np
import pytest

from maxmargin.relevance import snk


def closed_form_simplex(k):
    """(positive, negative) inner products of the simplex baseline, by hand."""
    c = (4 * k) ** -0.5
    return (1 - c) / math.sqrt(k) - c, -c


def dense_scores(E):
    """Independent dense scan: every query against every document."""
    U = np.array([E.query(j) for j in range(E.N)])
    return U @ np.asarray(E.V).T, E.matrix.dense().astype(bool)


@pytest.fixture
def snk_10_2():
    return snk(10, 2)


ACCEPTANCE_LINES = []


def record(label, ok, detail=""):
    """Print and keep a one-line verdict for the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
