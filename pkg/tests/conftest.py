"""Independent brute-force oracles shared by the test modules.

These are written with explicit loops over states and units and avoid the
library's vectorized kernels on purpose.
"""

import itertools
import math

import numpy as np
import pytest

from trajrbm.core import Convention


def states(n, convention):
    low = 0 if Convention.parse(convention) is Convention.ZERO_ONE else -1
    return [np.array(s, dtype=float) for s in itertools.product((low, 1), repeat=n)]


def loop_energy(model, v, h):
    total = 0.0
    for a in range(model.num_hidden):
        for i in range(model.num_visible):
            total -= h[a] * model.weights[a, i] * v[i]
    for i in range(model.num_visible):
        total -= model.visible_bias[i] * v[i]
    for a in range(model.num_hidden):
        total -= model.hidden_bias[a] * h[a]
    return total


def joint_table(model):
    """List of (v, h, unnormalized weight) over all joint states."""
    vs = states(model.num_visible, model.convention)
    hs = states(model.num_hidden, model.convention)
    return [(v, h, math.exp(-loop_energy(model, v, h))) for v in vs for h in hs]


def brute_log_z(model):
    return math.log(sum(w for _, _, w in joint_table(model)))


def brute_visible_law(model):
    """dict tuple(v) -> p(v)."""
    table = joint_table(model)
    z = sum(w for _, _, w in table)
    law = {}
    for v, _, w in table:
        law[tuple(v)] = law.get(tuple(v), 0.0) + w / z
    return law


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
