"""Shared fixtures and the acceptance-criteria summary hook."""

import numpy as np
import pytest

from virlab.models import Arch, Classifier

# test_acceptance.py appends "criterion N [...]: PASS/FAIL" lines here; they
# are echoed after the run so the verdict survives output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_mlp(layers, seed=0) -> Classifier:
    return Classifier(Arch(tuple(layers)), seed=seed)


def random_batch(rng, n, d, num_classes):
    x = rng.standard_normal((n, d))
    y = rng.integers(0, num_classes, size=n)
    return x, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
