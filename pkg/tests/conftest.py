from __future__ import annotations

import pytest

from betamix.estimator import fit
from betamix.simulate import SimDesign, iqvt_truth, simulate

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def iqvt_data():
    data, effects = simulate(SimDesign("iqvt", seed=1))
    return data


@pytest.fixture(scope="session")
def iqvt_effects():
    return simulate(SimDesign("iqvt", seed=1))[1]


@pytest.fixture(scope="session")
def iqvt_fit(iqvt_data):
    spec, _ = iqvt_truth(4)
    return fit(iqvt_data, spec)
