"""Shared fixtures: small phantom datasets and the acceptance gate recorder."""
import numpy as np
import pytest

from hipposeg.phantoms import PhantomSpec, Split, generate

# One line per acceptance criterion, replayed at the end of the run so the
# pass/fail verdicts stay visible in captured-output mode.
GATE_LINES = []


@pytest.fixture(scope="session")
def gate():
    """Record and assert one pass/fail line for an acceptance criterion."""

    def _gate(name: str, ok: bool, detail: str = "") -> None:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {name}" + (f" ({detail})" if detail else "")
        GATE_LINES.append(line)
        print(line, flush=True)
        assert ok, line

    return _gate


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in GATE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_cases():
    """Four 32^3 control phantoms; enough structure for sampler/trainer tests."""
    return generate(PhantomSpec(seed=7, shape=(32, 32, 32), cohort="control", count=4))


@pytest.fixture(scope="session")
def small_split(small_cases):
    return Split(train=list(small_cases[:2]), val=[small_cases[2]], test=[small_cases[3]])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
