import numpy as np
import pytest

from coal import tensor as T
from coal.priors import SequenceParams, default_grammar, generate_sequence


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def small_sequence(grammar):
    """Six noiseless frames, three objects, four expressions."""
    params = SequenceParams(frames=6, objects=3, expressions=4, counterfactuals=2)
    return generate_sequence(grammar, params, np.random.default_rng(7), "seq-small")


CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Collect one verdict line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(CRITERIA, [])

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
