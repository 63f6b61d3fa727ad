import numpy as np
import pytest

from cpaem.network import GenerativeNetwork, Layer, NoiseModel, random_network


def knot_net(activation: str = "relu") -> GenerativeNetwork:
    """W1 = [[1], [-1]], v1 = 0, W2 = [1, 1], v2 = 0."""
    return GenerativeNetwork((
        Layer(np.array([[1.0], [-1.0]]), np.zeros(2), activation),
        Layer(np.array([[1.0, 1.0]]), np.zeros(1)),
    ))


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@pytest.fixture
def relu_knot():
    return knot_net("relu")


@pytest.fixture
def small_net():
    return random_network([1, 5, 2], "relu", rng=3)


@pytest.fixture
def planar_net():
    return random_network([2, 5, 4, 2], "leaky_relu", eta=0.2, rng=5)


@pytest.fixture
def noise12():
    return NoiseModel(0.1 * np.eye(2), np.eye(1))


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; the lines are repeated in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title}" + (f" [{detail}]" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
