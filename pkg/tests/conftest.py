import numpy as np
import pytest

from stagewise.data import synthetic_splits
from stagewise.graph import build_model, load_model


def random_description(rng: np.random.Generator) -> str:
    """A small random CNN: conv/bn/relu stacks, residual blocks, pooling, gap, fc.

    Channel counts stay tiny so every network is well under 5k parameters.
    """
    size = int(rng.choice([4, 6, 8]))
    cin = int(rng.integers(1, 3))
    lines = [f"input {cin}x{size}x{size}"]
    c = int(rng.choice([4, 6]))
    lines.append(f"conv out={c} k=3 bn relu")
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["conv", "res", "res_down", "pool"])
        if kind == "conv":
            c = int(rng.choice([4, 6]))
            k = int(rng.choice([1, 3]))
            lines.append(f"conv out={c} k={k} bn relu")
        elif kind == "res":
            lines.append(f"block res out={c}")
        elif kind == "res_down" and size >= 4:
            c = int(rng.choice([4, 6]))
            lines.append(f"block res out={c} s=2")
            size = (size + 1) // 2
        elif kind == "pool" and size % 2 == 0 and size >= 4:
            lines.append("maxpool")
            size //= 2
    lines += ["gap", f"fc out={int(rng.integers(2, 5))}"]
    return "\n".join(lines) + "\n"


def random_graph(seed: int):
    return build_model(random_description(np.random.default_rng(seed)))


@pytest.fixture(scope="session")
def toy_graph():
    return load_model("toy6")


@pytest.fixture(scope="session")
def toy_data():
    return synthetic_splits()


@pytest.fixture(scope="session")
def small_data():
    """A quick cut of the toy set for tests that train."""
    return synthetic_splits(sizes=(240, 60, 60))


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
