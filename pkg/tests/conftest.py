import pytest

from genadv.data import DatasetHandle, synthesize_classification_dataset
from genadv.victims import VictimTrainConfig, train_victim


@pytest.fixture(scope="session")
def shapes_small():
    return synthesize_classification_dataset(2000, seed=0)


@pytest.fixture(scope="session")
def desk_victims(shapes_small):
    """Two quickly trained classifiers with different architectures."""
    v1 = train_victim("cnn_small", shapes_small, VictimTrainConfig(epochs=3, batch_size=64), seed=0, victim_id="v1")
    v2 = train_victim("cnn_deep", shapes_small, VictimTrainConfig(epochs=2, batch_size=64), seed=1, victim_id="v2")
    return v1, v2


@pytest.fixture(scope="session")
def batch8(shapes_small):
    x, y = shapes_small.arrays("test", 8)
    return DatasetHandle("classification", 10, (3, 32, 32), {"train": (x, y)}, "batch8")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""

    def record(number: int, ok: bool, title: str, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
