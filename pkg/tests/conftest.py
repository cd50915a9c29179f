from dataclasses import dataclass

import numpy as np
import pytest


@dataclass
class Upd:
    """Minimal stand-in for a client update."""

    params: np.ndarray
    num_samples: int = 1
    local_steps: int = 1
    client_id: str = "c"
    train_loss_sum: float = 0.0
    divergence_l2: float = 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the summary prints them all at the end of the run."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
