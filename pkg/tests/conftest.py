import pytest
import torch

from ar2diff.data import Vocab
from ar2diff.model import ModelConfig, init_weights


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32, seed=0)


@pytest.fixture
def tiny_weights(tiny_config):
    return init_weights(tiny_config)


def random_tokens(n, s, lo, hi, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(lo, hi, (n, s), generator=g)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
