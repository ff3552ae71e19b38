import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from oracles import TINY, TINY_TARGET  # noqa: E402

from bliss.data import TokenDataset  # noqa: E402
from bliss.models import new_proxy, new_score, new_target  # noqa: E402


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, TINY.vocab_size, size=(6, TINY.seq_len)).astype(np.uint32)
    return TokenDataset(TINY.vocab_size, TINY.seq_len, tokens).all()


@pytest.fixture
def tiny_models():
    """Float64 proxy/score/target with O(1) random weights so every term is active."""
    proxy = new_proxy(TINY, 1, torch.float64, std=0.5)
    score = new_score(TINY, 2, torch.float64, std=0.5)
    g = torch.Generator().manual_seed(3)
    score = score.with_params(score.params.map(lambda t: t + 0.5 * torch.randn(t.shape, generator=g, dtype=t.dtype)))
    target = new_target(TINY_TARGET, 4, torch.float64, std=0.5)
    return proxy, score, target


# -- acceptance summary -------------------------------------------------------
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, name, ok, detail)`` records and prints one pass/fail line, then asserts."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
