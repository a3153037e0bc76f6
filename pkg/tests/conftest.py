import numpy as np
import pytest

from rdsample.model import ModelConfig, ToyModel
from rdsample.theory import make_contraction_oracle


@pytest.fixture(scope="session")
def toy():
    return ToyModel(ModelConfig())


@pytest.fixture(scope="session")
def small_toy():
    return ToyModel(ModelConfig(vocab_size=32, hidden_dim=16, num_heads=2, max_seq_len=128, seed=7))


@pytest.fixture(scope="session")
def oracle():
    return make_contraction_oracle(16, 0.5, 0)


def random_prompts(n, vocab, seed=0, max_len=8):
    rng = np.random.default_rng(seed)
    return [[int(t) for t in rng.integers(vocab, size=rng.integers(1, max_len + 1))]
            for _ in range(n)]


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
