import numpy as np
import pytest

from flexquant.analyzer import build_ladder_plan
from flexquant.corpus import corpus_prompts
from flexquant.model import ModelConfig, TinyTransformer

SMALL = ModelConfig(vocab_size=256, d_model=32, n_heads=2, n_layers=2, ffn_dim=64, max_seq_len=160)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return TinyTransformer.random(SMALL, seed=7)


@pytest.fixture
def small_plan(small_model):
    return build_ladder_plan(small_model.linear_weights())


@pytest.fixture(scope="session")
def fixture_model_factory():
    """The bundled 4-layer fixture; call to get a fresh instance."""
    return lambda: TinyTransformer.random(ModelConfig(), seed=0)


@pytest.fixture
def prompt():
    return corpus_prompts(20, 32)[0]


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
