import numpy as np
import pytest

from metaser.data import GenerationConfig, generate_corpus
from metaser.encoder import EncoderConfig


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(GenerationConfig(), seed=7)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GenerationConfig(n_utterances=60), seed=3)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(n_layers=4, model_dim=8, n_heads=2, ff_dim=16, freeze_first_k_stage2=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one PASS/FAIL line per criterion at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
