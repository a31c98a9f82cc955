from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from expertspec.model import ModelConfig, build_model, preset
from expertspec.speculation import accumulate_default_vectors
from expertspec.trace import random_tokens, record_trace

settings.register_profile("thorough", max_examples=1000, deadline=None)
settings.register_profile("quick", max_examples=100, deadline=None)
settings.load_profile("quick")


TINY = ModelConfig(L=3, E=6, k=2, H=16, H_moe=24, vocab=32, head_dim=8, seed=5)


@pytest.fixture(scope="session")
def toy():
    return build_model(preset("toy"))


@pytest.fixture(scope="session")
def tiny():
    return build_model(TINY)


@pytest.fixture(scope="session")
def toy_trace(toy):
    return record_trace(toy, random_tokens(toy.config.vocab, 600, 17))


@pytest.fixture(scope="session")
def toy_table(toy_trace):
    return accumulate_default_vectors(toy_trace)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
