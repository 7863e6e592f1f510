from pathlib import Path

import numpy as np
import pytest

from langneuron.corpus import SynthSpec, synth_language
from langneuron.model import ModelConfig, init_random

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.json"
GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, d_inter=32, vocab_size=259, max_seq_len=24)


@pytest.fixture(scope="session")
def toy_model(toy_config):
    return init_random(toy_config, 0)


@pytest.fixture(scope="session")
def two_languages():
    aa = synth_language(SynthSpec(b"abcdefgh", 6, 14, seed=1, language="aa"), 12, 24)
    bb = synth_language(SynthSpec(b"pqrstuvw", 6, 14, seed=2, language="bb"), 12, 24)
    return {"aa": aa, "bb": bb}


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
