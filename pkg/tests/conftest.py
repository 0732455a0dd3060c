import numpy as np
import pytest

from spm.corpus import build_vocab, generate_synthetic
from spm.encoder import EncoderConfig, EncoderParams


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(300, seed=3)


@pytest.fixture(scope="session")
def small_vocab(small_data):
    return build_vocab(small_data.corpus)


@pytest.fixture
def tiny_encoder(small_vocab):
    cfg = EncoderConfig(len(small_vocab), layers=1, heads=2, d=16, d_ff=32)
    return EncoderParams.init(cfg, np.random.default_rng(0))


ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
