import numpy as np
import pytest

from sseds.dataio import Batch, SynthSpec, planted_profile, synth_generate
from sseds.model import ModelConfig, init_model


def random_batch(rng: np.random.Generator, sizes, n: int) -> Batch:
    tokens = np.stack([rng.integers(0, s, size=n) for s in sizes], axis=1).astype(np.int64)
    labels = rng.integers(0, 2, size=n).astype(np.uint8)
    return Batch(tokens, labels, 0)


def small_model(arch="DeepFM", sizes=(7, 5, 9), d=4, hidden=(6, 5), seed=0, dtype="float64", fusion="sum"):
    return init_model(ModelConfig(arch, d, hidden, fusion, dtype), list(sizes), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_small():
    spec = SynthSpec([12, 10, 8, 6], 3000, planted_profile("uniform", 4, 4, 1.0))
    return synth_generate(spec, seed=5)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name} -- {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
