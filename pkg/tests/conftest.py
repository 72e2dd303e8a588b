import warnings

import pytest

from dsner.corpus import inject_noise
from dsner.synthetic import make_lexicon, make_synthetic_corpus
from dsner.trainer import RunConfig, train


@pytest.fixture(scope="session")
def lexicon():
    return make_lexicon()


@pytest.fixture(scope="session")
def small_train(lexicon):
    gold = make_synthetic_corpus(200, seed=11, lexicon=lexicon)
    return inject_noise(gold, 0.1, 0.3, seed=5)


@pytest.fixture(scope="session")
def small_dev(lexicon):
    return make_synthetic_corpus(40, seed=12, lexicon=lexicon)


@pytest.fixture(scope="session")
def quick_cfg():
    return RunConfig.from_profile("toy", epochs=2, rep_dim=32, batch_size=16, seed=3)


@pytest.fixture(scope="session")
def trained(quick_cfg, small_train, small_dev):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train(quick_cfg, small_train, small_dev)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one status line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
