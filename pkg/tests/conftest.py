import contextlib

import numpy as np
import pytest

import blockflow as bf

_ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


@pytest.fixture(scope="session")
def criterion():
    """Context manager recording one acceptance-criterion pass/fail line."""

    @contextlib.contextmanager
    def _criterion(num: int, name: str):
        try:
            yield
        except BaseException:
            _ACCEPTANCE_LINES.append((num, name, "FAIL"))
            raise
        _ACCEPTANCE_LINES.append((num, name, "PASS"))

    return _criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, outcome in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num:2d} ({name}): {outcome}")


@pytest.fixture(scope="session")
def tiny_cfg():
    return bf.tiny_config()


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return bf.init_params(tiny_cfg, seed=1)


@pytest.fixture(scope="session")
def tiny_random_params(tiny_cfg):
    return bf.random_params(tiny_cfg, seed=2)


@pytest.fixture(scope="session")
def small_corpus():
    return bf.synth_corpus(bf.CorpusConfig(num_utterances=16, seed=3))


def gaussian(seed, *shape):
    """Seeded standard-normal array helper for tests."""
    n = int(np.prod(shape)) if shape else 1
    return bf.seeded_gaussian(bf.SeededRng(seed, 0), n).reshape(shape)
