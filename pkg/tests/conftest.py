import numpy as np
import pytest

from situcrf.cli import tiny_lexicon_path
from situcrf.schema import load_lexicon
from situcrf.training import small_problem


@pytest.fixture(scope="session")
def tiny_lex():
    return load_lexicon(tiny_lexicon_path())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_lexica(n, start=0):
    """``n`` random small lexica (at most 3 verbs, 3 roles, 4 candidates each)."""
    return [small_problem(seed) for seed in range(start, start + n)]
