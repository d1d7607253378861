import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptad import tensor as T


@pytest.fixture(autouse=True)
def restore_dtype():
    old = T.get_default_dtype()
    yield
    T.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """A small shared corpus for dataset-level tests (not the acceptance runs)."""
    from promptad.toydata import make_toy_corpus

    root = tmp_path_factory.mktemp("toy") / "corpus"
    make_toy_corpus(root, seed=11, n_train=4, n_test_good=2, n_test_anom=3)
    return root
