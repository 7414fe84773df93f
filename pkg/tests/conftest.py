import numpy as np
import pytest

from depprune.model import ModelConfig, init_model, tokenize
from depprune.config import bundled_corpus

TINY = ModelConfig(vocab_size=20, d_model=8, n_heads=2, d_ff=6, n_layers=2, max_seq=12)
SMALL = ModelConfig(vocab_size=259, d_model=16, n_heads=4, d_ff=24, n_layers=2, max_seq=32)


@pytest.fixture
def tiny_model():
    m = init_model(TINY, seed=3)
    # bigger weights than the 0.02 init so gradients are not all tiny
    for name, p in m.params.items():
        if not name.endswith("norm"):
            p.data *= 20.0
        else:
            p.data += np.linspace(-0.3, 0.3, p.size)
    return m


@pytest.fixture
def small_model():
    return init_model(SMALL, seed=1)


@pytest.fixture(scope="session")
def corpus_tokens():
    return np.array(tokenize(bundled_corpus()), dtype=np.int64)
