import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mateicl.model import Model, ModelConfig
from mateicl.numerics import Rng
from mateicl.windowing import PackedContext, assign_positions

TINY = ModelConfig(vocab_size=64, d_model=32, n_heads=2, n_layers=2, max_positions=32)


@pytest.fixture(scope="session")
def tiny_model():
    return Model.random(TINY, seed=7, scale=0.08)


@pytest.fixture(scope="session")
def matching_model():
    model, vocab = Model.matching(4, 3)
    return model, vocab


def random_packed(rng: Rng, vocab: int, W: int, win_len: int, task_len: int, N: int = 32):
    windows = tuple(tuple(int(rng.below(vocab)) for _ in range(win_len)) for _ in range(W))
    task = tuple(int(rng.below(vocab)) for _ in range(task_len))
    return assign_positions(PackedContext(windows=windows, task_tokens=task), N)
