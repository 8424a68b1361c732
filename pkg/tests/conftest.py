import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mergecap.data import ImageFeatures  # noqa: E402
from mergecap.model import CaptionModel, ModelConfig, init_params  # noqa: E402

ACCEPTANCE_LINES: list[str] = []

TOY = ModelConfig(vocab_size=32, embed_dim=8, hidden_dim=16, att_hidden_dim=8, feat_dim=12,
                  out_hidden_dim=16)
TINY = ModelConfig(vocab_size=7, embed_dim=3, hidden_dim=4, att_hidden_dim=3, feat_dim=5,
                   out_hidden_dim=4, max_caption_len=4)


def make_model(config=TOY, seed=0, scale=0.5):
    return CaptionModel(config, init_params(config, seed, scale))


def make_features(n=4, d=12, seed=0):
    return ImageFeatures(np.random.default_rng(seed).standard_normal((n, d)))


@pytest.fixture
def toy_model():
    return make_model()


@pytest.fixture
def toy_features():
    return make_features()


@pytest.fixture
def tiny_model():
    return make_model(TINY, seed=3, scale=0.7)


@pytest.fixture
def tiny_features():
    return make_features(3, 5, seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
