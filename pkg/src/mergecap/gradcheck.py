"""Central-difference check of every parameter tensor on a small model."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .data import EOS, ImageFeatures
from .model import CaptionModel, ModelConfig, init_params
from .training import cross_entropy_loss

TOY_CONFIG = ModelConfig(vocab_size=32, embed_dim=8, hidden_dim=16, att_hidden_dim=8,
                         feat_dim=12, out_hidden_dim=16, max_caption_len=16)


def gradient_check_suite(config: ModelConfig = TOY_CONFIG, n_regions: int = 4, n_attention: int = 2,
                         seed: int = 0, eps: float = 1e-5, init_scale: float = 0.5,
                         caption_len: int = 4) -> dict:
    """Max relative gradient error per parameter tensor for a cross-entropy loss.

    Weights are drawn wider than the training init so the nonlinearities are
    exercised away from their linear regime.
    """
    rng = np.random.default_rng(seed)
    model = CaptionModel(config, init_params(config, seed, init_scale))
    features = ImageFeatures(rng.standard_normal((n_regions, config.feat_dim)))
    target = [int(t) for t in rng.integers(3, config.vocab_size, caption_len)] + [EOS]

    def loss_fn(_x):
        return cross_entropy_loss(model, features, target, n_attention, 0.0)

    start = time.perf_counter()
    errors = {}
    for name, p in model.params.items():
        errors[name] = T.finite_difference_check(loss_fn, p, eps)
    return {
        "errors": errors,
        "max_relative_error": max(errors.values()),
        "n_parameters": model.num_parameters(),
        "n_attention": n_attention,
        "seconds": time.perf_counter() - start,
    }
