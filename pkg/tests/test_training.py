import math

import numpy as np
import pytest

from conftest import make_features, make_model
from mergecap import tensor as T
from mergecap.data import BOS, EOS, SyntheticWorld, build_vocab, generate_synthetic
from mergecap.inference import greedy_decode
from mergecap.metrics import IdfTable
from mergecap.model import AttentionTrace, ModelConfig
from mergecap.tensor import Tensor
from mergecap.training import (Adam, NumericalError, TrainConfig, WarmStartError, adam_step,
                               cross_entropy_loss, learning_rate, sample_caption,
                               scheduled_sampling_prob, self_critical_loss, sequence_log_prob, train)


# schedules ------------------------------------------------------------------

def test_schedule_examples():
    assert scheduled_sampling_prob(0) == 0.0
    assert scheduled_sampling_prob(4) == 0.0
    assert scheduled_sampling_prob(5) == pytest.approx(0.05)
    assert scheduled_sampling_prob(24) == pytest.approx(0.20)
    assert scheduled_sampling_prob(25) == pytest.approx(0.25)
    assert scheduled_sampling_prob(100) == pytest.approx(0.25)
    assert learning_rate(0) == 5e-4
    assert learning_rate(2) == 5e-4
    assert learning_rate(3) == pytest.approx(4e-4)
    assert learning_rate(99) == pytest.approx(3.17e-7, rel=1e-2)


def test_schedules_monotone():
    ss = [scheduled_sampling_prob(e) for e in range(101)]
    lr = [learning_rate(e) for e in range(101)]
    assert all(a <= b for a, b in zip(ss, ss[1:]))
    assert all(a >= b for a, b in zip(lr, lr[1:]))
    with pytest.raises(ValueError):
        learning_rate(-1)


# cross-entropy ----------------------------------------------------------------

def uniform_model():
    config = ModelConfig(vocab_size=4, embed_dim=2, hidden_dim=2, att_hidden_dim=2, feat_dim=3,
                         out_hidden_dim=2)
    model = make_model(config)
    for k in ("f_out.W2", "f_out.b2"):
        model.params[k].data[...] = 0.0
    return model


def test_uniform_model_loss():
    loss = cross_entropy_loss(uniform_model(), make_features(2, 3), [3, EOS], 1, 0.0)
    assert loss.item() == pytest.approx(2 * math.log(4), abs=1e-12)


@pytest.mark.parametrize("n", [1, 3])
def test_teacher_forcing_matches_manual_sum(n):
    model = make_model(seed=5)
    feats = make_features(seed=5)
    target = [7, 4, 9, EOS]
    manual, state, prev = 0.0, model.initial_state(), BOS
    for w in target:
        probs, state, _ = model.decode_step(prev, feats, state, n)
        manual -= math.log(probs.data[0, w])
        prev = w
    assert cross_entropy_loss(model, feats, target, n, 0.0).item() == pytest.approx(manual, abs=1e-10)


class ChainModel:
    """Stub: after token ``t`` it predicts ``successor[t]`` with near-certainty
    and records which tokens were fed in."""

    def __init__(self, successor, vocab_size=8):
        self.successor = successor
        self.fed = []
        self.config = ModelConfig(vocab_size=vocab_size, max_caption_len=16)
        self.dtype = np.float64

    def start(self, features):
        return None, None, BOS

    def decode_step(self, prev, prep, state, n_attention=1):
        self.fed.append(prev)
        p = np.full(self.config.vocab_size, 1e-14)
        p[self.successor[prev]] = 1.0
        return Tensor((p / p.sum()).reshape(1, -1)), state, AttentionTrace()


def test_full_scheduled_sampling_feeds_own_predictions():
    model = ChainModel({BOS: 5, 5: 6, 6: 4, 4: 7, 7: EOS, 3: 3})
    cross_entropy_loss(model, None, [3, 3, 3, EOS], 1, 1.0, np.random.default_rng(0))
    assert model.fed == [BOS, 5, 6, 4]
    model.fed = []
    cross_entropy_loss(model, None, [3, 3, 3, EOS], 1, 0.0)
    assert model.fed == [BOS, 3, 3, 3]


def test_cross_entropy_argument_errors():
    model = make_model()
    with pytest.raises(ValueError, match="eos"):
        cross_entropy_loss(model, make_features(), [4, 5], 1)
    with pytest.raises(ValueError, match="rng"):
        cross_entropy_loss(model, make_features(), [4, EOS], 1, 0.5)
    with pytest.raises(ValueError):
        cross_entropy_loss(model, make_features(), [4] * 17 + [EOS], 1)


# sampling and self-critical ---------------------------------------------------

def test_sample_log_prob_matches_manual():
    model = make_model(seed=3)
    feats = make_features(seed=3)
    tokens, lp = sample_caption(model, feats, 2, 6, np.random.default_rng(1))
    manual, state, prev = 0.0, model.initial_state(), BOS
    for tok in tokens:
        probs, state, _ = model.decode_step(prev, feats, state, 2)
        p = probs.data[0]
        manual += math.log(p[tok] / p[2:].sum())
        prev = tok
    assert lp.item() == pytest.approx(manual, abs=1e-10)
    assert sequence_log_prob(model, feats, tokens, 2).item() == pytest.approx(manual, abs=1e-10)
    assert 0 not in tokens and 1 not in tokens


def test_deterministic_model_sample_equals_greedy():
    model = ChainModel({BOS: 5, 5: 6, 6: EOS})
    tokens, _ = sample_caption(model, None, 1, 10, np.random.default_rng(0))
    assert tokens == greedy_decode(model, None, 1, 10) == [5, 6, EOS]


def _sc_setup():
    vocab = build_vocab(["red ball"] * 6 + ["blue box"] * 6)
    config = ModelConfig(vocab_size=len(vocab), embed_dim=4, hidden_dim=6, att_hidden_dim=4,
                         feat_dim=5, out_hidden_dim=6)
    refs = [["red ball"], ["blue box"]]
    return vocab, config, refs, IdfTable.from_references(refs)


def test_self_critical_zero_advantage():
    vocab, config, refs, idf = _sc_setup()
    model = make_model(config, seed=1)
    model.params["f_out.b2"].data[EOS] = 60.0  # sample and greedy are both just eos
    stats = {}
    with T.fresh_tape():
        loss = self_critical_loss(model, make_features(3, 5), refs[0], 1, np.random.default_rng(0), idf,
                                  vocab, stats=stats)
        T.backward(loss)
    assert stats["sample"] == stats["greedy"] == []
    assert loss.item() == 0.0
    assert all(np.all(p.grad == 0) for p in model.parameters())


def test_self_critical_step_follows_advantage():
    vocab, config, refs, idf = _sc_setup()
    checked = set()
    for seed in range(60):
        model = make_model(config, seed=seed, scale=1.0)
        feats = make_features(3, 5, seed=seed)
        stats = {}
        with T.fresh_tape():
            loss = self_critical_loss(model, feats, refs[0], 2, np.random.default_rng(seed), idf, vocab,
                                      max_len=4, stats=stats)
            adv = stats["reward"] - stats["baseline"]
            if adv == 0:
                continue
            T.backward(loss)
        sample = vocab.encode(stats["sample"])
        tokens = sample + [EOS] if len(sample) < 4 else sample
        before = sequence_log_prob(model, feats, tokens, 2).item()
        for p in model.parameters():
            p.data -= 1e-4 * p.grad
        after = sequence_log_prob(model, feats, tokens, 2).item()
        assert np.sign(after - before) == np.sign(adv)
        checked.add(np.sign(adv))
        if len(checked) == 2:
            break
    assert checked == {1.0, -1.0}


# optimiser ----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p, m, v = adam_step(np.array([1.0]), np.array([1.0]), np.zeros(1), np.zeros(1), 1, 0.01)
    assert p[0] == pytest.approx(1.0 - 0.01, abs=1e-8)


def test_adam_three_steps_on_quadratic():
    x, m, v = 2.0, 0.0, 0.0
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    param = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam({"x": param})
    for t in range(1, 4):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        param.grad = None
        with T.fresh_tape():
            T.backward(T.sum(T.mul(param, param)))
        opt.step(lr)
        assert param.data[0] == pytest.approx(x, abs=1e-12)


def test_adam_rejects_non_finite_gradient():
    param = Tensor(np.array([1.0]), requires_grad=True)
    param.grad = np.array([np.nan])
    with pytest.raises(NumericalError):
        Adam({"p": param}).step(0.1)


def test_adam_clipping():
    param = Tensor(np.zeros(2), requires_grad=True)
    param.grad = np.array([30.0, 40.0])
    assert Adam({"p": param}).step(0.1, clip_norm=1.0) == pytest.approx(50.0)


# training loop --------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_world():
    train_set, val_set, _ = generate_synthetic(SyntheticWorld(), 40, 10, 0)
    vocab = build_vocab([c for r in train_set.images for c in r.captions])
    mc = ModelConfig(len(vocab), 8, 16, 8, 32, 16)
    return train_set, val_set, vocab, mc


def _cfg(**kw):
    base = dict(lr_initial=5e-3, epochs=5, eval_interval_iterations=None, n_attention_train=1, eval_beam=1)
    base.update(kw)
    return TrainConfig(**base)


def test_train_loss_decreases_and_checkpoint_rule(small_world, tmp_path):
    tr, va, vocab, mc = small_world
    result = train(tr, va, vocab, _cfg(), mc, out_dir=tmp_path)
    losses = [e["loss"] for e in result.log]
    assert len(losses) == 5 and losses[-1] < losses[0]
    assert result.evaluations == 5
    assert 1 <= result.checkpoints_saved <= result.evaluations
    ciders = [e["val_cider"] for e in result.log]
    improvements = sum(1 for k, c in enumerate(ciders) if c > max(ciders[:k], default=-math.inf))
    assert result.checkpoints_saved == improvements
    assert result.best.val_cider == max(ciders)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 5 and (tmp_path / "best.json").exists()
    assert [e["lr"] for e in result.log] == [learning_rate(e, 5e-3) for e in range(5)]


def test_train_is_deterministic(small_world):
    tr, va, vocab, mc = small_world
    a = train(tr, va, vocab, _cfg(epochs=2, seed=3), mc)
    b = train(tr, va, vocab, _cfg(epochs=2, seed=3), mc)
    assert a.log == b.log
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)


def test_self_critical_requires_warm_start(small_world):
    tr, va, vocab, mc = small_world
    with pytest.raises(WarmStartError):
        train(tr, va, vocab, _cfg(loss_kind="self_critical"), mc)


def test_self_critical_runs_from_warm_start(small_world):
    tr, va, vocab, mc = small_world
    ce = train(tr, va, vocab, _cfg(epochs=1), mc)
    sc = train(tr, va, vocab, _cfg(epochs=1, loss_kind="self_critical", lr_initial=1e-4), init=ce.model)
    assert len(sc.log) == 1 and all(e["ss_prob"] == 0.0 for e in sc.log)


def test_diverging_training_raises(small_world):
    tr, va, vocab, mc = small_world
    with pytest.raises(NumericalError):
        train(tr, va, vocab, _cfg(lr_initial=1e4, epochs=3), mc)


def test_eval_interval_in_iterations(small_world):
    tr, va, vocab, mc = small_world
    result = train(tr, va, vocab, _cfg(epochs=2, batch_size=8, eval_interval_iterations=3), mc)
    # 40 images / 8 = 5 iterations per epoch, 10 in total
    assert [e["iteration"] for e in result.log] == [3, 6, 9]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="mse")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
