"""Cross-entropy (with scheduled sampling) and self-critical training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, CaptionDataset, Vocabulary
from .inference import evaluate_model, greedy_decode
from .metrics import IdfTable, cider_d_image
from .model import CaptionModel, ModelConfig, init_params
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_KINDS = ("cross_entropy", "self_critical")


class NumericalError(FloatingPointError):
    """A loss or gradient stopped being finite."""


class WarmStartError(ValueError):
    """Self-critical training was requested without a cross-entropy model to start from."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_initial: float = 5e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 3
    ss_increment: float = 0.05
    ss_every: int = 5
    ss_cap: float = 0.25
    epochs: int = 100
    # None: evaluate once at the end of every epoch
    eval_interval_iterations: Optional[int] = 5000
    seed: int = 0
    loss_kind: str = "cross_entropy"
    n_attention_train: int = 1
    # attention iterations / beam used for validation; None follows n_attention_train
    n_attention_eval: Optional[int] = None
    eval_beam: int = 2
    # epochs already run before this one, added when reading the schedules
    epoch_offset: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: Optional[float] = None
    init_scale: float = 0.08
    dtype: str = "float64"
    # "one": one reference per image per epoch, drawn at random; "all": every reference
    refs_per_epoch: str = "one"

    def __post_init__(self):
        if not 0.0 <= self.ss_cap <= 1.0:
            raise ValueError(f"ss_cap must be in [0, 1], got {self.ss_cap}")
        if self.lr_initial <= 0:
            raise ValueError(f"lr_initial must be positive, got {self.lr_initial}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.n_attention_train < 1 or (self.n_attention_eval is not None and self.n_attention_eval < 1):
            raise ValueError("attention iteration counts must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.refs_per_epoch not in ("one", "all"):
            raise ValueError(f"refs_per_epoch must be 'one' or 'all', got {self.refs_per_epoch!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def eval_attention(self) -> int:
        return self.n_attention_eval or self.n_attention_train

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def scheduled_sampling_prob(epoch: int, increment: float = 0.05, every: int = 5,
                            cap: float = 0.25) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(cap, (epoch // every) * increment)


def learning_rate(epoch: int, initial: float = 5e-4, factor: float = 0.8, every: int = 3) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial * factor ** (epoch // every)


# --------------------------------------------------------------------------
# losses


def _emittable(probs: np.ndarray) -> np.ndarray:
    # pad and bos (ids 0, 1) are never produced
    p = probs.reshape(-1)[2:]
    return p / p.sum()


def _sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    p = _emittable(probs)
    return 2 + int(rng.choice(p.size, p=p))


def cross_entropy_loss(model: CaptionModel, features, target_tokens: Sequence[int],
                       n_attention: int = 1, ss_prob: float = 0.0,
                       rng: np.random.Generator | None = None) -> Tensor:
    """Summed negative log-likelihood of ``target_tokens`` (which end in eos).

    With probability ``ss_prob`` per step the word fed back to the language
    LSTM is drawn from the model's own prediction instead of the target.
    """
    target_tokens = [int(t) for t in target_tokens]
    if not target_tokens:
        raise ValueError("empty target caption")
    if target_tokens[-1] != EOS:
        raise ValueError("target caption must end with eos")
    if len(target_tokens) > model.config.max_caption_len + 1:
        raise ValueError(f"target has {len(target_tokens)} tokens; at most "
                         f"{model.config.max_caption_len + 1} allowed")
    if ss_prob > 0 and rng is None:
        raise ValueError("scheduled sampling needs an rng")
    prep, state, prev = model.start(features)
    terms = []
    last = len(target_tokens) - 1
    for k, w in enumerate(target_tokens):
        probs, state, _ = model.decode_step(prev, prep, state, n_attention)
        terms.append(T.log(T.slice(probs, w, w + 1)))
        prev = w
        if ss_prob > 0 and k < last and rng.random() < ss_prob:
            prev = _sample_token(probs.data, rng)
    return T.scalar_mul(T.sum(T.concat(terms)), -1.0)


def sample_caption(model: CaptionModel, features, n_attention: int = 1, max_len: int = 17,
                   rng: np.random.Generator | None = None) -> tuple[list[int], Tensor]:
    """Ancestral sample and the summed log-probability of the sampled tokens.

    pad and bos are excluded, so each step draws from the distribution
    renormalised over the remaining tokens and scores the token under it.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    prep, state, prev = model.start(features)
    ones = Tensor(np.ones((model.config.vocab_size - 2, 1), dtype=model.dtype))
    tokens, terms = [], []
    for _ in range(max_len):
        probs, state, _ = model.decode_step(prev, prep, state, n_attention)
        tok = _sample_token(probs.data, rng)
        mass = T.matmul(T.slice(probs, 2, None), ones)
        terms.append(T.add(T.log(T.slice(probs, tok, tok + 1)), T.scalar_mul(T.log(mass), -1.0)))
        tokens.append(tok)
        prev = tok
        if tok == EOS:
            break
    return tokens, T.sum(T.concat(terms))


def sequence_log_prob(model: CaptionModel, features, tokens: Sequence[int], n_attention: int = 1) -> Tensor:
    """Log-probability of a given token path, scored as :func:`sample_caption` scores it."""
    prep, state, prev = model.start(features)
    ones = Tensor(np.ones((model.config.vocab_size - 2, 1), dtype=model.dtype))
    terms = []
    for tok in tokens:
        probs, state, _ = model.decode_step(prev, prep, state, n_attention)
        mass = T.matmul(T.slice(probs, 2, None), ones)
        terms.append(T.add(T.log(T.slice(probs, tok, tok + 1)), T.scalar_mul(T.log(mass), -1.0)))
        prev = int(tok)
    return T.sum(T.concat(terms))


def self_critical_loss(model: CaptionModel, features, references: Sequence[Sequence[str]],
                       n_attention: int, rng: np.random.Generator, idf: IdfTable,
                       vocab: Vocabulary, max_len: int | None = None,
                       stats: dict | None = None) -> Tensor:
    """REINFORCE loss with the greedy caption's CIDEr-D as baseline.

    ``-(R - b) * log p(sample)``; ``R`` and ``b`` are plain numbers, so no
    gradient flows through the metric.
    """
    if len(references) == 0:
        raise ValueError("self-critical loss needs at least one reference")
    if max_len is None:
        max_len = model.config.max_caption_len + 1
    tokens, log_p = sample_caption(model, features, n_attention, max_len, rng)
    greedy = greedy_decode(model, features, n_attention, max_len)
    sampled_words = vocab.decode(tokens)
    greedy_words = vocab.decode(greedy)
    reward = cider_d_image(sampled_words, references, idf)
    baseline = cider_d_image(greedy_words, references, idf)
    if stats is not None:
        stats.update(reward=reward, baseline=baseline, sample=sampled_words, greedy=greedy_words)
    return T.scalar_mul(log_p, -(reward - baseline))


# --------------------------------------------------------------------------
# optimiser


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; ``step`` counts from 1. Returns ``(param, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float, clip_norm: float | None = None) -> float:
        """Apply one update from the accumulated ``.grad``s; returns the gradient norm."""
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}")
            grads[name] = g
        norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
        scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else 1.0
        self.step_count += 1
        for name, p in self.params.items():
            p.data[...], self.m[name], self.v[name] = adam_step(
                p.data, grads[name] * scale, self.m[name], self.v[name], self.step_count, lr,
                self.beta1, self.beta2, self.eps)
        return norm


# --------------------------------------------------------------------------
# training loop


@dataclass
class CheckpointRecord:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    iteration: int
    val_cider: float

    def meta(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "best_val_cider": self.val_cider,
        }

    def to_model(self) -> CaptionModel:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return CaptionModel(self.model_config, params)


@dataclass
class TrainResult:
    best: Optional[CheckpointRecord]
    log: list[dict]
    model: CaptionModel
    checkpoints_saved: int = 0
    evaluations: int = 0


def _new_model(model_config: ModelConfig, config: TrainConfig) -> CaptionModel:
    params = init_params(model_config, config.seed, config.init_scale, np.dtype(config.dtype))
    return CaptionModel(model_config, params)


def train(train_set: CaptionDataset, val_set: CaptionDataset, vocab: Vocabulary,
          config: TrainConfig, model_config: ModelConfig | None = None,
          init: CaptionModel | None = None, out_dir=None) -> TrainResult:
    """Run the configured regime, evaluating on ``val_set`` and keeping the best model.

    A checkpoint is taken only when validation CIDEr-D strictly improves.
    With ``out_dir``, the log goes to ``train_log.jsonl`` and the best model
    to ``best.json``/``best.bin`` there.
    """
    from .persistence import save_checkpoint

    if config.loss_kind == "self_critical" and init is None:
        raise WarmStartError("self-critical training must start from a cross-entropy model; "
                             "train with loss_kind=cross_entropy first and pass it as init")
    if init is not None:
        model = init.copy()
        if model_config is not None and model_config != model.config:
            raise ValueError("model_config does not match the warm-start model")
    else:
        if model_config is None:
            raise ValueError("model_config is required without a warm-start model")
        model = _new_model(model_config, config)
    mcfg = model.config
    if mcfg.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {mcfg.vocab_size} != vocabulary size {len(vocab)}")
    max_len = mcfg.max_caption_len
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_log.jsonl").write_text("")

    rng = np.random.default_rng([config.seed, 1])
    targets = train_set.encoded_references(vocab, max_len)
    references = train_set.references()
    idf = IdfTable.from_references(references) if config.loss_kind == "self_critical" else None
    optim = Adam(model.params, config.beta1, config.beta2, config.adam_eps)
    N = config.n_attention_train

    result = TrainResult(None, [], model)
    best_cider = -math.inf
    iteration = 0
    running: list[float] = []

    def evaluate(epoch: int, lr: float, ss: float) -> None:
        nonlocal best_cider, running
        report, _ = evaluate_model(model, val_set, vocab, config.eval_attention, config.eval_beam)
        cider = report["cider_d"]
        entry = {
            "epoch": epoch,
            "iteration": iteration,
            "loss": float(np.mean(running)) if running else None,
            "val_cider": cider,
            "lr": lr,
            "ss_prob": ss,
        }
        running = []
        result.log.append(entry)
        result.evaluations += 1
        log.info("epoch %d iter %d loss %s val CIDEr-D %.4f", epoch, iteration, entry["loss"], cider)
        if out_dir is not None:
            with open(out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        if cider > best_cider:
            best_cider = cider
            result.best = CheckpointRecord({k: p.data.copy() for k, p in model.params.items()},
                                           mcfg, config, epoch, iteration, cider)
            result.checkpoints_saved += 1
            if out_dir is not None:
                save_checkpoint(model.params, result.best.meta(), out_dir / "best.json")

    for epoch in range(config.epochs):
        sched_epoch = epoch + config.epoch_offset
        lr = learning_rate(sched_epoch, config.lr_initial, config.lr_decay_factor, config.lr_decay_every)
        ss = 0.0
        if config.loss_kind == "cross_entropy":
            ss = scheduled_sampling_prob(sched_epoch, config.ss_increment, config.ss_every, config.ss_cap)
        examples = _epoch_examples(len(train_set), targets, config.refs_per_epoch, rng)
        for start in range(0, len(examples), config.batch_size):
            batch = examples[start:start + config.batch_size]
            model.zero_grad()
            batch_loss = 0.0
            for img, ref in batch:
                features = train_set.images[img].features
                with T.fresh_tape():
                    if config.loss_kind == "cross_entropy":
                        loss = cross_entropy_loss(model, features, targets[img][ref], N, ss, rng)
                    else:
                        loss = self_critical_loss(model, features, references[img], N, rng, idf, vocab)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericalError(f"non-finite loss {value} at epoch {epoch}, image {img}")
                    if loss.requires_grad:
                        T.backward(T.scalar_mul(loss, 1.0 / len(batch)))
                batch_loss += value
            optim.step(lr, config.clip_norm)
            running.append(batch_loss / len(batch))
            iteration += 1
            if config.eval_interval_iterations and iteration % config.eval_interval_iterations == 0:
                evaluate(epoch, lr, ss)
        if not config.eval_interval_iterations:
            evaluate(epoch, lr, ss)
    return result


def _epoch_examples(n_images: int, targets, mode: str, rng: np.random.Generator) -> list[tuple[int, int]]:
    order = rng.permutation(n_images)
    if mode == "one":
        return [(int(i), int(rng.integers(len(targets[i])))) for i in order]
    pairs = [(int(i), r) for i in order for r in range(len(targets[i]))]
    return [pairs[k] for k in rng.permutation(len(pairs))]
