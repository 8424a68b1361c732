"""Greedy and beam-search decoding with ``m_attention`` attention steps per word.

``max_len`` counts decode steps, eos included. pad and bos are never emitted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD
from .model import AttentionTrace, CaptionModel, DecoderState, Features

_BANNED = (PAD, BOS)


def _log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lp = np.log(probs.reshape(-1))
    lp[list(_BANNED)] = -np.inf
    return lp


def greedy_decode(model: CaptionModel, features: Features, m_attention: int = 1,
                  max_len: int = 17, return_trace: bool = False):
    """Arg-max decoding; the returned tokens end with eos unless ``max_len`` ran out."""
    if m_attention < 1:
        raise ValueError(f"m_attention must be >= 1, got {m_attention}")
    tokens: list[int] = []
    trace = AttentionTrace()
    with T.no_grad():
        prep, state, prev = model.start(features)
        for _ in range(max_len):
            probs, state, tr = model.decode_step(prev, prep, state, m_attention)
            trace.extend(tr)
            prev = int(np.argmax(_log_probs(probs.data)))
            tokens.append(prev)
            if prev == EOS:
                break
    if return_trace:
        return tokens, trace, state
    return tokens


@dataclass
class BeamHypothesis:
    tokens: tuple
    log_prob: float
    state: DecoderState
    finished: bool = False

    def sort_key(self):
        return (-self.log_prob, self.tokens)


def beam_search(model: CaptionModel, features: Features, m_attention: int = 1,
                beam_size: int = 2, max_len: int = 17) -> tuple[list[int], float]:
    """Best caption by summed log-probability (no length normalisation).

    Each step expands every live hypothesis by every emittable token and keeps
    the ``beam_size`` best candidates overall; candidates ending in eos leave
    the beam as finished. Ties go to the lexicographically smaller token
    sequence.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if m_attention < 1:
        raise ValueError(f"m_attention must be >= 1, got {m_attention}")
    finished: list[BeamHypothesis] = []
    with T.no_grad():
        prep, state, _ = model.start(features)
        beam = [BeamHypothesis((), 0.0, state)]
        for step in range(max_len):
            candidates = []
            for hyp in beam:
                prev = hyp.tokens[-1] if hyp.tokens else BOS
                probs, st, _ = model.decode_step(prev, prep, hyp.state, m_attention)
                lp = _log_probs(probs.data)
                for tok in np.flatnonzero(np.isfinite(lp)):
                    candidates.append((hyp.log_prob + float(lp[tok]), hyp.tokens + (int(tok),), st))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beam = []
            for score, toks, st in candidates[:beam_size]:
                hyp = BeamHypothesis(toks, score, st)
                if toks[-1] == EOS or step == max_len - 1:
                    hyp.finished = True
                    finished.append(hyp)
                else:
                    beam.append(hyp)
            if not beam:
                break
    best = min(finished, key=BeamHypothesis.sort_key)
    return list(best.tokens), best.log_prob


def decode(model: CaptionModel, features: Features, m_attention: int = 1, beam_size: int = 1,
           max_len: int = 17) -> list[int]:
    if beam_size == 1:
        return greedy_decode(model, features, m_attention, max_len)
    return beam_search(model, features, m_attention, beam_size, max_len)[0]


def caption_dataset(model: CaptionModel, dataset, m_attention: int = 1, beam_size: int = 2,
                    max_len: int | None = None) -> list[list[int]]:
    if max_len is None:
        max_len = model.config.max_caption_len + 1
    return [decode(model, rec.features, m_attention, beam_size, max_len) for rec in dataset.images]


def evaluate_model(model: CaptionModel, dataset, vocab, m_attention: int = 1, beam_size: int = 2,
                   max_len: int | None = None) -> tuple[dict, list[list[str]]]:
    """Decode every image of ``dataset`` and score against its references.

    Returns the metric report and the decoded captions as word lists.
    """
    from .metrics import evaluate_captions

    ids = caption_dataset(model, dataset, m_attention, beam_size, max_len)
    words = [vocab.decode(t) for t in ids]
    return evaluate_captions(words, dataset.references()), words


def replay_trace(model: CaptionModel, features: Features, tokens, m_attention: int = 1
                 ) -> tuple[AttentionTrace, DecoderState]:
    """Feed ``tokens`` back through the decoder and collect the attention weights."""
    trace = AttentionTrace()
    with T.no_grad():
        prep, state, prev = model.start(features)
        for tok in tokens:
            _, state, tr = model.decode_step(prev, prep, state, m_attention)
            trace.extend(tr)
            prev = int(tok)
    return trace, state
