"""Two-LSTM merge captioner.

A language LSTM reads the previous word only. An attention LSTM reads a
sequence of attention vectors over the image regions and may take several
steps per word. The output module merges the mean image feature with both
hidden states to predict the next word; the image never enters the language
stream.

Row vectors are ``[1, k]`` tensors throughout so that every product is a
plain 2-D matmul.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Union

import numpy as np

from . import tensor as T
from .data import BOS, ImageFeatures
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 512
    hidden_dim: int = 1024
    att_hidden_dim: int = 512
    feat_dim: int = 2048
    out_hidden_dim: int = 512
    max_caption_len: int = 16

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {value}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (pad, bos, eos, unk are reserved)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every learnable tensor, in storage order."""
    V, E, H = config.vocab_size, config.embed_dim, config.hidden_dim
    A, D, O = config.att_hidden_dim, config.feat_dim, config.out_hidden_dim
    return {
        "embed.W": (V, E),
        "lang_lstm.W": (E + H, 4 * H),
        "lang_lstm.b": (4 * H,),
        "att_lstm.W": (D + H + H, 4 * H),
        "att_lstm.b": (4 * H,),
        "f_att.W1": (2 * D + 2 * H, A),
        "f_att.b1": (A,),
        "f_att.W2": (A, 1),
        "f_att.b2": (1,),
        "f_out.W1": (D + 2 * H, O),
        "f_out.b1": (O,),
        "f_out.W2": (O, V),
        "f_out.b2": (V,),
    }


def param_count(config: ModelConfig) -> int:
    V, E, H = config.vocab_size, config.embed_dim, config.hidden_dim
    A, D, O = config.att_hidden_dim, config.feat_dim, config.out_hidden_dim
    lang = (E + H) * 4 * H + 4 * H
    att_lstm = (D + 2 * H) * 4 * H + 4 * H
    f_att = (2 * D + 2 * H) * A + A + A + 1
    f_out = (D + 2 * H) * O + O + O * V + V
    return V * E + lang + att_lstm + f_att + f_out


def init_params(config: ModelConfig, seed: int = 0, scale: float = 0.08,
                dtype=np.float64) -> dict[str, Tensor]:
    """Uniform(-scale, scale) weights, zero biases except forget gates at 1."""
    rng = np.random.default_rng(seed)
    H = config.hidden_dim
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            data = np.zeros(shape)
            if "lstm" in name:
                data[H:2 * H] = 1.0
        else:
            data = rng.uniform(-scale, scale, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    i: int = 0  # words consumed
    j: int = 0  # attention iterations taken


@dataclass
class AttentionTrace:
    weights: list = field(default_factory=list)  # one [n] array per attention iteration

    def __len__(self) -> int:
        return len(self.weights)

    def extend(self, other: "AttentionTrace") -> None:
        self.weights.extend(other.weights)


def initial_state(config: ModelConfig, dtype=np.float64) -> DecoderState:
    z = lambda: Tensor(np.zeros((1, config.hidden_dim), dtype=dtype))  # noqa: E731
    return DecoderState(z(), z(), z(), z(), 0, 0)


@dataclass
class PreparedFeatures:
    """Region features plus the parts of the attention MLP that do not change
    within a caption (the region half of its first layer)."""

    regions: Tensor  # [n, D]
    mean: Tensor  # [1, D]
    ones: Tensor  # [n, 1]
    region_proj: Tensor  # [n, A]
    context_W: Tensor  # rows of f_att.W1 acting on (mean, h1, h2)


def prepare_features(features: ImageFeatures, params: dict[str, Tensor]) -> PreparedFeatures:
    W1 = params["f_att.W1"]
    dtype = W1.data.dtype
    n, D = features.regions.shape
    if n == 0:
        raise ValueError("attention needs at least one region")
    regions = Tensor(features.regions.astype(dtype, copy=False))
    mean = Tensor(np.asarray(features.mean, dtype=dtype).reshape(1, D))
    return PreparedFeatures(
        regions=regions,
        mean=mean,
        ones=Tensor(np.ones((n, 1), dtype=dtype)),
        region_proj=T.matmul(regions, T.slice(W1, 0, D, axis=0)),
        context_W=T.slice(W1, D, None, axis=0),
    )


Features = Union[ImageFeatures, PreparedFeatures]


def _prepared(features: Features, params) -> PreparedFeatures:
    return features if isinstance(features, PreparedFeatures) else prepare_features(features, params)


# --------------------------------------------------------------------------
# sub-modules


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Standard LSTM step; gate blocks of ``W`` are ordered input, forget, output, cell."""
    H = h.shape[1]
    gates = T.add(T.matmul(T.concat([x, h]), W), b)
    ifo = T.sigmoid(T.slice(gates, 0, 3 * H))
    i = T.slice(ifo, 0, H)
    f = T.slice(ifo, H, 2 * H)
    o = T.slice(ifo, 2 * H, 3 * H)
    g = T.tanh(T.slice(gates, 3 * H, 4 * H))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def embed_word(token_id: int, params: dict[str, Tensor]) -> Tensor:
    W = params["embed.W"]
    V = W.shape[0]
    if not 0 <= int(token_id) < V:
        raise ValueError(f"token id {token_id} outside vocabulary of size {V}")
    return T.slice(W, int(token_id), int(token_id) + 1, axis=0)


def language_lstm_step(prev_embedding: Tensor, state: DecoderState,
                       params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    return lstm_cell(prev_embedding, state.h1, state.c1, params["lang_lstm.W"], params["lang_lstm.b"])


def attention_scores(regions, mean, h1: Tensor, h2_prev: Tensor, params: dict[str, Tensor],
                     prepared: PreparedFeatures | None = None) -> Tensor:
    """Score each region with the tanh MLP over ``(v_k, mean, h1, h2_prev)``.

    Returns a ``[1, n]`` row. The first layer is applied blockwise: the
    region block is shared by all rows, the context block is computed once
    and added to every row.
    """
    if prepared is None:
        feats = ImageFeatures(_raw(regions), np.asarray(_raw(mean)).reshape(-1))
        prepared = prepare_features(feats, params)
    ctx = T.concat([prepared.mean, h1, h2_prev])
    ctx_proj = T.add(T.matmul(ctx, prepared.context_W), params["f_att.b1"])
    hidden = T.tanh(T.add(prepared.region_proj, T.matmul(prepared.ones, ctx_proj)))
    e = T.add(T.matmul(hidden, params["f_att.W2"]), params["f_att.b2"])
    return T.transpose(e)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def attention_weights(e: Tensor) -> Tensor:
    return T.softmax_lastdim(e)


def attention_vector(alpha: Tensor, regions: Tensor) -> Tensor:
    if alpha.shape[-1] != regions.shape[0]:
        raise T.ShapeError(f"attention_vector: {alpha.shape[-1]} weights for {regions.shape[0]} regions")
    return T.matmul(alpha, regions)


def attention_lstm_step(a: Tensor, h1: Tensor, state: DecoderState,
                        params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    x = T.concat([a, h1])
    return lstm_cell(x, state.h2, state.c2, params["att_lstm.W"], params["att_lstm.b"])


def output_distribution(mean: Tensor, h1: Tensor, h2: Tensor, params: dict[str, Tensor]) -> Tensor:
    x = T.concat([mean, h1, h2])
    hidden = T.relu(T.add(T.matmul(x, params["f_out.W1"]), params["f_out.b1"]))
    logits = T.add(T.matmul(hidden, params["f_out.W2"]), params["f_out.b2"])
    return T.softmax_lastdim(logits)


def decode_step(prev_token: int, features: Features, state: DecoderState,
                params: dict[str, Tensor], n_attention: int = 1
                ) -> tuple[Tensor, DecoderState, AttentionTrace]:
    """Predict the next word: one language step, ``n_attention`` attention
    steps (all reading the same language state), then the output module."""
    if n_attention < 1:
        raise ValueError(f"n_attention must be >= 1, got {n_attention}")
    prep = _prepared(features, params)
    h1, c1 = language_lstm_step(embed_word(prev_token, params), state, params)
    st = replace(state, h1=h1, c1=c1, i=state.i + 1)
    trace = AttentionTrace()
    for _ in range(n_attention):
        e = attention_scores(prep.regions, prep.mean, h1, st.h2, params, prepared=prep)
        alpha = attention_weights(e)
        a = attention_vector(alpha, prep.regions)
        h2, c2 = attention_lstm_step(a, h1, st, params)
        st = replace(st, h2=h2, c2=c2, j=st.j + 1)
        trace.weights.append(alpha.data.reshape(-1).copy())
    probs = output_distribution(prep.mean, h1, st.h2, params)
    return probs, st, trace


class CaptionModel:
    """Configuration plus parameters, with convenience wrappers."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def dtype(self):
        return self.params["embed.W"].data.dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def initial_state(self) -> DecoderState:
        return initial_state(self.config, self.dtype)

    def prepare(self, features: Features) -> PreparedFeatures:
        return _prepared(features, self.params)

    def decode_step(self, prev_token: int, features: Features, state: DecoderState,
                    n_attention: int = 1):
        return decode_step(prev_token, features, state, self.params, n_attention)

    def start(self, features: Features) -> tuple[PreparedFeatures, DecoderState, int]:
        return self.prepare(features), self.initial_state(), BOS

    def copy(self) -> "CaptionModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return CaptionModel(self.config, params)
