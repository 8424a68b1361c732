"""Two-LSTM merge image captioning with a variable number of attention steps per word."""

from .data import BOS, EOS, PAD, UNK, Vocabulary, build_vocab, generate_synthetic, SyntheticWorld
from .model import CaptionModel, ModelConfig, decode_step, param_count
from .inference import beam_search, greedy_decode
from .metrics import bleu4, cider_d, rouge_l
from .training import TrainConfig, train

__all__ = [
    "BOS", "EOS", "PAD", "UNK", "Vocabulary", "build_vocab", "generate_synthetic", "SyntheticWorld",
    "CaptionModel", "ModelConfig", "decode_step", "param_count",
    "beam_search", "greedy_decode",
    "bleu4", "cider_d", "rouge_l",
    "TrainConfig", "train",
]

__version__ = "0.1.0"
