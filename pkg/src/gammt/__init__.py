"""Generative ambiguity modelling with multiple parallel transformer decoders."""
from .autodiff import Tape, Tensor, apply_primitive, backward
from .decoder import DecoderConfig, DecoderParams, decoder_forward, embed, init_decoder, next_token_probs
from .ensemble import GammtParams, SelectionMechanism, dtransformers_forward, init_gammt, select
from .inference import GenConfig, generate, temper
from .tokenizer import Vocabulary, build_vocab
from .training import TrainConfig, loss_from_probs, train

__version__ = "0.1.0"
