"""A single causal transformer decoder head.

Activations are laid out with features along rows and positions along
columns, so a sequence of length ``n`` embeds to a ``(d_e, n)`` matrix and
the head's output is an ``(n_vocab, n)`` column-stochastic matrix whose
column ``t`` is the next-token law given tokens ``0..t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, IdRangeError, SequenceLengthError, ShapeError

INIT_STD = 0.02


@dataclass(frozen=True)
class DecoderConfig:
    n_vocab: int
    l_max: int
    d_e: int = 16
    d_mlp: int = 64
    n_layers: int = 1
    n_heads: int = 2
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("n_vocab", "l_max", "d_e", "d_mlp", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be non-negative, got {self.n_layers}")
        if self.d_e % self.n_heads:
            raise ConfigError(f"d_e={self.d_e} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"activation must be gelu or relu, got {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_e // self.n_heads

    def param_shapes(self) -> dict[str, tuple]:
        """Name and shape of every parameter, in canonical order."""
        d, dh = self.d_e, self.d_head
        shapes = {"wte": (d, self.n_vocab), "wpe": (d, self.l_max)}
        for layer in range(self.n_layers):
            p = f"layer{layer}."
            shapes[p + "ln1.gain"] = (d,)
            shapes[p + "ln1.offset"] = (d,)
            for h in range(self.n_heads):
                a = f"{p}attn{h}."
                shapes[a + "wq"] = (dh, d)
                shapes[a + "wk"] = (dh, d)
                shapes[a + "wv"] = (dh, d)
                shapes[a + "wo"] = (d, dh)
            shapes[p + "ln2.gain"] = (d,)
            shapes[p + "ln2.offset"] = (d,)
            shapes[p + "mlp.w1"] = (self.d_mlp, d)
            shapes[p + "mlp.b1"] = (self.d_mlp, 1)
            shapes[p + "mlp.w2"] = (d, self.d_mlp)
            shapes[p + "mlp.b2"] = (d, 1)
        shapes["lnf.gain"] = (d,)
        shapes["lnf.offset"] = (d,)
        shapes["unembed"] = (self.n_vocab, d)
        return shapes


@dataclass
class DecoderParams:
    config: DecoderConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ShapeError(f"decoder params (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            w = np.asarray(self.weights[name], dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"decoder param {name}", w.shape, shape)
            self.weights[name] = w

    def copy(self) -> DecoderParams:
        return DecoderParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def bind(self, tape: ad.Tape | None = None) -> dict[str, Tensor]:
        """Wrap the weights as tensors, as tape leaves when ``tape`` is given."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.weights.items()}
        return {k: tape.leaf(v) for k, v in self.weights.items()}


def init_decoder(config: DecoderConfig, rng: np.random.Generator) -> DecoderParams:
    weights = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".gain"):
            weights[name] = np.ones(shape)
        elif name.endswith(".offset") or name.endswith((".b1", ".b2")):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(0.0, INIT_STD, size=shape)
    return DecoderParams(config, weights)


def check_ids(x, config: DecoderConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 1 or not 1 <= x.size <= config.l_max:
        raise SequenceLengthError(f"sequence length {x.size} outside [1, {config.l_max}]")
    if x.min() < 0 or x.max() >= config.n_vocab:
        bad = int(x[(x < 0) | (x >= config.n_vocab)][0])
        raise IdRangeError(f"token id {bad} outside [0, {config.n_vocab})")
    return x


def embed(x, w: dict[str, Tensor], config: DecoderConfig) -> Tensor:
    """Token plus learned positional embedding, one column per position."""
    x = check_ids(x, config)
    return ad.add(ad.embedding_lookup(w["wte"], x),
                  ad.embedding_lookup(w["wpe"], np.arange(x.size)))


def _attention(h: Tensor, w, prefix: str, config: DecoderConfig) -> Tensor:
    scale = 1.0 / math.sqrt(config.d_head)
    out = None
    for head in range(config.n_heads):
        a = f"{prefix}attn{head}."
        q = ad.matmul(w[a + "wq"], h)
        k = ad.matmul(w[a + "wk"], h)
        v = ad.matmul(w[a + "wv"], h)
        # rows are query positions, columns key positions
        scores = ad.scale(ad.matmul(ad.transpose(q), k), scale)
        attn = ad.row_softmax(scores, causal=True)
        mixed = ad.matmul(v, ad.transpose(attn))
        proj = ad.matmul(w[a + "wo"], mixed)
        out = proj if out is None else ad.add(out, proj)
    return out


def _mlp(h: Tensor, w, prefix: str, config: DecoderConfig) -> Tensor:
    hidden = ad.add(ad.matmul(w[prefix + "mlp.w1"], h), w[prefix + "mlp.b1"])
    hidden = ad.activation(hidden, config.activation)
    return ad.add(ad.matmul(w[prefix + "mlp.w2"], hidden), w[prefix + "mlp.b2"])


def decoder_forward(X0: Tensor, w: dict[str, Tensor], config: DecoderConfig) -> Tensor:
    """Pre-norm residual stack followed by the final layer norm."""
    if X0.data.ndim != 2 or X0.shape[0] != config.d_e:
        raise ShapeError("decoder_forward", X0.shape, (config.d_e, "n"))
    X = X0
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        h = ad.layer_norm(X, w[p + "ln1.gain"], w[p + "ln1.offset"])
        X = ad.add(X, _attention(h, w, p, config))
        h = ad.layer_norm(X, w[p + "ln2.gain"], w[p + "ln2.offset"])
        X = ad.add(X, _mlp(h, w, p, config))
    return ad.layer_norm(X, w["lnf.gain"], w["lnf.offset"])


def next_token_probs(X: Tensor, unembed: Tensor) -> Tensor:
    """Column-wise softmax of ``unembed @ X``."""
    logits = ad.matmul(unembed, X)
    return ad.transpose(ad.row_softmax(ad.transpose(logits)))


def head_probs(x, w: dict[str, Tensor], config: DecoderConfig) -> Tensor:
    X = decoder_forward(embed(x, w, config), w, config)
    return next_token_probs(X, w["unembed"])
