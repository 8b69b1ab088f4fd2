"""M parallel decoder heads and the rule that selects among them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .decoder import DecoderConfig, DecoderParams, head_probs, init_decoder
from .errors import ConfigError, ContractViolation


@dataclass
class GammtParams:
    heads: list[DecoderParams]

    def __post_init__(self):
        if not self.heads:
            raise ConfigError("a GAMMT model needs at least one head")
        first = self.heads[0].config
        for m, head in enumerate(self.heads):
            if (head.config.n_vocab, head.config.l_max) != (first.n_vocab, first.l_max):
                raise ConfigError(f"head {m} disagrees with head 0 on n_vocab/l_max")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def n_vocab(self) -> int:
        return self.heads[0].config.n_vocab

    @property
    def l_max(self) -> int:
        return self.heads[0].config.l_max

    def copy(self) -> GammtParams:
        return GammtParams([h.copy() for h in self.heads])


def init_gammt(configs: list[DecoderConfig], seed: int) -> GammtParams:
    """Independently initialised heads, drawn in head order from one stream."""
    rng = np.random.default_rng(seed)
    return GammtParams([init_decoder(c, rng) for c in configs])


def categorical(weights, u: float) -> int:
    """Inverse-CDF index for a uniform draw ``u`` in [0, 1)."""
    cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # guard against u*total landing on the last edge through rounding
    while i >= len(cdf) or weights[i] <= 0.0:
        i -= 1
    return i


@dataclass(frozen=True)
class SelectionMechanism:
    kind: str = "max"
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("max", "random"):
            raise ConfigError(f"selection must be 'max' or 'random', got {self.kind!r}")
        if self.weights is not None:
            if self.kind != "random":
                raise ConfigError("selection weights only apply to random selection")
            w = np.asarray(self.weights, dtype=np.float64)
            if w.ndim != 1 or w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigError(f"selection weights must be a probability vector, got {self.weights}")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @classmethod
    def max(cls) -> SelectionMechanism:
        return cls("max")

    @classmethod
    def random(cls, weights=None) -> SelectionMechanism:
        return cls("random", None if weights is None else tuple(weights))

    @property
    def is_max(self) -> bool:
        return self.kind == "max"

    def head_weights(self, n_heads: int) -> np.ndarray:
        if self.weights is None:
            return np.full(n_heads, 1.0 / n_heads)
        if len(self.weights) != n_heads:
            raise ContractViolation(
                f"selection has {len(self.weights)} weights for {n_heads} heads")
        return np.asarray(self.weights)

    def draw(self, rng: np.random.Generator, n_heads: int) -> int:
        """Sample a head index; consumes exactly one uniform from ``rng``."""
        return categorical(self.head_weights(n_heads), rng.random())

    def __str__(self):
        if self.kind == "random" and self.weights is not None:
            return "random(" + ",".join(repr(w) for w in self.weights) + ")"
        return self.kind


def select(S: SelectionMechanism, values, draw: int | None = None) -> tuple[float, int]:
    """Combine per-head probabilities into one, returning it with the chosen head.

    Max picks the largest value (lowest index on ties); random returns the
    value of the head ``draw`` supplied by the caller.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ContractViolation("select needs a non-empty vector of values")
    if values.size == 1:
        return float(values[0]), 0
    if S.is_max:
        i = int(np.argmax(values))
    else:
        if draw is None:
            raise ContractViolation("random selection needs a drawn head index")
        i = int(draw)
        if not 0 <= i < values.size:
            raise ContractViolation(f"drawn head {i} outside [0, {values.size})")
    return float(values[i]), i


def dtransformers_forward(x, params: GammtParams, bound=None) -> list[Tensor]:
    """Next-token probability matrices from every head, in head order.

    ``bound`` optionally supplies per-head weight tensors (e.g. tape leaves);
    otherwise the weights are used as constants.
    """
    if bound is None:
        bound = [h.bind() for h in params.heads]
    return [head_probs(x, w, h.config) for h, w in zip(params.heads, bound)]


def forward_numpy(x, params: GammtParams) -> list[np.ndarray]:
    return [p.data for p in dtransformers_forward(x, params)]

