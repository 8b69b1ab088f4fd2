"""Autoregressive generation with temperature sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensemble import GammtParams, SelectionMechanism, categorical, forward_numpy
from .errors import ConfigError, ContractViolation, IdRangeError, SequenceLengthError


@dataclass(frozen=True)
class GenConfig:
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0
    selection: SelectionMechanism = field(default_factory=SelectionMechanism.max)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


def temper(p, tau: float) -> np.ndarray:
    """``q ∝ p ** (1/tau)``, computed in log space; zero entries stay zero."""
    p = np.asarray(p, dtype=np.float64)
    if not tau > 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    if p.ndim != 1 or np.any(p < 0) or not np.any(p > 0):
        raise ContractViolation("temper needs a non-negative, non-zero probability vector")
    live = p > 0
    logq = np.full(p.shape, -np.inf)
    logq[live] = np.log(p[live]) / tau
    logq -= logq[live].max()
    q = np.where(live, np.exp(logq), 0.0)
    return q / q.sum()


def sample(q, rng: np.random.Generator) -> int:
    return categorical(q, rng.random())


def generate(prompt, params: GammtParams, config: GenConfig, eos_id: int | None = None,
             trace: list | None = None) -> list[int]:
    """Extend ``prompt`` until eos, the token cap, or the context limit.

    Random selection draws a head and then samples from it.  Max selection
    samples one candidate per head and keeps the candidate whose tempered
    probability is largest (lowest head on ties).  Draw order is fixed so a
    seed reproduces the output exactly.  The head used at each step is
    appended to ``trace`` when one is given.
    """
    x = [int(i) for i in prompt]
    if not 1 <= len(x) < params.l_max:
        raise SequenceLengthError(f"prompt length {len(x)} outside [1, {params.l_max})")
    for i in x:
        if not 0 <= i < params.n_vocab:
            raise IdRangeError(f"prompt id {i} outside [0, {params.n_vocab})")
    if eos_id is None:
        eos_id = params.n_vocab - 1
    S = config.selection
    M = params.n_heads
    rng = np.random.default_rng(config.seed)
    for _ in range(config.max_new_tokens):
        if len(x) >= params.l_max:
            break
        last = [p[:, -1] for p in forward_numpy(x, params)]
        if S.is_max:
            best_q, y, u = -1.0, None, None
            for m in range(M):
                q = temper(last[m], config.temperature)
                y_m = sample(q, rng)
                if q[y_m] > best_q:
                    best_q, y, u = q[y_m], y_m, m
        else:
            u = S.draw(rng, M)
            y = sample(temper(last[u], config.temperature), rng)
        if trace is not None:
            trace.append(u)
        x.append(y)
        if y == eos_id:
            break
    return x
