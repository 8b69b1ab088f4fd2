"""Joint next-token training of all heads under a selection loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import head_probs
from .ensemble import GammtParams, SelectionMechanism, select
from .errors import ConfigError, ContractViolation, NumericError, TrainingDiverged

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 1
    seed: int = 0
    selection: SelectionMechanism = field(default_factory=SelectionMechanism.max)
    grad_clip: float | None = None
    log_every: int = 1

    def __post_init__(self):
        # lr == 0 is allowed: it is the null-update check
        if not self.lr >= 0.0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")


def _target_values(probs, x):
    x = np.asarray(x, dtype=np.int64)
    if x.size < 2:
        raise ContractViolation(f"loss needs a sequence of length >= 2, got {x.size}")
    cols = np.arange(x.size - 1)
    targets = x[1:]
    values = np.stack([_data(p)[targets, cols] for p in probs])
    return values, targets, cols


def _data(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def choose_heads(probs, x, S: SelectionMechanism, rng=None, draws=None) -> np.ndarray:
    """The head selected at every predicted position of ``x``.

    Random selection takes one fresh draw per position from ``rng`` unless
    explicit ``draws`` are pinned by the caller.
    """
    values, _, cols = _target_values(probs, x)
    M = len(probs)
    if not S.is_max:
        if draws is None:
            if rng is None:
                raise ContractViolation("random selection needs an rng or pinned draws")
            draws = [S.draw(rng, M) for _ in cols]
        if len(draws) != cols.size:
            raise ContractViolation(f"{len(draws)} draws for {cols.size} positions")
    chosen = np.empty(cols.size, dtype=np.int64)
    for t in cols:
        _, chosen[t] = select(S, values[:, t], None if S.is_max else draws[t])
    return chosen


def loss_from_probs(probs, x, S: SelectionMechanism, rng=None, draws=None) -> Tensor:
    """Negative log of the selected probability, summed over positions.

    Position ``t`` scores the target ``x[t+1]`` in column ``t``; only the
    selected head's entry enters the loss, so only it receives gradient.
    """
    chosen = choose_heads(probs, x, S, rng, draws)
    _, targets, cols = _target_values(probs, x)
    loss = None
    for m, p in enumerate(probs):
        mask = chosen == m
        if not mask.any():
            continue
        picked = ad.index(p, targets[mask], cols[mask])
        term = ad.total(ad.log(picked, floor=PROB_FLOOR))
        loss = term if loss is None else ad.add(loss, term)
    return ad.scale(loss, -1.0)


def sequence_cross_entropy(p: np.ndarray, x) -> float:
    """Plain next-token cross-entropy of a single probability matrix."""
    x = np.asarray(x)
    return float(-sum(math.log(max(p[x[t + 1], t], PROB_FLOOR)) for t in range(x.size - 1)))


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for head in grads for g in head.values()))


def train_step(params: GammtParams, x, config: TrainConfig, rng, step: int = 0):
    """One forward/backward pass; returns (loss value, per-head gradient dicts)."""
    tape = ad.Tape()
    bound = [h.bind(tape) for h in params.heads]
    probs = []
    for m, (head, w) in enumerate(zip(params.heads, bound)):
        try:
            probs.append(head_probs(x, w, head.config))
        except NumericError:
            raise TrainingDiverged(step, m, "activation") from None
    try:
        loss = loss_from_probs(probs, x, config.selection, rng)
    except NumericError:
        raise TrainingDiverged(step, -1) from None
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(step, -1)
    leaf_grads = tape.backward(loss)
    grads = []
    for m, w in enumerate(bound):
        g = {k: leaf_grads[t.node].data for k, t in w.items()}
        if not all(np.all(np.isfinite(v)) for v in g.values()):
            raise TrainingDiverged(step, m, "gradient")
        grads.append(g)
    return value, grads


def train(dataset, params: GammtParams, config: TrainConfig, log: TextIO | None = None):
    """Plain SGD, one update per sequence, ``config.epochs`` passes in order.

    Returns the trained parameters (a copy; ``params`` is untouched) and the
    loss of every step.  With ``log`` set, CSV rows
    ``step,epoch,seq_index,loss`` are written whenever ``log_every``
    divides the 1-based step number.
    """
    dataset = [np.asarray(x, dtype=np.int64) for x in dataset]
    if not dataset:
        raise ContractViolation("training needs a non-empty dataset")
    for i, x in enumerate(dataset):
        if not 2 <= x.size <= params.l_max:
            raise ContractViolation(
                f"sequence {i} has length {x.size}, outside [2, {params.l_max}]")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    history = []
    if log is not None:
        log.write("step,epoch,seq_index,loss\n")
    step = 0
    for epoch in range(config.epochs):
        for i, x in enumerate(dataset):
            step += 1
            value, grads = train_step(params, x, config, rng, step)
            history.append(value)
            factor = config.lr
            if config.grad_clip is not None:
                norm = _grad_norm(grads)
                if norm > config.grad_clip:
                    factor *= config.grad_clip / norm
            if factor != 0.0:
                for head, g in zip(params.heads, grads):
                    for k, w in head.weights.items():
                        w -= factor * g[k]
            if log is not None and step % config.log_every == 0:
                log.write(f"{step},{epoch + 1},{i},{value!r}\n")
    return params, history
