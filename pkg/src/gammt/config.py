"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .decoder import DecoderConfig
from .ensemble import SelectionMechanism
from .errors import ConfigError
from .inference import GenConfig
from .training import TrainConfig


def _int_list(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(","))


def _float_list(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(","))


def _opt_float(value: str):
    return None if value.lower() in ("", "none", "off") else float(value)


_PARSERS = {
    "corpus": str,
    "vocab": str,
    "checkpoint": str,
    "heads": int,
    "layers": _int_list,
    "attn_heads": _int_list,
    "d_e": int,
    "d_mlp": int,
    "l_max": int,
    "activation": str,
    "lr": float,
    "epochs": int,
    "grad_clip": _opt_float,
    "log_every": int,
    "selection": str,
    "selection_weights": _float_list,
    "seed": int,
    "temperature": float,
    "max_new_tokens": int,
    "samples": int,
}
_PATH_KEYS = ("corpus", "vocab", "checkpoint")


@dataclass
class RunConfig:
    corpus: str | None = None
    vocab: str = "vocab.txt"
    checkpoint: str = "model.ckpt"
    heads: int = 2
    layers: tuple = (1,)
    attn_heads: tuple = (2,)
    d_e: int = 16
    d_mlp: int = 64
    l_max: int = 64
    activation: str = "gelu"
    lr: float = 0.05
    epochs: int = 20
    grad_clip: float | None = None
    log_every: int = 1
    selection: str = "max"
    selection_weights: tuple | None = None
    seed: int = 0
    temperature: float = 1.0
    max_new_tokens: int = 64
    samples: int = 1
    explicit: frozenset = field(default_factory=frozenset, repr=False)

    def __post_init__(self):
        for name in ("heads", "d_e", "d_mlp", "l_max", "epochs", "log_every",
                     "max_new_tokens", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        for name in ("layers", "attn_heads"):
            values = getattr(self, name)
            if len(values) not in (1, self.heads):
                raise ConfigError(f"{name} needs 1 or {self.heads} entries, got {len(values)}")
        self.selection_mechanism()

    def selection_mechanism(self) -> SelectionMechanism:
        if self.selection == "max":
            if self.selection_weights is not None:
                raise ConfigError("selection_weights requires selection = random")
            return SelectionMechanism.max()
        if self.selection == "random":
            return SelectionMechanism.random(self.selection_weights)
        raise ConfigError(f"selection must be max or random, got {self.selection!r}")

    def _per_head(self, values) -> list[int]:
        return list(values) * self.heads if len(values) == 1 else list(values)

    def decoder_configs(self, n_vocab: int) -> list[DecoderConfig]:
        return [DecoderConfig(n_vocab=n_vocab, l_max=self.l_max, d_e=self.d_e, d_mlp=self.d_mlp,
                              n_layers=n, n_heads=h, activation=self.activation)
                for n, h in zip(self._per_head(self.layers), self._per_head(self.attn_heads))]

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, seed=self.seed,
                           selection=self.selection_mechanism(), grad_clip=self.grad_clip,
                           log_every=self.log_every)

    def gen_config(self, selection: SelectionMechanism | None = None) -> GenConfig:
        return GenConfig(temperature=self.temperature, max_new_tokens=self.max_new_tokens,
                         seed=self.seed, selection=selection or self.selection_mechanism())


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        pairs[key.strip()] = value.strip()
    return pairs


def build_config(pairs: dict[str, str]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)} - {"explicit"}
    values = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = _PARSERS[key](raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        values[key] = value
    try:
        return RunConfig(**values, explicit=frozenset(values))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file; ``overrides`` win over file values.

    Relative paths inside the file, and the default vocab and checkpoint
    paths, resolve against the file's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    base = path.parent
    resolved = {}
    for k, v in parse_pairs(text, str(path)).items():
        if k in _PATH_KEYS and not Path(v).is_absolute():
            v = str(base / v)
        resolved[k] = v
    resolved.update(overrides or {})
    cfg = build_config(resolved)
    for k in _PATH_KEYS:
        if k not in cfg.explicit and getattr(cfg, k) is not None:
            setattr(cfg, k, str(base / getattr(cfg, k)))
    return cfg
