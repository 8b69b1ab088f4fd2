"""Character-level vocabulary with a reserved end-of-sequence token."""
from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError, ContractViolation, IdRangeError, UnknownTokenError

EOS = "<eos>"


class Vocabulary:
    """Immutable bijection between tokens and dense ids ``0 .. n_vocab-1``.

    The end-of-sequence token is always the last id.
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens or tokens[-1] != EOS:
            raise ContractViolation("vocabulary must end with the eos token")
        if tokens.count(EOS) != 1:
            raise ContractViolation("eos token must appear exactly once")
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("vocabulary tokens must be distinct")
        self._tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    @property
    def tokens(self) -> tuple:
        return self._tokens

    @property
    def eos_id(self) -> int:
        return len(self._tokens) - 1

    @property
    def n_vocab(self) -> int:
        return len(self._tokens)

    def __len__(self):
        return len(self._tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self):
        return hash(self._tokens)

    def __repr__(self):
        return f"Vocabulary({list(self._tokens)!r})"

    def encode(self, text: str) -> list[int]:
        out = []
        for offset, ch in enumerate(text):
            i = self._ids.get(ch)
            if i is None or i == self.eos_id:
                raise UnknownTokenError(ch, offset)
            out.append(i)
        return out

    def decode(self, ids) -> str:
        """Text for ``ids``; the eos token renders as nothing."""
        chars = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.n_vocab:
                raise IdRangeError(f"token id {i} outside [0, {self.n_vocab})")
            if i != self.eos_id:
                chars.append(self._tokens[i])
        return "".join(chars)

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self._tokens)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        from .checkpoint import atomic_write

        atomic_write(path, self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path) -> Vocabulary:
        text = Path(path).read_text(encoding="utf-8")
        if not text.endswith("\n"):
            raise ConfigError(f"vocabulary file {path} is not newline-terminated")
        return cls(text[:-1].split("\n"))


def build_vocab(corpus: str) -> Vocabulary:
    """Sorted distinct characters of ``corpus`` (newlines excluded) plus eos."""
    chars = sorted(set(corpus) - {"\n", "\r"})
    if not chars:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(chars + [EOS])


def corpus_lines(corpus: str) -> list[str]:
    return [line for line in corpus.splitlines() if line]


def encode_corpus(corpus: str, vocab: Vocabulary) -> list[list[int]]:
    """Every non-empty line of ``corpus`` encoded and terminated with eos."""
    return [vocab.encode(line) + [vocab.eos_id] for line in corpus_lines(corpus)]
