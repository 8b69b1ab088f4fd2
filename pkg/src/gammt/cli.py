"""Command-line entry point: ``gammt {train,generate,verify,inspect}``.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import ambiguity
from .checkpoint import read_checkpoint, save_checkpoint
from .ensemble import SelectionMechanism, init_gammt
from .errors import (BudgetExceeded, CheckpointFormatError, ConfigError, ContractViolation,
                     GammtError, IdRangeError, UnknownTokenError)
from .inference import generate
from .config import load_config
from .tokenizer import Vocabulary, build_vocab, encode_corpus
from .training import train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(GammtError):
    pass


def _parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, _parse_set(args.set))
    if cfg.corpus is None:
        raise ConfigError("train needs 'corpus' in the config")
    try:
        corpus = Path(cfg.corpus).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"corpus file not found: {cfg.corpus}") from None
    if cfg.selection_weights is not None and len(cfg.selection_weights) != cfg.heads:
        raise ConfigError(f"selection_weights needs {cfg.heads} entries, one per head")
    vocab = build_vocab(corpus)
    dataset = encode_corpus(corpus, vocab)
    for i, x in enumerate(dataset):
        if not 2 <= len(x) <= cfg.l_max:
            raise ConfigError(f"corpus line {i + 1} encodes to {len(x)} tokens; need 2..{cfg.l_max}")
    params = init_gammt(cfg.decoder_configs(vocab.n_vocab), cfg.seed)
    trained, history = train(dataset, params, cfg.train_config(), log=sys.stdout)
    vocab.save(cfg.vocab)
    save_checkpoint(trained, cfg.checkpoint, {
        "selection": str(cfg.selection_mechanism()),
        "seed": cfg.seed,
        "lr": repr(cfg.lr),
        "epochs": cfg.epochs,
        "vocab_sha256": vocab.digest(),
    })
    print(f"# trained {len(history)} steps, final loss {history[-1]:.6f}", file=sys.stderr)
    return EXIT_OK


def _header_selection(header: dict) -> SelectionMechanism:
    value = header.get("selection", "max")
    if value.startswith("random("):
        weights = [float(w) for w in value[len("random("):-1].split(",")]
        return SelectionMechanism.random(weights)
    return SelectionMechanism("random" if value == "random" else "max")


def cmd_generate(args) -> int:
    overrides = _parse_set(args.set)
    for key in ("max_new_tokens", "temperature", "seed", "samples"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides)
    params, header = read_checkpoint(cfg.checkpoint)
    vocab = Vocabulary.load(cfg.vocab)
    if "vocab_sha256" in header and header["vocab_sha256"] != vocab.digest():
        raise ConfigError(f"vocabulary {cfg.vocab} does not match the checkpoint")
    if vocab.n_vocab != params.n_vocab:
        raise ConfigError(f"vocabulary has {vocab.n_vocab} tokens, checkpoint expects {params.n_vocab}")
    if "selection" in cfg.explicit:
        if cfg.selection_weights is not None and len(cfg.selection_weights) != params.n_heads:
            raise ConfigError(f"selection_weights needs {params.n_heads} entries for this checkpoint")
        selection = SelectionMechanism.random(cfg.selection_weights) \
            if cfg.selection == "random" else SelectionMechanism.max()
    else:
        selection = _header_selection(header)
    prompt = vocab.encode(args.prompt)
    for k in range(cfg.samples):
        gen = replace(cfg.gen_config(selection), seed=cfg.seed + k)
        out = generate(prompt, params, gen, eos_id=vocab.eos_id)
        print(vocab.decode(out))
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        text = Path(args.scenario).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {args.scenario}") from None
    family, extra = ambiguity.parse_scenario(text)
    budget = args.budget or extra.get("budget", ambiguity.DEFAULT_BUDGET)
    result = ambiguity.verify_family(family, budget)
    print(f"scenario K={family.K} T={family.T} set sizes "
          f"{[len(step[0]) for step in family.options]}")
    for line in result.lines():
        print(line)
    return EXIT_OK if result.passed else EXIT_VERIFY


def cmd_inspect(args) -> int:
    params, header = read_checkpoint(args.checkpoint)
    for key, value in header.items():
        print(f"{key}={value}")
    for m, head in enumerate(params.heads):
        for name, w in head.weights.items():
            print(f"head{m}.{name}\t{'x'.join(str(d) for d in w.shape)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gammt", description="Parallel transformer decoders joined by a selection mechanism.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="continue a prompt with a trained model")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="check the rectangularity suite on a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="print a checkpoint header and tensor shapes")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"gammt {args.command}: error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UsageError, UnknownTokenError, IdRangeError) as exc:
        print(f"gammt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointFormatError, BudgetExceeded, ContractViolation, GammtError, OSError) as exc:
        print(f"gammt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
