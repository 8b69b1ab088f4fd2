import numpy as np
import pytest

from gammt.checkpoint import load_checkpoint, save_checkpoint
from gammt.cli import run
from gammt.ensemble import init_gammt
from gammt.decoder import DecoderConfig
from gammt.tokenizer import Vocabulary, build_vocab

SCENARIO = """\
K = 2
T = 2
L1.0 = 0.3, 0.7
L1.1 = 0.6, 0.4
L2.0 = 0.3, 0.7
L2.1 = 0.6, 0.4
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "corpus.txt").write_text("\n".join(["abababab"] * 6) + "\n")
    (tmp_path / "run.cfg").write_text(
        "# small abab run\n"
        "corpus = corpus.txt\n"
        "heads = 2\nd_e = 8\nd_mlp = 16\nl_max = 12\n"
        "epochs = 2\nlr = 0.05\nseed = 3\nmax_new_tokens = 6\n")
    return tmp_path


def _single_line_error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1 and "Traceback" not in err
    return lines[0]


def test_train_then_generate(workdir, capsys):
    cfg = str(workdir / "run.cfg")
    assert run(["train", "--config", cfg]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "step,epoch,seq_index,loss" and len(out) == 13
    assert (workdir / "model.ckpt").exists() and (workdir / "vocab.txt").exists()
    assert run(["generate", "--config", cfg, "--prompt", "ab"]) == 0
    text = capsys.readouterr().out.strip()
    assert text.startswith("ab") and set(text) <= {"a", "b"}
    assert len(text) <= 2 + 6


def test_outputs_are_deterministic(workdir, capsys):
    cfg = str(workdir / "run.cfg")
    run(["train", "--config", cfg])
    first = (workdir / "model.ckpt").read_bytes()
    run(["train", "--config", cfg])
    assert (workdir / "model.ckpt").read_bytes() == first
    capsys.readouterr()
    gens = []
    for _ in range(2):
        run(["generate", "--config", cfg, "--prompt", "a", "--seed", "5", "--temperature", "1.5"])
        gens.append(capsys.readouterr().out)
    assert gens[0] == gens[1]


def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert run(["train", "--config", str(missing)]) == 2
    assert str(missing) in _single_line_error(capsys.readouterr().err)


def test_unknown_config_key(workdir, capsys):
    (workdir / "bad.cfg").write_text("corpus = corpus.txt\nwidth = 3\n")
    assert run(["train", "--config", str(workdir / "bad.cfg")]) == 2
    assert "width" in _single_line_error(capsys.readouterr().err)


def test_usage_error_exits_2(capsys):
    assert run(["frobnicate"]) == 2
    assert run(["train"]) == 2


def test_unknown_prompt_character(workdir, capsys):
    cfg = str(workdir / "run.cfg")
    run(["train", "--config", cfg])
    capsys.readouterr()
    assert run(["generate", "--config", cfg, "--prompt", "abz"]) == 2
    assert "'z'" in _single_line_error(capsys.readouterr().err)


def test_truncated_checkpoint_fails(workdir, capsys):
    cfg = str(workdir / "run.cfg")
    run(["train", "--config", cfg])
    ckpt = workdir / "model.ckpt"
    ckpt.write_bytes(ckpt.read_bytes()[:-7])
    capsys.readouterr()
    assert run(["generate", "--config", cfg, "--prompt", "a"]) != 0
    assert "byte offset" in _single_line_error(capsys.readouterr().err)
    assert run(["inspect", "--checkpoint", str(ckpt)]) != 0


def test_header_wins_over_config(tmp_path, capsys):
    vocab = build_vocab("abc")
    vocab.save(tmp_path / "vocab.txt")
    cfg = DecoderConfig(n_vocab=vocab.n_vocab, l_max=10, d_e=8, d_mlp=16)
    save_checkpoint(init_gammt([cfg] * 3, 0), tmp_path / "model.ckpt",
                    {"vocab_sha256": vocab.digest()})
    (tmp_path / "gen.cfg").write_text("heads = 2\nd_e = 16\nmax_new_tokens = 4\n")
    assert run(["generate", "--config", str(tmp_path / "gen.cfg"), "--prompt", "ab"]) == 0
    assert capsys.readouterr().out.startswith("ab")
    assert load_checkpoint(tmp_path / "model.ckpt").n_heads == 3


def test_inspect(workdir, capsys):
    run(["train", "--config", str(workdir / "run.cfg")])
    capsys.readouterr()
    assert run(["inspect", "--checkpoint", str(workdir / "model.ckpt")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "heads=2" in out and "selection=max" in out
    assert "head1.unembed\t3x8" in out


def test_verify_passes(tmp_path, capsys):
    (tmp_path / "s.txt").write_text(SCENARIO)
    assert run(["verify", "--scenario", str(tmp_path / "s.txt")]) == 0
    out = capsys.readouterr().out
    assert "enumeration count 8" in out and out.strip().endswith("PASS")


def test_verify_budget_is_a_runtime_error(tmp_path, capsys):
    (tmp_path / "s.txt").write_text(SCENARIO)
    assert run(["verify", "--scenario", str(tmp_path / "s.txt"), "--budget", "4"]) == 1
    assert "8" in _single_line_error(capsys.readouterr().err)


def test_verify_bad_scenario(tmp_path, capsys):
    (tmp_path / "s.txt").write_text("K = 2\nT = 1\nL1.0 = 0.9,0.9\n")
    assert run(["verify", "--scenario", str(tmp_path / "s.txt")]) == 2
    _single_line_error(capsys.readouterr().err)


def test_verify_failure_exits_3(tmp_path, capsys, monkeypatch):
    from gammt import ambiguity

    real = ambiguity.build_plm

    def drop_one(family, budget=ambiguity.DEFAULT_BUDGET):
        out = real(family, budget)
        return ambiguity.MeasureSet(out.measures[:-1], out.selections[:-1], out.enumerated)

    monkeypatch.setattr(ambiguity, "build_plm", drop_one)
    (tmp_path / "s.txt").write_text(SCENARIO)
    assert run(["verify", "--scenario", str(tmp_path / "s.txt")]) == 3
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_vocab_mismatch_is_rejected(workdir, capsys):
    cfg = str(workdir / "run.cfg")
    run(["train", "--config", cfg])
    Vocabulary(["a", "b", "c", "<eos>"]).save(workdir / "vocab.txt")
    capsys.readouterr()
    assert run(["generate", "--config", cfg, "--prompt", "a"]) == 2
    _single_line_error(capsys.readouterr().err)


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "gammt", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
