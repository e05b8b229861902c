"""End-to-end command-line pipeline on a miniature corpus."""

import json
from pathlib import Path

import pytest

from chargraft.checkpoint import file_sha256, load_checkpoint, read_manifest
from chargraft.cli import main
from chargraft.fixtures import (
    build_word_inventory,
    make_pretrain_corpus,
    make_word_classification_fixture,
)
from chargraft.tasks import write_word_classification_file

ARCH = ["--d", "16", "--layers", "1", "--heads", "2", "--ff-dim", "24",
        "--max-seq-len", "32"]
CHAR_ARCH = ["--char-dim", "8", "--tok-channels", "6", "--detok-hidden", "10",
             "--detok-head-dim", "9", "--max-word-len", "16"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    lines = make_pretrain_corpus(seed=5, target_chars=6000)
    corpus.write_text("\n".join(lines) + "\n", encoding="utf-8")

    vocab = root / "vocab.txt"
    assert main(["train-tokenizer", "--corpus", str(corpus),
                 "--target-size", "110", "--out", str(vocab)]) == 0

    base = root / "base.ckpt"
    assert main(["pretrain", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--out", str(base), *ARCH, "--epochs", "1",
                 "--batch-size", "8", "--seed", "7"]) == 0

    twopt = root / "twopt.ckpt"
    assert main(["second-pretrain", "--corpus", str(corpus),
                 "--vocab", str(vocab), "--init", str(base),
                 "--out", str(twopt), *CHAR_ARCH, "--epochs", "1",
                 "--batch-size", "8", "--cycle-interval", "0",
                 "--seed", "7"]) == 0

    inv = build_word_inventory(80, seed=5)
    fx = make_word_classification_fixture({"train": 12, "dev": 6, "test": 6},
                                          seed=6, inventory=inv, context_len=3)
    for part, items in fx.items():
        write_word_classification_file(root / f"wc.{part}.tsv", items)
    return root, corpus, vocab, base, twopt


def test_tokenizer_and_snapshot(workspace):
    root, corpus, vocab, base, twopt = workspace
    assert vocab.exists()
    snap = json.loads((root / "vocab.txt.config.json").read_text())
    assert snap["command"] == "train-tokenizer"
    assert snap["resolved"]["target_size"] == 110
    assert snap["resolved"]["scheme"] == "continuation_mark"


def test_stats_writes_table_and_json(workspace, capsys):
    root, corpus, vocab, *_ = workspace
    out = root / "stats.json"
    assert main(["stats", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--out", str(out)]) == 0
    shown = capsys.readouterr().out
    assert "Token mass increase" in shown
    data = json.loads(out.read_text())
    stats = data["corpus.txt"]
    assert stats["word_tokens"] > 0 and 0 < stats["ttr"] < 1


def test_pretrain_outputs(workspace):
    root, corpus, vocab, base, twopt = workspace
    bundle = load_checkpoint(base)
    assert not bundle.has_char_modules
    manifest = read_manifest(base)
    assert manifest["vocab_sha256"] == file_sha256(vocab)
    assert Path(f"{base}.trajectory.tsv").exists()
    snap = json.loads((root / "base.ckpt.config.json").read_text())
    assert snap["resolved"]["model"]["d"] == 16


def test_second_pretrain_attaches_char_modules(workspace):
    root, corpus, vocab, base, twopt = workspace
    bundle = load_checkpoint(twopt)
    assert bundle.has_char_modules
    assert bundle.lm.config.d == 16
    # the grafted body starts from the plain checkpoint, so the two
    # checkpoints share every lm parameter name
    plain = load_checkpoint(base)
    assert {n for n, _ in plain.named_params()} <= \
        {n for n, _ in bundle.named_params()}


def test_finetune_and_eval_agree(workspace, capsys):
    root, corpus, vocab, base, twopt = workspace
    run = root / "run"
    assert main(["finetune", "--task-kind", "word_classification",
                 "--train", str(root / "wc.train.tsv"),
                 "--dev", str(root / "wc.dev.tsv"),
                 "--test", str(root / "wc.test.tsv"),
                 "--vocab", str(vocab), "--init", str(twopt),
                 "--out", str(run), "--setup", "stochastic", "--freeze-body",
                 "--epochs", "2", "--batch-size", "8", "--seed", "3"]) == 0
    shown = capsys.readouterr().out
    rows = [r.split("\t") for r in shown.strip().splitlines()]
    assert rows[0][0] == "task"
    test_rows = [r for r in rows[1:] if r[2] == "test"]
    assert len(test_rows) == 1
    for name in ("results.tsv", "model.ckpt", "head.npz", "head.json",
                 "config.json"):
        assert (run / name).exists()

    assert main(["eval", "--run", str(run),
                 "--data", str(root / "wc.test.tsv"),
                 "--partition", "test"]) == 0
    eval_rows = [r.split("\t")
                 for r in capsys.readouterr().out.strip().splitlines()]
    assert eval_rows[1][4] == test_rows[0][4]


def test_sample_detok_prints_words(workspace, capsys):
    root, corpus, vocab, base, twopt = workspace
    assert main(["sample-detok", "--init", str(twopt), "-n", "3",
                 "--seed", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert main(["sample-detok", "--init", str(base)]) == 1
    assert "character decoder" in capsys.readouterr().err


def test_param_diff_identical_is_all_zero(workspace, capsys):
    root, corpus, vocab, base, twopt = workspace
    assert main(["param-diff", str(base), str(base)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split()[0] == "parameter"
    values = {line.split()[-1] for line in lines[1:]}
    assert values == {"0"}
    # differing checkpoints produce at least one nonzero row
    assert main(["param-diff", str(base), str(base)]) == 0
    capsys.readouterr()


def test_vocab_diff_zero_on_identical(workspace, capsys):
    root, corpus, vocab, *_ = workspace
    assert main(["vocab-diff", str(vocab), str(vocab)]) == 0
    out = capsys.readouterr().out
    assert out.strip().split("\t")[1] == "0.000000"


def test_flags_override_config_file(workspace, tmp_path):
    root, corpus, vocab, *_ = workspace
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 2, "batch_size": 8, "d": 16,
                               "layers": 1, "heads": 2, "ff_dim": 24,
                               "max_seq_len": 32, "seed": 1}))
    out = tmp_path / "m.ckpt"
    assert main(["pretrain", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--config", str(cfg), "--out", str(out),
                 "--epochs", "1"]) == 0
    snap = json.loads((tmp_path / "m.ckpt.config.json").read_text())
    assert snap["resolved"]["train"]["epochs"] == 1
    assert snap["resolved"]["model"]["ff_dim"] == 24


def test_unknown_config_field_is_named(workspace, tmp_path, capsys):
    root, corpus, vocab, *_ = workspace
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"nonsense_knob": 5}))
    assert main(["pretrain", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--config", str(cfg), "--out", str(tmp_path / "x.ckpt")]) == 1
    assert "nonsense_knob" in capsys.readouterr().err


def test_invalid_field_value_is_reported(workspace, tmp_path, capsys):
    root, corpus, vocab, *_ = workspace
    assert main(["pretrain", "--corpus", str(corpus), "--vocab", str(vocab),
                 "--out", str(tmp_path / "x.ckpt"), "--d", "15", "--layers",
                 "1", "--heads", "2"]) == 1
    err = capsys.readouterr().err
    assert "d=15" in err and "heads=2" in err


def test_missing_file_is_reported(tmp_path, capsys):
    assert main(["stats", "--corpus", str(tmp_path / "nope.txt"),
                 "--vocab", str(tmp_path / "nope.vocab")]) == 1
    assert "nope" in capsys.readouterr().err


def test_vocab_mismatch_is_detected(workspace, tmp_path, capsys):
    root, corpus, vocab, base, twopt = workspace
    other = tmp_path / "other.vocab"
    assert main(["train-tokenizer", "--corpus", str(corpus),
                 "--target-size", "100", "--out", str(other)]) == 0
    assert main(["second-pretrain", "--corpus", str(corpus),
                 "--vocab", str(other), "--init", str(base),
                 "--out", str(tmp_path / "y.ckpt"), *CHAR_ARCH]) == 1
    assert "vocab_sha256" in capsys.readouterr().err


def test_pretrain_is_deterministic(workspace, tmp_path):
    root, corpus, vocab, *_ = workspace
    outs = []
    for name in ("a.ckpt", "b.ckpt"):
        out = tmp_path / name
        assert main(["pretrain", "--corpus", str(corpus),
                     "--vocab", str(vocab), "--out", str(out), *ARCH,
                     "--epochs", "1", "--batch-size", "8",
                     "--seed", "11"]) == 0
        outs.append(file_sha256(out))
    assert outs[0] == outs[1]
