#!/usr/bin/env python3
"""End-to-end run: corpus -> vocabulary -> LM -> joint char training -> task.

A thin wrapper over the command-line interface; every stage is driven by the
single --seed, so two invocations with the same arguments produce
bit-identical checkpoints and metric rows. --scale micro finishes in about a
minute and exists for smoke-testing the plumbing; --scale desk is the real
configuration and takes a few minutes per stage on a laptop CPU.
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from chargraft.cli import main as cli

import make_fixtures  # sibling script; sys.path[0] is this directory

SCALES = {
    "micro": {
        "corpus_chars": 60_000, "target_size": 400,
        "arch": ["--d", "32", "--layers", "1", "--heads", "2",
                 "--ff-dim", "64", "--max-seq-len", "64"],
        "char": ["--char-dim", "16", "--tok-channels", "24",
                 "--detok-hidden", "32", "--detok-head-dim", "32"],
    },
    "desk": {
        "corpus_chars": 1_000_000, "target_size": 2000,
        "arch": ["--d", "64", "--layers", "2", "--heads", "4",
                 "--ff-dim", "256", "--max-seq-len", "128"],
        "char": ["--char-dim", "24", "--tok-channels", "48",
                 "--detok-hidden", "64", "--detok-head-dim", "64"],
    },
}


def run(argv) -> None:
    print("+", " ".join(argv))
    rc = cli(argv)
    if rc != 0:
        raise SystemExit(rc)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=pathlib.Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", choices=sorted(SCALES), default="micro")
    ap.add_argument("--objective", choices=("masked", "autoregressive"),
                    default="masked")
    ap.add_argument("--task", default="word_classification")
    ap.add_argument("--setup", default="scaffolding")
    ap.add_argument("--epochs", type=int, default=1,
                    help="pretraining epochs for each of the two LM stages")
    args = ap.parse_args(argv)

    scale = SCALES[args.scale]
    wd = args.workdir
    wd.mkdir(parents=True, exist_ok=True)
    seed = str(args.seed)

    fixtures = wd / "fixtures"
    make_fixtures.main(["--out", str(fixtures), "--seed", seed,
                        "--corpus-chars", str(scale["corpus_chars"])])
    corpus = str(fixtures / "corpus.txt")

    vocab = str(wd / "vocab.txt")
    run(["train-tokenizer", "--corpus", corpus, "--out", vocab,
         "--target-size", str(scale["target_size"]), "--seed", seed])
    run(["stats", "--corpus", corpus, "--vocab", vocab])

    base = str(wd / "base.ckpt")
    run(["pretrain", "--corpus", corpus, "--vocab", vocab, "--out", base,
         "--objective", args.objective, "--seed", seed,
         "--epochs", str(args.epochs)] + scale["arch"])

    joint = str(wd / "twopt.ckpt")
    run(["second-pretrain", "--corpus", corpus, "--vocab", vocab,
         "--init", base, "--out", joint, "--seed", seed,
         "--epochs", str(args.epochs)] + scale["char"])

    run_dir = wd / f"{args.task}.{args.setup}"
    prefix = str(fixtures / args.task)
    run(["finetune", "--task-kind", args.task,
         "--train", f"{prefix}.train.tsv", "--dev", f"{prefix}.dev.tsv",
         "--test", f"{prefix}.test.tsv", "--vocab", vocab, "--init", joint,
         "--out", str(run_dir), "--setup", args.setup, "--seed", seed])

    print(f"\nartifacts under {wd}")
    print((run_dir / "results.tsv").read_text(), end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
