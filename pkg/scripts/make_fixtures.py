#!/usr/bin/env python3
"""Write the bundled synthetic datasets to a directory.

Everything is a pure function of the seed, so re-running reproduces the
files byte for byte. Layout under --out:

    corpus.txt                           pretraining text (~1 MB)
    word_classification.{train,dev,test}.tsv
    sequence_classification.{train,dev,test}.tsv
    sequence_tagging.{train,dev,test}.tsv
    ranking.{train,dev,test}.tsv
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from chargraft.fixtures import bundled_fixture_set, make_pretrain_corpus
from chargraft.tasks import (
    write_classification_file,
    write_ranking_file,
    write_tagging_file,
    write_word_classification_file,
)

WRITERS = {
    "word_classification": write_word_classification_file,
    "sequence_classification": write_classification_file,
    "sequence_tagging": write_tagging_file,
    "ranking": write_ranking_file,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("fixtures"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corpus-chars", type=int, default=1_000_000)
    args = ap.parse_args(argv)

    args.out.mkdir(parents=True, exist_ok=True)
    lines = make_pretrain_corpus(args.seed, target_chars=args.corpus_chars)
    corpus = args.out / "corpus.txt"
    corpus.write_text("\n".join(lines) + "\n")
    print(f"{corpus}  ({len(lines)} lines)")

    for kind, partitions in bundled_fixture_set(args.seed).items():
        for name, instances in partitions.items():
            path = args.out / f"{kind}.{name}.tsv"
            WRITERS[kind](path, instances)
            print(f"{path}  ({len(instances)} instances)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
