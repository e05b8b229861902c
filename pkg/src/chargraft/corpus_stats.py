"""Surface statistics of a corpus under a subword vocabulary.

Counts are over space-delimited words, case-sensitive, one instance per
non-empty input line. The interesting ratios are the fraction of word types
that split into multiple tokens and the relative token-count overhead versus
a one-token-per-word representation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .tokenizer import Vocabulary


@dataclass
class CorpusStats:
    instances: int
    word_tokens: int
    word_types: int
    ttr: float
    multitok_type_rate: float
    token_mass_increase: float

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "word_tokens": self.word_tokens,
            "word_types": self.word_types,
            "ttr": self.ttr,
            "multitok_type_rate": self.multitok_type_rate,
            "token_mass_increase": self.token_mass_increase,
        }


def compute_stats(corpus, vocab: Vocabulary) -> CorpusStats:
    """Tokenize every word type once and aggregate counts over the corpus."""
    if isinstance(corpus, str):
        corpus = corpus.splitlines()
    instances = 0
    type_counts: Counter = Counter()
    for line in corpus:
        words = line.split()
        if not words:
            continue
        instances += 1
        type_counts.update(words)
    if not type_counts:
        raise ValueError("compute_stats: empty corpus")

    word_tokens = sum(type_counts.values())
    word_types = len(type_counts)
    multitok_types = 0
    subword_tokens = 0
    for word, freq in type_counts.items():
        n = len(vocab.encode_word(word))
        if n >= 2:
            multitok_types += 1
        subword_tokens += n * freq
    return CorpusStats(
        instances=instances,
        word_tokens=word_tokens,
        word_types=word_types,
        ttr=word_types / word_tokens,
        multitok_type_rate=multitok_types / word_types,
        token_mass_increase=(subword_tokens - word_tokens) / word_tokens,
    )


STAT_COLUMNS = ("Dataset", "Instances", "Tokens", "Types", "TTR",
                "Multitoks", "Token mass increase")


def format_stats_table(rows: Iterable) -> str:
    """Fixed-order table, one (name, CorpusStats) row per corpus."""
    lines = ["\t".join(STAT_COLUMNS)]
    for name, s in rows:
        lines.append("\t".join([
            name,
            f"{s.instances:,}",
            f"{s.word_tokens:,}",
            f"{s.word_types:,}",
            f"{s.ttr:.3f}",
            f"{s.multitok_type_rate:.2%}",
            f"{s.token_mass_increase:.2%}",
        ]))
    return "\n".join(lines)
