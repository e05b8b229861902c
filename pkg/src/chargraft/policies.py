"""Word-selection policies.

A policy picks a subset of a sequence's words, by index. Three roles use the
same machinery: which words the encoder replaces in the model input (usage),
which words contribute embedding-loss targets (loss), and which words the
decoder must generate (generation).

Selection is always per whole word; a word's tokens are never split across
the selected/unselected boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

from .rng import substream
from .tokenizer import TokenSequence, Vocabulary, _strip_mark

# Common second-and-final subword surface forms; a 2-token word whose second
# token (marks stripped) is one of these is cheap for the base model to spell
# and so is exempted from all_no_suff selection. Case-sensitive on purpose.
SUFFIXES = frozenset({
    "s", "ed", "es", "ing", "ly", "al", "ally", "'m", "'re", "'ve",
    "y", "ive", "er", "'t", "'ll", "an", "ers",
})

KINDS = ("none", "all_words", "all_multi", "all_no_suff",
         "random_fraction", "every_kth")
ROLES = ("usage", "loss", "generation")


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    role: str = "usage"
    p: float | None = None
    seed: int | None = None
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown policy role {self.role!r}")
        if self.kind == "random_fraction":
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise ValueError("random_fraction needs p in [0, 1]")
            if self.seed is None:
                raise ValueError("random_fraction needs a seed")
        if self.kind == "every_kth" and (self.k is None or self.k < 1):
            raise ValueError("every_kth needs k >= 1")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "role": self.role}
        for field in ("p", "seed", "k"):
            if getattr(self, field) is not None:
                out[field] = getattr(self, field)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


@dataclass
class PolicySelection:
    word_indices: list

    def __post_init__(self):
        self.word_indices = sorted(set(self.word_indices))

    def __contains__(self, i: int) -> bool:
        return i in set(self.word_indices)

    def __len__(self) -> int:
        return len(self.word_indices)


def _is_multi(span) -> bool:
    start, end, _ = span
    return end - start >= 2


def _suffix_exempt(span, seq: TokenSequence, vocab: Vocabulary) -> bool:
    start, end, _ = span
    if end - start != 2:
        return False
    second = vocab.token(seq.token_ids[start + 1])
    return _strip_mark(second, vocab.scheme) in SUFFIXES


def select(policy: PolicyConfig, seq: TokenSequence, vocab: Vocabulary,
           sequence_index: int = 0) -> PolicySelection:
    """Apply a policy to one sequence; indices are into seq.word_spans.

    random_fraction draws from a stream keyed by (policy seed, sequence
    index), so reordering the data cannot shift another sequence's draw.
    """
    spans = seq.word_spans
    n = len(spans)
    if policy.kind == "none":
        picked = []
    elif policy.kind == "all_words":
        picked = list(range(n))
    elif policy.kind == "all_multi":
        picked = [i for i, s in enumerate(spans) if _is_multi(s)]
    elif policy.kind == "all_no_suff":
        picked = [
            i for i, s in enumerate(spans)
            if _is_multi(s) and not _suffix_exempt(s, seq, vocab)
        ]
    elif policy.kind == "random_fraction":
        rng = substream(policy.seed, "policy", sequence_index)
        draws = rng.random(n)
        picked = [i for i in range(n) if draws[i] < policy.p]
    else:  # every_kth
        picked = list(range(policy.k - 1, n, policy.k))
    return PolicySelection(picked)


def validate_alignment(usage: PolicySelection, generation: PolicySelection,
                       seq: TokenSequence) -> list:
    """Violations: multi-token words selected for generation but left as plain
    token input. Empty list means the two selections are compatible."""
    usage_set = set(usage.word_indices)
    violations = []
    for i in generation.word_indices:
        span = seq.word_spans[i]
        if _is_multi(span) and i not in usage_set:
            violations.append((i, span[2]))
    return violations
