"""Shared test fixtures: the hand-tokenized example sentence and friends."""

from chargraft.tokenizer import (
    END_OF_WORD,
    UNK_CHAR,
    TokenSequence,
    Vocabulary,
    base_tokens,
)

# One sentence whose printed subword split exercises every policy branch:
# three words split into >= 3 pieces, one stem+suffix split, punctuation as
# standalone words, and plenty of single-token words.
SENTENCE_WORD_TOKENS = [
    ("He", ["He"]),
    ("was", ["was"]),
    ("emphatically", ["em", "##pha", "##tically"]),
    ("a", ["a"]),
    ("modern", ["modern"]),
    ("gentleman", ["gentleman"]),
    (",", [","]),
    ("of", ["of"]),
    ("scrupulous", ["s", "##c", "##rup", "##ulous"]),
    ("courtesy", ["courtesy"]),
    (",", [","]),
    ("sportive", ["sport", "##ive"]),
    ("gaiety", ["g", "##ai", "##ety"]),
    (",", [","]),
]


def example_sentence() -> tuple:
    """(TokenSequence, Vocabulary) for the fixed example sentence."""
    chars = set()
    for word, _ in SENTENCE_WORD_TOKENS:
        chars.update(word)
    chars |= {UNK_CHAR, END_OF_WORD}
    tokens = base_tokens(chars, "continuation_mark")
    present = set(tokens)
    for _, toks in SENTENCE_WORD_TOKENS:
        for t in toks:
            if t not in present:
                tokens.append(t)
                present.add(t)
    vocab = Vocabulary(tokens, "continuation_mark", [], chars)
    ids = []
    spans = []
    for word, toks in SENTENCE_WORD_TOKENS:
        start = len(ids)
        ids.extend(vocab.id_of(t) for t in toks)
        spans.append((start, len(ids), word))
    return TokenSequence(ids, spans), vocab
