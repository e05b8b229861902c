import pytest
from hypothesis import given, settings, strategies as st

from helpers import example_sentence
from chargraft.policies import (
    SUFFIXES,
    PolicyConfig,
    PolicySelection,
    select,
    validate_alignment,
)
from chargraft.tokenizer import (
    TokenSequence,
    base_tokens,
    corpus_char_inventory,
    tokenize,
    train_bpe,
)


def _words_of(seq, selection):
    return {seq.word_spans[i][2] for i in selection.word_indices}


def test_suffix_set_is_exactly_seventeen():
    assert len(SUFFIXES) == 17
    assert "ive" in SUFFIXES and "ers" in SUFFIXES and "'ll" in SUFFIXES


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(kind="sometimes")
    with pytest.raises(ValueError):
        PolicyConfig(kind="all_multi", role="driver")
    with pytest.raises(ValueError):
        PolicyConfig(kind="random_fraction", p=1.5, seed=0)
    with pytest.raises(ValueError):
        PolicyConfig(kind="random_fraction", p=0.5)  # seed missing
    with pytest.raises(ValueError):
        PolicyConfig(kind="every_kth", k=0)


def test_config_round_trips_through_dict():
    cfg = PolicyConfig(kind="random_fraction", p=0.2, seed=7, role="generation")
    assert PolicyConfig.from_dict(cfg.to_dict()) == cfg


def test_all_multi_on_example_sentence():
    seq, vocab = example_sentence()
    sel = select(PolicyConfig(kind="all_multi"), seq, vocab)
    assert _words_of(seq, sel) == {"emphatically", "scrupulous", "sportive", "gaiety"}
    assert sel.word_indices == [2, 8, 11, 12]


def test_all_no_suff_on_example_sentence():
    # "sportive" = stem + a listed suffix ("ive"), so it stays with the base model
    seq, vocab = example_sentence()
    sel = select(PolicyConfig(kind="all_no_suff"), seq, vocab)
    assert _words_of(seq, sel) == {"emphatically", "scrupulous", "gaiety"}
    assert sel.word_indices == [2, 8, 12]


def test_single_token_sentence_selects_nothing():
    seq, vocab = example_sentence()
    ids = [seq.token_ids[0], seq.token_ids[1]]
    flat = TokenSequence(ids, [(0, 1, "He"), (1, 2, "was")])
    assert select(PolicyConfig(kind="all_multi"), flat, vocab).word_indices == []
    assert select(PolicyConfig(kind="all_no_suff"), flat, vocab).word_indices == []


def test_none_and_all_words():
    seq, vocab = example_sentence()
    assert select(PolicyConfig(kind="none"), seq, vocab).word_indices == []
    assert select(PolicyConfig(kind="all_words"), seq, vocab).word_indices == list(
        range(len(seq.word_spans))
    )


def test_every_third_word():
    seq, vocab = example_sentence()
    sel = select(PolicyConfig(kind="every_kth", k=3), seq, vocab)
    assert sel.word_indices == [2, 5, 8, 11]


def _flat_sequence(n):
    return TokenSequence(list(range(n)), [(i, i + 1, f"w{i}") for i in range(n)])


def test_random_fraction_concentrates():
    seq, vocab = example_sentence()
    big = _flat_sequence(10_000)
    sel = select(PolicyConfig(kind="random_fraction", p=0.15, seed=11), big, vocab)
    assert 0.14 <= len(sel) / 10_000 <= 0.16


def test_random_fraction_keyed_by_sequence_index():
    seq, vocab = example_sentence()
    big = _flat_sequence(500)
    cfg = PolicyConfig(kind="random_fraction", p=0.3, seed=5)
    a = select(cfg, big, vocab, sequence_index=4)
    b = select(cfg, big, vocab, sequence_index=4)
    c = select(cfg, big, vocab, sequence_index=5)
    assert a.word_indices == b.word_indices
    assert a.word_indices != c.word_indices


def test_random_fraction_edge_probabilities():
    seq, vocab = example_sentence()
    big = _flat_sequence(50)
    none = select(PolicyConfig(kind="random_fraction", p=0.0, seed=1), big, vocab)
    all_ = select(PolicyConfig(kind="random_fraction", p=1.0, seed=1), big, vocab)
    assert none.word_indices == []
    assert all_.word_indices == list(range(50))


def test_alignment_ok_when_generation_subset_of_usage():
    seq, _ = example_sentence()
    usage = PolicySelection([2, 8, 11, 12])
    generation = PolicySelection([2, 12])
    assert validate_alignment(usage, generation, seq) == []


def test_alignment_violation_names_the_word():
    seq, _ = example_sentence()
    usage = PolicySelection([2])
    generation = PolicySelection([2, 8])  # "scrupulous" generated but not encoded
    violations = validate_alignment(usage, generation, seq)
    assert violations == [(8, "scrupulous")]


def test_single_token_generation_never_violates():
    seq, _ = example_sentence()
    usage = PolicySelection([])
    generation = PolicySelection([0, 1, 3])  # all single-token words
    assert validate_alignment(usage, generation, seq) == []


# --- properties -----------------------------------------------------------

CORPUS = " ".join(["abc", "bca", "cab", "ab", "bc", "a", "abcabc", "ccc"] * 3)


@pytest.fixture(scope="module")
def vocab():
    base = len(base_tokens(corpus_char_inventory(CORPUS), "continuation_mark"))
    return train_bpe(CORPUS, target_size=base + 6)


texts = st.lists(st.text(alphabet="abc", min_size=1, max_size=9),
                 min_size=1, max_size=8).map(" ".join)


@settings(max_examples=150, deadline=None)
@given(text=texts)
def test_no_suff_subset_of_multi(vocab, text):
    seq = tokenize(text, vocab)
    multi = select(PolicyConfig(kind="all_multi"), seq, vocab)
    no_suff = select(PolicyConfig(kind="all_no_suff"), seq, vocab)
    assert set(no_suff.word_indices) <= set(multi.word_indices)


@settings(max_examples=150, deadline=None)
@given(text=texts, kind=st.sampled_from(["none", "all_words", "all_multi",
                                         "all_no_suff", "every_kth",
                                         "random_fraction"]),
       seq_index=st.integers(0, 50))
def test_indices_always_in_range(vocab, text, kind, seq_index):
    seq = tokenize(text, vocab)
    cfg = PolicyConfig(kind=kind, p=0.4, seed=3, k=2)
    sel = select(cfg, seq, vocab, sequence_index=seq_index)
    assert all(0 <= i < len(seq.word_spans) for i in sel.word_indices)
    assert sel.word_indices == sorted(set(sel.word_indices))
