import logging

import numpy as np
import pytest

from chargraft import autograd as ag
from chargraft.rng import substream
from chargraft.tokenizer import END_OF_WORD, UNK_CHAR
from chargraft.word_encoder import (
    BOW_CHAR,
    PAD_CHAR,
    CharVocabulary,
    Tok,
    TokConfig,
    param_count,
)


@pytest.fixture(autouse=True)
def _clean():
    ag.reset_tape()
    ag.set_default_dtype(np.float64)
    yield
    ag.reset_tape()


def _tok(chars="abcdef", char_dim=5, channels=4, d=6, seed=3):
    cv = CharVocabulary(sorted(set(chars)), char_dim)
    return Tok(cv, TokConfig(channels=channels, d=d), seed=seed)


def test_char_vocab_reserves_exactly_once():
    cv = CharVocabulary(["a", "b"], 4)
    for r in (UNK_CHAR, END_OF_WORD, PAD_CHAR, BOW_CHAR):
        assert cv.chars.count(r) == 1
    # feeding reserved chars in does not duplicate them
    cv2 = CharVocabulary(["a", UNK_CHAR, "b", END_OF_WORD], 4)
    assert cv2.chars.count(UNK_CHAR) == 1
    assert cv2.id_of("missing-char"[0]) == cv2.id_of(UNK_CHAR)


def test_output_dimension_for_all_word_lengths():
    tok = _tok(d=6)
    for word in ["a", "ab", "abc", "abcd", "abcde", "abcdef"]:
        v = tok.encode_word(word)
        assert v.shape == (6,)
        assert np.all(np.isfinite(v.data))


def test_zero_conv_weights_leave_projection_bias():
    tok = _tok()
    for w in (2, 3, 4):
        tok.params[f"conv{w}.w"].data[:] = 0.0
        tok.params[f"conv{w}.b"].data[:] = 0.0
    tok.params["proj.b"].data[:] = np.arange(6.0)
    np.testing.assert_array_equal(tok.encode_word("abc").data, np.arange(6.0))


def test_character_order_matters():
    tok = _tok(seed=9)
    assert not np.allclose(tok.encode_word("abc").data, tok.encode_word("cba").data)


def test_unknown_characters_absorbed():
    tok = _tok(chars="ab")
    np.testing.assert_array_equal(
        tok.encode_word("aZb").data, tok.encode_word("a" + UNK_CHAR + "b").data
    )


def test_long_words_truncate_with_warning(caplog):
    tok = _tok()
    long_word = "ab" * 60
    with caplog.at_level(logging.WARNING, logger="chargraft.word_encoder"):
        v = tok.encode_word(long_word)
    assert any("truncating" in r.message for r in caplog.records)
    np.testing.assert_array_equal(
        v.data, tok.encode_word(long_word[:tok.config.max_word_len]).data
    )


def test_batch_rows_equal_per_word_encoding_bitwise():
    tok = _tok(seed=5)
    words = ["a", "dance", "bee", "abcdef", "fa"]
    batch = tok.encode_batch(words).data
    for i, w in enumerate(words):
        np.testing.assert_array_equal(batch[i], tok.encode_word(w).data)


def test_batch_order_permutes_rows():
    tok = _tok(seed=5)
    words = ["ab", "cde", "f"]
    a = tok.encode_batch(words).data
    b = tok.encode_batch(words[::-1]).data
    np.testing.assert_array_equal(a, b[::-1])


def test_batch_of_one_and_empty_batch():
    tok = _tok()
    np.testing.assert_array_equal(
        tok.encode_batch(["abc"]).data[0], tok.encode_word("abc").data
    )
    with pytest.raises(ValueError):
        tok.encode_batch([])
    with pytest.raises(ValueError):
        tok.encode_word("")


def test_param_count_closed_form():
    tok = _tok(chars="ab", char_dim=3, channels=2, d=4)
    sigma = len(tok.char_vocab)  # 2 letters + 4 reserved
    assert sigma == 6
    # hand sum: table 6*3=18; convs (2+3+4)*3*2=54 plus 3*2=6 biases;
    # projection 3*2*4=24 plus 4
    assert tok.param_count() == 18 + 54 + 6 + 24 + 4
    assert tok.param_count() == sum(t.size for _, t in tok.named_params())
    assert param_count(sigma=6, char_dim=3, channels=0, d=4) == 18 + 4


def test_paper_scale_param_count_is_about_a_million():
    n = param_count(sigma=100, char_dim=200, channels=256, d=768)
    assert 5e5 < n < 5e6


def test_same_seed_reproduces_parameters_and_outputs():
    a = _tok(seed=11)
    b = _tok(seed=11)
    for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    np.testing.assert_array_equal(a.encode_word("fad").data, b.encode_word("fad").data)


def test_gradients_match_finite_differences():
    tok = _tok(char_dim=3, channels=3, d=4, seed=7)
    target = ag.constant(substream(0, "test", "tok-target").standard_normal(4))

    def f():
        return ag.euclidean_distance(tok.encode_word("cab"), target)

    report = ag.finite_difference_check(
        f, tok.named_params(), tolerance=1e-4, max_checks_per_param=10
    )
    assert report.passed, f"worst {report.max_rel_error:.2e} in {report.per_param}"
