"""Character-level word encoder.

Turns a word into a single d-vector: embed its characters (with an appended
end-of-word marker), run three convolution banks of widths 2/3/4 over the
positions, max-pool each filter over time, apply a ReLU, concatenate the
three pooled vectors and project to the model dimension. The output is
usable wherever a token embedding row is.

The character embedding table defined here is shared with the decoder; it is
owned by this module and serialized under the ``tok.`` prefix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .rng import substream
from .tokenizer import END_OF_WORD, UNK_CHAR

log = logging.getLogger(__name__)

# left-padding filler for words shorter than the widest convolution, and the
# decoder's beginning-of-word input symbol; private-use codepoints like the
# end-of-word marker
PAD_CHAR = ""
BOW_CHAR = ""

MAX_WORD_LEN = 64

CONV_WIDTHS = (2, 3, 4)


class CharVocabulary:
    """Ordered character inventory with reserved control characters."""

    RESERVED = (UNK_CHAR, END_OF_WORD, PAD_CHAR, BOW_CHAR)

    def __init__(self, chars, char_dim: int):
        ordered = []
        seen = set()
        for c in list(chars) + list(self.RESERVED):
            if c not in seen:
                ordered.append(c)
                seen.add(c)
        self.chars = ordered
        self.char_dim = char_dim
        self._ids = {c: i for i, c in enumerate(ordered)}
        for r in self.RESERVED:
            if self.chars.count(r) != 1:
                raise ValueError(f"reserved character {r!r} must appear exactly once")

    @classmethod
    def from_words(cls, words, char_dim: int) -> "CharVocabulary":
        chars = sorted(set().union(*(set(w) for w in words)) - set(cls.RESERVED))
        return cls(chars, char_dim)

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, c: str) -> bool:
        return c in self._ids

    def id_of(self, c: str) -> int:
        return self._ids.get(c, self._ids[UNK_CHAR])

    def char(self, i: int) -> str:
        return self.chars[i]

    def encode(self, text: str) -> list:
        return [self.id_of(c) for c in text]


@dataclass
class TokConfig:
    channels: int = 64
    d: int = 64
    max_word_len: int = MAX_WORD_LEN


def param_count(sigma: int, char_dim: int, channels: int, d: int) -> int:
    """Closed-form size of the encoder parameter set."""
    total = sigma * char_dim
    for w in CONV_WIDTHS:
        total += w * char_dim * channels + channels
    total += 3 * channels * d + d
    return total


class Tok:
    """Char-CNN word encoder; pure function of (word, params)."""

    def __init__(self, char_vocab: CharVocabulary, config: TokConfig, seed: int = 0):
        self.char_vocab = char_vocab
        self.config = config
        cd = char_vocab.char_dim
        shapes = {"char_embedding": (len(char_vocab), cd)}
        for w in CONV_WIDTHS:
            shapes[f"conv{w}.w"] = (w * cd, config.channels)
            shapes[f"conv{w}.b"] = (config.channels,)
        shapes["proj.w"] = (3 * config.channels, config.d)
        shapes["proj.b"] = (config.d,)
        self.params = {
            name: ag.tensor(_init_param(name, shapes[name], seed), requires_grad=True)
            for name in sorted(shapes)
        }

    @property
    def char_embedding(self) -> ag.Tensor:
        return self.params["char_embedding"]

    def named_params(self, prefix: str = "tok."):
        return [(prefix + n, t) for n, t in sorted(self.params.items())]

    def param_count(self) -> int:
        return param_count(len(self.char_vocab), self.char_vocab.char_dim,
                           self.config.channels, self.config.d)

    def _char_ids(self, word: str) -> list:
        if not word:
            raise ValueError("cannot encode an empty word")
        if len(word) > self.config.max_word_len:
            log.warning("truncating %d-character word to %d",
                        len(word), self.config.max_word_len)
            word = word[: self.config.max_word_len]
        chars = list(word) + [END_OF_WORD]
        widest = max(CONV_WIDTHS)
        if len(chars) < widest:
            chars = [PAD_CHAR] * (widest - len(chars)) + chars
        return [self.char_vocab.id_of(c) for c in chars]

    def encode_word(self, word: str) -> ag.Tensor:
        """The d-vector for one word."""
        ids = self._char_ids(word)
        x = ag.embedding_lookup(self.params["char_embedding"], np.asarray(ids))
        pooled = []
        for w in CONV_WIDTHS:
            n = len(ids) - w + 1
            windows = ag.concat([x[k:k + n] for k in range(w)], axis=1)
            act = ag.add_bias(ag.matmul(windows, self.params[f"conv{w}.w"]),
                              self.params[f"conv{w}.b"])
            pooled.append(ag.relu(ag.max_pool_over_axis(act, axis=0)))
        feats = ag.reshape(ag.concat(pooled, axis=0), (1, 3 * self.config.channels))
        out = ag.add_bias(ag.matmul(feats, self.params["proj.w"]),
                          self.params["proj.b"])
        return ag.reshape(out, (self.config.d,))

    def encode_batch(self, words) -> ag.Tensor:
        """(n_words, d) matrix; row i is exactly encode_word(words[i]).

        Encoded word by word, so batch composition can never leak into a row.
        """
        words = list(words)
        if not words:
            raise ValueError("encode_batch: empty word list")
        rows = [ag.reshape(self.encode_word(w), (1, self.config.d)) for w in words]
        return ag.concat(rows, axis=0)


def _init_param(name: str, shape, seed: int) -> np.ndarray:
    rng = substream(seed, "init", "tok", name)
    if name.endswith(".b"):
        return np.zeros(shape, dtype=ag.default_dtype())
    return (rng.standard_normal(shape) * 0.02).astype(ag.default_dtype())
