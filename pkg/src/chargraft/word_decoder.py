"""Character-level word decoder.

Generates a word, character by character, from a single contextual d-vector:
the vector is projected into the initial hidden and cell states of a 2-layer
LSTM, the first input is a reserved beginning-of-word symbol, and each step's
output goes through a two-layer head (tanh between) to logits over the
character inventory. Teacher-forced training sums the per-character
cross-entropy up to and including the end-of-word marker.

Character input embeddings are read from the encoder's shared table and are
deliberately NOT part of this module's parameter set: updates that must leave
the decoder untouched may still move the shared table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .rng import substream
from .tokenizer import END_OF_WORD
from .word_encoder import BOW_CHAR, MAX_WORD_LEN, PAD_CHAR, CharVocabulary, Tok

N_LAYERS = 2


@dataclass
class DetokConfig:
    hidden: int = 64
    head_dim: int = 64
    d: int = 64
    max_word_len: int = MAX_WORD_LEN


class Detok:
    """2-layer LSTM generator conditioned on a context vector."""

    def __init__(self, char_vocab: CharVocabulary, config: DetokConfig,
                 tok: Tok, seed: int = 0):
        self.char_vocab = char_vocab
        self.config = config
        self._char_table = tok.params["char_embedding"]
        cd = char_vocab.char_dim
        h = config.hidden
        shapes = {}
        for layer in range(N_LAYERS):
            in_dim = cd if layer == 0 else h
            shapes[f"init{layer}.wh"] = (config.d, h)
            shapes[f"init{layer}.bh"] = (h,)
            shapes[f"init{layer}.wc"] = (config.d, h)
            shapes[f"init{layer}.bc"] = (h,)
            shapes[f"cell{layer}.wx"] = (in_dim, 4 * h)
            shapes[f"cell{layer}.wh"] = (h, 4 * h)
            shapes[f"cell{layer}.b"] = (4 * h,)
        shapes["head.w1"] = (h, config.head_dim)
        shapes["head.b1"] = (config.head_dim,)
        shapes["head.w2"] = (config.head_dim, len(char_vocab))
        shapes["head.b2"] = (len(char_vocab),)
        self.params = {
            name: ag.tensor(_init_param(name, shapes[name], seed), requires_grad=True)
            for name in sorted(shapes)
        }

    def named_params(self, prefix: str = "detok."):
        return [(prefix + n, t) for n, t in sorted(self.params.items())]

    # --- recurrence -----------------------------------------------------------

    def init_state(self, h_vec: ag.Tensor) -> list:
        """Per-layer (hidden, cell) pairs projected from the context vector."""
        if h_vec.shape != (self.config.d,):
            raise ValueError(
                f"context vector shape {h_vec.shape} != ({self.config.d},)"
            )
        return self._project_state(ag.reshape(h_vec, (1, self.config.d)))

    def _project_state(self, rows: ag.Tensor) -> list:
        state = []
        for layer in range(N_LAYERS):
            h = ag.add_bias(ag.matmul(rows, self.params[f"init{layer}.wh"]),
                            self.params[f"init{layer}.bh"])
            c = ag.add_bias(ag.matmul(rows, self.params[f"init{layer}.wc"]),
                            self.params[f"init{layer}.bc"])
            state.append((h, c))
        return state

    def _step(self, x: ag.Tensor, state: list):
        """One stacked-LSTM step; x is (rows, char_dim). Returns (top h, state)."""
        nh = self.config.hidden
        new_state = []
        inp = x
        for layer in range(N_LAYERS):
            h_prev, c_prev = state[layer]
            gates = ag.add_bias(
                ag.add(ag.matmul(inp, self.params[f"cell{layer}.wx"]),
                       ag.matmul(h_prev, self.params[f"cell{layer}.wh"])),
                self.params[f"cell{layer}.b"],
            )
            i = ag.sigmoid(gates[:, 0 * nh:1 * nh])
            f = ag.sigmoid(gates[:, 1 * nh:2 * nh])
            g = ag.tanh(gates[:, 2 * nh:3 * nh])
            o = ag.sigmoid(gates[:, 3 * nh:4 * nh])
            c = ag.add(ag.mul(f, c_prev), ag.mul(i, g))
            h = ag.mul(o, ag.tanh(c))
            new_state.append((h, c))
            inp = h
        return inp, new_state

    def _logits(self, top: ag.Tensor) -> ag.Tensor:
        mid = ag.tanh(ag.add_bias(ag.matmul(top, self.params["head.w1"]),
                                  self.params["head.b1"]))
        return ag.add_bias(ag.matmul(mid, self.params["head.w2"]),
                           self.params["head.b2"])

    def _char_input(self, char_id: int) -> ag.Tensor:
        return ag.embedding_lookup(self._char_table, np.asarray([char_id]))

    def _target_ids(self, target: str) -> list:
        if not target:
            raise ValueError("teacher_forced_loss: empty target")
        if len(target) > self.config.max_word_len:
            target = target[: self.config.max_word_len]
        if not target.endswith(END_OF_WORD):
            target = target + END_OF_WORD
        return self.char_vocab.encode(target)

    # --- training and generation ----------------------------------------------

    def char_losses(self, h_vec: ag.Tensor, target: str) -> list:
        """Per-character next-char cross-entropies under teacher forcing."""
        ids = self._target_ids(target)
        inputs = [self.char_vocab.id_of(BOW_CHAR)] + ids[:-1]
        state = self.init_state(h_vec)
        losses = []
        for inp_id, tgt_id in zip(inputs, ids):
            top, state = self._step(self._char_input(inp_id), state)
            probs = ag.softmax(self._logits(top), axis=-1)
            losses.append(ag.cross_entropy(probs, np.asarray([tgt_id]),
                                           reduction="sum"))
        return losses

    def teacher_forced_loss(self, h_vec: ag.Tensor, target: str) -> ag.Tensor:
        losses = self.char_losses(h_vec, target)
        total = losses[0]
        for piece in losses[1:]:
            total = ag.add(total, piece)
        return total

    def teacher_forced_batch(self, h_mat: ag.Tensor, targets: list) -> ag.Tensor:
        """Summed teacher-forced loss over many words, one h_mat row each.

        Equals the sum of per-word teacher_forced_loss values up to float
        reassociation, at a fraction of the op count: rows are sorted longest
        first and advance together, and a word's row simply drops out of the
        scored prefix once its end-of-word step has been consumed.
        """
        targets = list(targets)
        if not targets:
            raise ValueError("teacher_forced_batch: empty batch")
        if h_mat.shape != (len(targets), self.config.d):
            raise ValueError(
                f"context shape {h_mat.shape} != ({len(targets)}, {self.config.d})")
        id_lists = [self._target_ids(t) for t in targets]
        order = sorted(range(len(targets)), key=lambda i: -len(id_lists[i]))
        id_lists = [id_lists[i] for i in order]
        rows = h_mat[order]
        n = len(id_lists)
        lengths = [len(ids) for ids in id_lists]
        steps = lengths[0]
        bow = self.char_vocab.id_of(BOW_CHAR)
        pad = self.char_vocab.id_of(PAD_CHAR)
        inputs = np.full((n, steps), pad, dtype=np.int64)
        tgts = np.zeros((n, steps), dtype=np.int64)
        for i, ids in enumerate(id_lists):
            inputs[i, 0] = bow
            inputs[i, 1:len(ids)] = ids[:-1]
            tgts[i, :len(ids)] = ids
        state = self._project_state(rows)
        total = None
        alive = n
        for t in range(steps):
            active = sum(1 for length in lengths if length > t)
            if active < alive:
                # sorted longest-first, so finished words form a suffix
                state = [(h[0:active], c[0:active]) for h, c in state]
                alive = active
            x = ag.embedding_lookup(self._char_table, inputs[:active, t])
            top, state = self._step(x, state)
            probs = ag.softmax(self._logits(top), axis=-1)
            piece = ag.cross_entropy(probs, tgts[:active, t], reduction="sum")
            total = piece if total is None else ag.add(total, piece)
        return total

    def generate(self, h_vec: ag.Tensor, max_len: int, mode: str = "greedy",
                 rng: np.random.Generator | None = None) -> str:
        """Decode until the end-of-word marker or max_len characters.

        Greedy mode touches no randomness; sample mode draws from the softmax
        at temperature 1 and requires an rng.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ValueError("sample mode needs an rng")
        eow = self.char_vocab.id_of(END_OF_WORD)
        out = []
        with ag.no_grad():
            state = self.init_state(h_vec.detach())
            char_id = self.char_vocab.id_of(BOW_CHAR)
            for _ in range(max_len):
                top, state = self._step(self._char_input(char_id), state)
                logits = self._logits(top).data[0]
                if mode == "greedy":
                    char_id = int(np.argmax(logits))
                else:
                    z = logits - logits.max()
                    p = np.exp(z)
                    p /= p.sum()
                    char_id = int(rng.choice(len(p), p=p))
                if char_id == eow:
                    break
                out.append(self.char_vocab.char(char_id))
        return "".join(out)


def _init_param(name: str, shape, seed: int) -> np.ndarray:
    rng = substream(seed, "init", "detok", name)
    if name.endswith((".b", ".bh", ".bc", ".b1", ".b2")):
        return np.zeros(shape, dtype=ag.default_dtype())
    return (rng.standard_normal(shape) * 0.02).astype(ag.default_dtype())
