"""Pre-layer-norm transformer language model with a weight-tied head.

One embedding table serves both input lookup and output scoring, so
perturbing a vocabulary row moves predictions and representations together.
Two objectives share the same stack:

* masked: full bidirectional attention; a learned mask vector replaces the
  token component at selected positions and only those positions are scored.
* autoregressive: inputs are shifted right behind a learned begin-of-sequence
  vector before a causally-masked pass, so the hidden state at position i
  depends only on inputs strictly before i. Perturbing the input at position
  j leaves h_i unchanged for every i <= j.

Sequences are processed one at a time (desk scale); there is no batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .rng import substream

NEG_INF = -1e9


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    max_seq_len: int = 128
    vocab_size: int = 2000
    objective: str = "masked"
    mask_fraction: float = 0.15
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.objective not in ("masked", "autoregressive"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MaskSelection:
    """Masked token positions and the ids they hid."""

    positions: list
    original_ids: list


def choose_masks(maskable_positions, fraction: float, rng: np.random.Generator,
                 token_ids) -> MaskSelection:
    """Sample round(fraction * n) of the maskable positions, at least one."""
    maskable = sorted(maskable_positions)
    if not maskable:
        return MaskSelection([], [])
    count = max(1, round(fraction * len(maskable)))
    picked = sorted(rng.choice(len(maskable), size=count, replace=False).tolist())
    positions = [maskable[i] for i in picked]
    return MaskSelection(positions, [token_ids[p] for p in positions])


class TransformerLM:
    """The base model: embeddings, transformer stack, tied prediction head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict = {}
        c = config
        shapes = {
            "embedding": (c.vocab_size, c.d),
            "mask_vec": (c.d,),
            "bos_vec": (c.d,),
            "positions": (c.max_seq_len, c.d),
            "final_ln.gain": (c.d,),
            "final_ln.bias": (c.d,),
        }
        for i in range(c.layers):
            p = f"layer{i}."
            shapes.update({
                p + "ln1.gain": (c.d,), p + "ln1.bias": (c.d,),
                p + "ln2.gain": (c.d,), p + "ln2.bias": (c.d,),
                p + "attn.wq": (c.d, c.d), p + "attn.bq": (c.d,),
                p + "attn.wk": (c.d, c.d), p + "attn.bk": (c.d,),
                p + "attn.wv": (c.d, c.d), p + "attn.bv": (c.d,),
                p + "attn.wo": (c.d, c.d), p + "attn.bo": (c.d,),
                p + "ff.w1": (c.d, c.ff_dim), p + "ff.b1": (c.ff_dim,),
                p + "ff.w2": (c.ff_dim, c.d), p + "ff.b2": (c.d,),
            })
        for name in sorted(shapes):
            self.params[name] = ag.tensor(
                _init_param(name, shapes[name], seed), requires_grad=True
            )

    @property
    def embedding(self) -> ag.Tensor:
        return self.params["embedding"]

    def named_params(self, prefix: str = "lm.") -> list:
        return [(prefix + name, t) for name, t in sorted(self.params.items())]

    # --- input construction ------------------------------------------------

    def embed_ids(self, token_ids) -> ag.Tensor:
        """Token rows only; positions are added separately."""
        ids = np.asarray(token_ids)
        if ids.size == 0:
            raise ValueError("cannot embed an empty sequence")
        if ids.max() >= self.config.vocab_size or ids.min() < 0:
            raise IndexError(
                f"token id out of range [0, {self.config.vocab_size})"
            )
        return ag.embedding_lookup(self.params["embedding"], ids)

    def add_positions(self, x: ag.Tensor) -> ag.Tensor:
        l = x.shape[0]
        if l > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {l} exceeds max_seq_len {self.config.max_seq_len}"
            )
        return ag.add(x, self.params["positions"][:l])

    def mask_rows(self, x: ag.Tensor, positions) -> ag.Tensor:
        """Replace the token component at the given positions with mask_vec."""
        if not positions:
            return x
        l, d = x.shape
        m = np.zeros((l, 1))
        m[list(positions)] = 1.0
        keep = ag.mul(x, ag.constant(np.broadcast_to(1.0 - m, (l, d)).copy()))
        mask_part = ag.matmul(ag.constant(m),
                              ag.reshape(self.params["mask_vec"], (1, d)))
        return ag.add(keep, mask_part)

    def embed(self, token_ids, mask_positions=()) -> ag.Tensor:
        x = self.embed_ids(token_ids)
        x = self.mask_rows(x, list(mask_positions))
        return self.add_positions(x)

    # --- transformer stack --------------------------------------------------

    def forward(self, x: ag.Tensor, objective: str | None = None,
                dropout_rng: np.random.Generator | None = None) -> ag.Tensor:
        """Contextual vectors (l, d) for already-positioned input vectors."""
        objective = objective or self.config.objective
        l, d = x.shape
        if l > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {l} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if objective == "autoregressive":
            bos = ag.reshape(self.params["bos_vec"], (1, d))
            x = ag.concat([bos, x[:-1]], axis=0) if l > 1 else bos
            causal = np.triu(np.full((l, l), NEG_INF), k=1)
            attn_bias = ag.constant(causal)
        elif objective == "masked":
            attn_bias = None
        else:
            raise ValueError(f"unknown objective {objective!r}")

        for i in range(self.config.layers):
            p = f"layer{i}."
            h = ag.layer_norm(x, self.params[p + "ln1.gain"],
                              self.params[p + "ln1.bias"])
            h = self._attention(h, p, attn_bias)
            h = self._dropout(h, dropout_rng)
            x = ag.add(x, h)
            h = ag.layer_norm(x, self.params[p + "ln2.gain"],
                              self.params[p + "ln2.bias"])
            h = ag.add_bias(ag.matmul(h, self.params[p + "ff.w1"]),
                            self.params[p + "ff.b1"])
            h = ag.relu(h)
            h = ag.add_bias(ag.matmul(h, self.params[p + "ff.w2"]),
                            self.params[p + "ff.b2"])
            h = self._dropout(h, dropout_rng)
            x = ag.add(x, h)
        return ag.layer_norm(x, self.params["final_ln.gain"],
                             self.params["final_ln.bias"])

    def _attention(self, h: ag.Tensor, prefix: str, attn_bias) -> ag.Tensor:
        c = self.config
        dh = c.d // c.heads
        q = ag.add_bias(ag.matmul(h, self.params[prefix + "attn.wq"]),
                        self.params[prefix + "attn.bq"])
        k = ag.add_bias(ag.matmul(h, self.params[prefix + "attn.wk"]),
                        self.params[prefix + "attn.bk"])
        v = ag.add_bias(ag.matmul(h, self.params[prefix + "attn.wv"]),
                        self.params[prefix + "attn.bv"])
        heads = []
        scale = 1.0 / math.sqrt(dh)
        for j in range(c.heads):
            sl = (slice(None), slice(j * dh, (j + 1) * dh))
            scores = ag.mul(ag.matmul(q[sl], ag.transpose(k[sl])), scale)
            if attn_bias is not None:
                scores = ag.add(scores, attn_bias)
            heads.append(ag.matmul(ag.softmax(scores, axis=-1), v[sl]))
        out = ag.concat(heads, axis=1)
        return ag.add_bias(ag.matmul(out, self.params[prefix + "attn.wo"]),
                           self.params[prefix + "attn.bo"])

    def _dropout(self, h: ag.Tensor, rng) -> ag.Tensor:
        rate = self.config.dropout
        if rng is None or rate <= 0.0:
            return h
        keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
        return ag.mul(h, ag.constant(keep))

    # --- prediction head -----------------------------------------------------

    def predict(self, h: ag.Tensor, positions) -> ag.Tensor:
        """Probability rows over the vocabulary at the selected positions."""
        positions = list(positions)
        if not positions:
            raise ValueError("predict: empty position selection")
        logits = ag.matmul(h[positions], ag.transpose(self.params["embedding"]))
        return ag.softmax(logits, axis=-1)

    def lm_loss(self, probs: ag.Tensor, target_ids) -> ag.Tensor:
        targets = np.asarray(target_ids)
        if targets.size == 0:
            raise ValueError("lm_loss: empty target selection")
        return ag.cross_entropy(probs, targets, reduction="mean")

    # --- full objectives ------------------------------------------------------

    def masked_sequence_loss(self, token_ids, rng: np.random.Generator,
                             maskable_positions=None):
        """Sample a masking, score masked positions, return (loss, selection)."""
        ids = list(token_ids)
        maskable = range(len(ids)) if maskable_positions is None else maskable_positions
        sel = choose_masks(maskable, self.config.mask_fraction, rng, ids)
        if not sel.positions:
            raise ValueError("masked_sequence_loss: nothing to mask")
        x = self.embed(ids, mask_positions=sel.positions)
        h = self.forward(x, "masked")
        probs = self.predict(h, sel.positions)
        return self.lm_loss(probs, sel.original_ids), sel

    def autoregressive_sequence_loss(self, token_ids):
        """Score every position from its strict prefix; mean cross-entropy."""
        ids = list(token_ids)
        x = self.embed(ids)
        h = self.forward(x, "autoregressive")
        probs = self.predict(h, range(len(ids)))
        return self.lm_loss(probs, ids)


def _init_param(name: str, shape, seed: int) -> np.ndarray:
    rng = substream(seed, "init", "lm", name)
    if name.endswith(("gain",)):
        return np.ones(shape, dtype=ag.default_dtype())
    if name.endswith(("bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
        return np.zeros(shape, dtype=ag.default_dtype())
    return (rng.standard_normal(shape) * 0.02).astype(ag.default_dtype())
