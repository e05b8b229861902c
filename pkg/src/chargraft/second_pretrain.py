"""Joint second pre-training of the base LM with the character modules.

One batch mixes three objectives over the same sequences: the base LM loss
computed on inputs where policy-selected words enter through the word encoder,
an embedding-matching loss pulling encoder outputs toward (detached)
aggregates of the subword embedding rows, and a generation loss teaching the
character decoder to spell words from their contextual vectors. Two cycle
batches run at a fixed step interval: text->vector->text (gradients into both
character modules) and vector->text->vector (gradients into the encoder only).

The same engine also runs plain LM pre-training: zero out the character loss
weights, select no words, and disable cycles (see ``plain_lm_config``).
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .checkpoint import ModelBundle, save_checkpoint
from .optim import Adam, warmup_linear_schedule
from .policies import PolicyConfig, PolicySelection, select, validate_alignment
from .rng import substream
from .tokenizer import TokenSequence, Vocabulary, tokenize
from .transformer import TransformerLM, choose_masks
from .word_encoder import Tok

log = logging.getLogger(__name__)

AGGREGATIONS = ("max_pool", "mean_pool", "first_token")


@dataclass
class TwoPTConfig:
    """Settings for a second pre-training run (desk-scale defaults)."""

    seed: int = 0
    usage_policy: PolicyConfig | None = None
    loss_policy: PolicyConfig | None = None
    gen_policy: PolicyConfig | None = None
    agg: str = "max_pool"
    lm_weight: float = 1.0
    embedding_weight: float = 1.0
    generation_weight: float = 1.0
    lr: float = 1e-3
    schedule: str = "warmup_linear"
    batch_size: int = 4
    epochs: int = 1
    shuffle: bool = True
    cycle_interval: int = 200
    cycle_top_k: int = 2000
    cycle_batch: int = 64

    def __post_init__(self):
        if self.usage_policy is None:
            self.usage_policy = PolicyConfig("all_multi", role="usage")
        if self.loss_policy is None:
            self.loss_policy = PolicyConfig("random_fraction", role="loss",
                                            p=0.15, seed=self.seed)
        if self.gen_policy is None:
            self.gen_policy = PolicyConfig("all_words", role="generation")
        if self.agg not in AGGREGATIONS:
            raise ValueError(f"agg must be one of {AGGREGATIONS}, got {self.agg!r}")
        if self.schedule not in ("warmup_linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        for name in ("lm_weight", "embedding_weight", "generation_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()
               if not isinstance(v, PolicyConfig)}
        out["usage_policy"] = self.usage_policy.to_dict()
        out["loss_policy"] = self.loss_policy.to_dict()
        out["gen_policy"] = self.gen_policy.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TwoPTConfig":
        d = dict(d)
        for key in ("usage_policy", "loss_policy", "gen_policy"):
            if d.get(key) is not None:
                d[key] = PolicyConfig.from_dict(d[key])
        return cls(**d)


def plain_lm_config(seed: int = 0, lr: float = 1e-3, epochs: int = 1,
                    batch_size: int = 4, **kw) -> TwoPTConfig:
    """A config that reduces the engine to ordinary LM pre-training."""
    none = lambda role: PolicyConfig("none", role=role)  # noqa: E731
    return TwoPTConfig(seed=seed, lr=lr, epochs=epochs, batch_size=batch_size,
                       usage_policy=none("usage"), loss_policy=none("loss"),
                       gen_policy=none("generation"),
                       embedding_weight=0.0, generation_weight=0.0,
                       cycle_interval=0, **kw)


# --- data preparation ---------------------------------------------------------


def prepare_sequences(lines, vocab: Vocabulary, max_seq_len: int) -> list:
    """Tokenize lines and split long ones at word boundaries.

    Every returned TokenSequence fits in max_seq_len tokens; words are never
    split across chunks. Blank lines are skipped.
    """
    out = []
    for line in lines:
        if not line.strip():
            continue
        seq = tokenize(line, vocab)
        if seq.length <= max_seq_len:
            out.append(seq)
            continue
        ids, spans = [], []
        for start, end, word in seq.word_spans:
            n = end - start
            if n > max_seq_len:
                log.warning("skipping %d-token word %r", n, word)
                continue
            if len(ids) + n > max_seq_len:
                out.append(TokenSequence(ids, spans))
                ids, spans = [], []
            spans.append((len(ids), len(ids) + n, word))
            ids = ids + list(seq.token_ids[start:end])
        if ids:
            out.append(TokenSequence(ids, spans))
    return out


def word_frequencies(lines) -> Counter:
    """Case-sensitive whitespace-token counts."""
    counts = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def frequency_pool(counts: Counter, top_k: int) -> list:
    """The top_k most frequent words; ties broken alphabetically."""
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:top_k]]


# --- input construction -------------------------------------------------------


@dataclass
class BuiltInput:
    """A sequence's input rows after word-encoder substitution.

    entries[i] describes row i: ("word", word_index) for an encoder vector,
    ("token", word_index, seq_token_index) for a plain embedding row.
    rep_positions maps every word to the row that stands for it downstream:
    its encoder row when selected, its first token row otherwise.
    """

    vectors: ag.Tensor
    entries: list
    rep_positions: dict
    token_positions: list = field(default_factory=list)
    token_ids: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.entries)


def build_input(seq: TokenSequence, usage: PolicySelection,
                lm: TransformerLM, tok: Tok | None) -> BuiltInput:
    """Assemble input rows, replacing usage-selected words with encoder output.

    Output length is n_tokens - (tokens of selected words) + (selected words).
    """
    selected = set(usage.word_indices)
    if selected and tok is None:
        raise ValueError("usage policy selected words but no word encoder is loaded")
    pieces, entries, reps = [], [], {}
    token_positions, token_ids = [], []
    run = []  # pending plain-token ids; one lookup per run of unselected words

    def flush():
        if run:
            pieces.append(lm.embed_ids(list(run)))
            run.clear()

    for wi, (start, end, word) in enumerate(seq.word_spans):
        reps[wi] = len(entries)
        if wi in selected:
            flush()
            pieces.append(ag.reshape(tok.encode_word(word), (1, lm.config.d)))
            entries.append(("word", wi))
        else:
            for offset, tid in enumerate(seq.token_ids[start:end]):
                token_positions.append(len(entries))
                token_ids.append(tid)
                entries.append(("token", wi, start + offset))
                run.append(tid)
    flush()
    vectors = pieces[0] if len(pieces) == 1 else ag.concat(pieces, axis=0)
    return BuiltInput(vectors, entries, reps, token_positions, token_ids)


# --- the three batch objectives -----------------------------------------------


def embedding_target(token_ids, lm: TransformerLM, agg: str) -> ag.Tensor:
    """Aggregate a word's subword embedding rows into one d-vector.

    A single-token word yields its embedding row exactly, whatever agg says.
    """
    rows = lm.embed_ids(list(token_ids))
    if agg == "first_token" or rows.shape[0] == 1:
        return ag.reshape(rows[[0]], (rows.shape[1],))
    if agg == "max_pool":
        return ag.max_pool_over_axis(rows, axis=0)
    if agg == "mean_pool":
        return ag.mean_(rows, axis=0)
    raise ValueError(f"unknown aggregation {agg!r}")


def embedding_loss(words_and_ids, tok: Tok, lm: TransformerLM,
                   agg: str) -> ag.Tensor:
    """Mean distance between encoder outputs and detached embedding targets.

    words_and_ids is an iterable of (word, token_ids) pairs, typically the
    loss-policy selection of one sequence or one batch. Empty input is legal
    and contributes a zero loss.
    """
    pairs = list(words_and_ids)
    if not pairs:
        log.debug("embedding loss: empty selection, contributing 0")
        return ag.constant(np.asarray(0.0))
    with ag.no_grad():
        targets = np.stack([embedding_target(ids, lm, agg).data
                            for _, ids in pairs])
    encoded = tok.encode_batch([word for word, _ in pairs])
    dists = ag.euclidean_distance(encoded, ag.constant(targets))
    return ag.mean_(dists)


def _masked_lm_loss(lm: TransformerLM, built: BuiltInput,
                    mask_rng) -> ag.Tensor | None:
    """Masked LM loss over the built rows; None when nothing is maskable."""
    if not built.token_positions:
        return None
    ids_by_pos = [-1] * built.length
    for pos, tid in zip(built.token_positions, built.token_ids):
        ids_by_pos[pos] = tid
    sel = choose_masks(built.token_positions, lm.config.mask_fraction,
                       mask_rng, ids_by_pos)
    x = lm.mask_rows(built.vectors, sel.positions)
    h = lm.forward(lm.add_positions(x), "masked")
    probs = lm.predict(h, sel.positions)
    return lm.lm_loss(probs, sel.original_ids)


def _gather_generation_rows(h: ag.Tensor, built: BuiltInput,
                            gen: PolicySelection, spans):
    """(representative rows, words to spell) for one sequence's selection."""
    positions = [built.rep_positions[wi] for wi in gen.word_indices]
    return h[positions], [spans[wi][2] for wi in gen.word_indices]


# --- batch step ----------------------------------------------------------------


@dataclass
class BatchLossReport:
    step: int
    kind: str
    total: float
    lm_loss: float | None = None
    embedding_loss: float | None = None
    generation_loss: float | None = None
    params_updated: int = 0
    provenance: str = ""

    def as_row(self) -> str:
        fmt = lambda v: "-" if v is None else f"{v:.6f}"  # noqa: E731
        return "\t".join([str(self.step), self.kind, fmt(self.total),
                          fmt(self.lm_loss), fmt(self.embedding_loss),
                          fmt(self.generation_loss), str(self.params_updated),
                          self.provenance])

    ROW_HEADER = "step\tkind\ttotal\tlm\tembedding\tgeneration\tupdated\tprovenance"


def twopt_loss(bundle: ModelBundle, vocab: Vocabulary, cfg: TwoPTConfig,
               batch, epoch: int = 0):
    """Assemble the weighted batch loss. batch is [(sequence_index, seq), ...].

    Returns (total Tensor or None, parts dict of floats). Zero-weight terms
    are never computed, so their parameters receive no gradient at all.
    Raises on usage/generation misalignment (the configuration is invalid).
    """
    lm, tok, detok = bundle.lm, bundle.tok, bundle.detok
    lm_pieces, emb_pairs = [], []
    gen_rows, gen_words, gen_seqs = [], [], 0
    want_lm = cfg.lm_weight > 0
    want_emb = cfg.embedding_weight > 0
    want_gen = cfg.generation_weight > 0

    for seq_index, seq in batch:
        usage = select(cfg.usage_policy, seq, vocab, seq_index)
        gen = select(cfg.gen_policy, seq, vocab, seq_index)
        bad = validate_alignment(usage, gen, seq)
        if bad:
            raise ValueError(
                "usage/generation policies misaligned: multi-token words "
                f"{bad} selected for generation but not encoded")

        if want_emb:
            loss_sel = select(cfg.loss_policy, seq, vocab, seq_index)
            for wi in loss_sel.word_indices:
                start, end, word = seq.word_spans[wi]
                emb_pairs.append((word, list(seq.token_ids[start:end])))

        if want_lm or want_gen:
            built = build_input(seq, usage, lm, tok)
            need_plain_h = (want_gen and len(gen)) or (
                want_lm and lm.config.objective == "autoregressive"
                and built.token_positions)
            h = (lm.forward(lm.add_positions(built.vectors))
                 if need_plain_h else None)
            if want_lm:
                if lm.config.objective == "masked":
                    rng = substream(cfg.seed, "masking", epoch, seq_index)
                    piece = _masked_lm_loss(lm, built, rng)
                    if piece is not None:
                        lm_pieces.append(piece)
                elif built.token_positions:
                    probs = lm.predict(h, built.token_positions)
                    lm_pieces.append(lm.lm_loss(probs, built.token_ids))
            if want_gen and len(gen):
                rows, words = _gather_generation_rows(h, built, gen,
                                                      seq.word_spans)
                gen_rows.append(rows)
                gen_words.extend(words)
                gen_seqs += 1

    def batch_mean(pieces):
        if not pieces:
            return None
        total = pieces[0]
        for p in pieces[1:]:
            total = ag.add(total, p)
        return ag.mul(total, 1.0 / len(pieces))

    # every word in the batch spells in one decoder pass; dividing the summed
    # loss by the sequence count reproduces the mean of per-sequence sums
    gen_piece = None
    if gen_rows:
        rows = gen_rows[0] if len(gen_rows) == 1 else ag.concat(gen_rows, axis=0)
        gen_piece = ag.mul(detok.teacher_forced_batch(rows, gen_words),
                           1.0 / gen_seqs)

    parts = {}
    total = None
    for name, weight, piece in (
        ("lm", cfg.lm_weight, batch_mean(lm_pieces)),
        ("embedding", cfg.embedding_weight,
         embedding_loss(emb_pairs, tok, lm, cfg.agg) if want_emb else None),
        ("generation", cfg.generation_weight, gen_piece),
    ):
        if piece is None:
            parts[name] = None
            continue
        parts[name] = float(piece.data)
        term = ag.mul(piece, weight)
        total = term if total is None else ag.add(total, term)
    return total, parts


def twopt_step(bundle: ModelBundle, vocab: Vocabulary, cfg: TwoPTConfig,
               batch, optimizer: Adam, epoch: int = 0,
               lr: float | None = None, step: int = 0) -> BatchLossReport:
    """One optimizer update over a batch; all three losses share the step."""
    total, parts = twopt_loss(bundle, vocab, cfg, batch, epoch)
    provenance = (f"seed={cfg.seed} epoch={epoch} "
                  f"seqs={','.join(str(i) for i, _ in batch)}")
    if total is None:
        ag.reset_tape()
        return BatchLossReport(step, "2pt", 0.0, provenance=provenance)
    value = float(total.data)
    bad = [n for n, v in parts.items() if v is not None and not math.isfinite(v)]
    if bad or not math.isfinite(value):
        ag.reset_tape()
        raise RuntimeError(
            f"non-finite loss at step {step} ({provenance}): "
            + " ".join(f"{n}={v}" for n, v in parts.items()))
    optimizer.zero_grad()
    ag.backward(total)
    updated = optimizer.step(lr=lr)
    return BatchLossReport(step, "2pt", value, parts["lm"], parts["embedding"],
                           parts["generation"], updated, provenance)


# --- cycle batches --------------------------------------------------------------


def sample_sphere_vectors(n: int, d: int, rng) -> np.ndarray:
    """(n, d) gaussian vectors with E[squared norm] = 1."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    return rng.standard_normal((n, d)) / math.sqrt(d)


def cycle_td_batch(words, tok, detok) -> ag.Tensor:
    """Spell each word back from its own encoder vector; summed char loss.

    Gradients flow into both the encoder and the decoder.
    """
    words = list(words)
    if not words:
        raise ValueError("cycle_td_batch: empty word list")
    return detok.teacher_forced_batch(tok.encode_batch(words), words)


def cycle_dt_batch(tok, detok, vectors: np.ndarray):
    """Decode random vectors, re-encode the strings, pull encodings back.

    The decoder runs greedily without gradient tracking, so its parameters
    are untouched; only the encoder learns. Returns (loss or None, n_kept,
    n_empty); loss is None when every generation came back empty.
    """
    kept_words, kept_rows = [], []
    for row in vectors:
        word = detok.generate(ag.constant(row), tok.config.max_word_len)
        if word:
            kept_words.append(word)
            kept_rows.append(row)
    n_empty = len(vectors) - len(kept_words)
    if n_empty:
        log.info("dt cycle: skipped %d empty generations of %d",
                 n_empty, len(vectors))
    if not kept_words:
        return None, 0, n_empty
    encoded = tok.encode_batch(kept_words)
    dists = ag.euclidean_distance(encoded, ag.constant(np.stack(kept_rows)))
    return ag.mean_(dists), len(kept_words), n_empty


def _run_cycle(bundle, cfg, pool, optimizer, cycle_index, lr, step):
    """One alternating cycle batch; even indices spell, odd ones invert."""
    if cycle_index % 2 == 0:
        rng = substream(cfg.seed, "cycle", "td", cycle_index)
        idx = rng.integers(0, len(pool), size=cfg.cycle_batch)
        loss = cycle_td_batch([pool[i] for i in idx], bundle.tok, bundle.detok)
        kind, extra = "cycle_td", ""
    else:
        rng = substream(cfg.seed, "cycle", "dt", cycle_index)
        vectors = sample_sphere_vectors(cfg.cycle_batch, bundle.lm.config.d, rng)
        loss, kept, empty = cycle_dt_batch(bundle.tok, bundle.detok, vectors)
        kind, extra = "cycle_dt", f" kept={kept} empty={empty}"
    provenance = f"seed={cfg.seed} cycle={cycle_index}{extra}"
    if loss is None:
        ag.reset_tape()
        return BatchLossReport(step, kind, 0.0, provenance=provenance)
    value = float(loss.data)
    if not math.isfinite(value):
        ag.reset_tape()
        raise RuntimeError(f"non-finite {kind} loss at step {step}: {value}")
    optimizer.zero_grad()
    ag.backward(loss)
    updated = optimizer.step(lr=lr)
    return BatchLossReport(step, kind, value, params_updated=updated,
                           provenance=provenance)


# --- full run --------------------------------------------------------------------


def sample_detok_monitor(detok, n: int, d: int, seed: int,
                         max_len: int = 64) -> list:
    """Greedy decodings of fresh sphere vectors, for eyeballing decoder drift."""
    rng = substream(seed, "detok-monitor")
    vectors = sample_sphere_vectors(n, d, rng)
    with ag.no_grad():
        return [detok.generate(ag.constant(v), max_len) for v in vectors]


def run_2pt(lines, vocab: Vocabulary, bundle: ModelBundle, cfg: TwoPTConfig,
            trajectory_path=None, checkpoint_path=None,
            monitor_samples: int = 0) -> list:
    """Train for cfg.epochs over the corpus; returns one report per update.

    Cycle batches fire after every cfg.cycle_interval main steps, alternating
    text->vector->text then vector->text->vector. The trajectory file gets
    exactly one row per report. A checkpoint is written at each epoch end.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    lines = list(lines)
    char_losses_on = cfg.embedding_weight > 0 or cfg.generation_weight > 0
    if bundle.tok is None and (char_losses_on or cfg.cycle_interval > 0):
        raise ValueError("character losses or cycles need tok/detok in the bundle")

    seqs = prepare_sequences(lines, vocab, bundle.lm.config.max_seq_len)
    if not seqs:
        raise ValueError("no usable sequences in the corpus")
    pool = None
    if cfg.cycle_interval > 0:
        pool = frequency_pool(word_frequencies(lines), cfg.cycle_top_k)
        if not pool:
            raise ValueError("cycle batches need a non-empty frequency pool")

    optimizer = Adam(bundle.named_params(), lr=cfg.lr)
    steps_per_epoch = (len(seqs) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    lr_at = (warmup_linear_schedule(cfg.lr, total_steps)
             if cfg.schedule == "warmup_linear" else lambda _: cfg.lr)

    reports = []
    out = open(trajectory_path, "w") if trajectory_path else None
    try:
        if out:
            out.write(BatchLossReport.ROW_HEADER + "\n")

        def emit(report):
            reports.append(report)
            if out:
                out.write(report.as_row() + "\n")
                out.flush()

        step = 0
        cycle_index = 0
        for epoch in range(cfg.epochs):
            order = np.arange(len(seqs))
            if cfg.shuffle:
                order = substream(cfg.seed, "data-order", epoch).permutation(order)
            for lo in range(0, len(order), cfg.batch_size):
                batch = [(int(i), seqs[int(i)]) for i in order[lo:lo + cfg.batch_size]]
                lr = lr_at(step)
                emit(twopt_step(bundle, vocab, cfg, batch, optimizer,
                                epoch=epoch, lr=lr, step=step))
                step += 1
                if cfg.cycle_interval > 0 and step % cfg.cycle_interval == 0:
                    emit(_run_cycle(bundle, cfg, pool, optimizer,
                                    cycle_index, lr, step))
                    cycle_index += 1
            if checkpoint_path:
                save_checkpoint(checkpoint_path, bundle,
                                meta={"epoch": epoch + 1, "step": step,
                                      "config": cfg.to_dict()})
            if monitor_samples > 0 and bundle.detok is not None:
                samples = sample_detok_monitor(bundle.detok, monitor_samples,
                                               bundle.lm.config.d,
                                               cfg.seed + epoch)
                log.info("epoch %d decoder samples: %s", epoch + 1,
                         " ".join(repr(s) for s in samples))
    finally:
        if out:
            out.close()
    return reports
