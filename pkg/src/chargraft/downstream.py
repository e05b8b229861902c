"""Fine-tuning and evaluation harness: setups, task heads, and metrics.

A setup decides which checkpoint flavor is loaded and which words are routed
through the character encoder at task time. Heads sit on the contextual
vectors: a two-layer ReLU MLP over the sequence representative (first row
for masked models, last row for autoregressive ones), a word-level recurrent
tagger, and a logistic layer over one word's vector. Training uses two
optimizer groups (head vs body) with separate peak learning rates, a shared
10%-warmup linear-decay schedule, and dev-metric early stopping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .checkpoint import ModelBundle
from .optim import Adam, clone_params, warmup_linear_schedule
from .policies import PolicyConfig, select
from .rng import substream
from .second_pretrain import BuiltInput, build_input, embedding_loss
from .tasks import EvalResult, RankingGroup, TaskSpec
from .tokenizer import TokenSequence, Vocabulary, tokenize

log = logging.getLogger(__name__)

SETUP_KINDS = ("none", "none_plus_2pt", "scaffolding", "stochastic",
               "all_no_suff", "all_multi")
RANKING_SEPARATOR = "|"


@dataclass
class SetupConfig:
    """An experimental condition: checkpoint flavor + inference-time policy.

    `scaffolding` and `none_plus_2pt` both run base-embedding-only inference;
    what distinguishes them is the checkpoint they are pointed at (a 2PT run
    with word substitution vs one without), which the harness logs.
    """

    kind: str
    fine_tune_body: bool = True
    p: float = 0.10
    seed: int = 0
    aux_embedding_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in SETUP_KINDS:
            raise ValueError(f"unknown setup kind {self.kind!r}")
        if self.kind == "stochastic" and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"stochastic fraction {self.p} outside [0, 1]")

    def inference_policy(self) -> PolicyConfig:
        """Which words the encoder replaces while fine-tuning and evaluating."""
        if self.kind in ("none", "none_plus_2pt", "scaffolding"):
            return PolicyConfig("none", role="usage")
        if self.kind == "stochastic":
            return PolicyConfig("random_fraction", role="usage", p=self.p,
                                seed=self.seed)
        return PolicyConfig(self.kind, role="usage")

    def needs_char_modules(self) -> bool:
        return self.kind in ("stochastic", "all_no_suff", "all_multi") or \
            self.aux_embedding_weight > 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SetupConfig":
        return cls(**d)


# --- task heads -----------------------------------------------------------------


def _head_init(name: str, shape, seed: int) -> np.ndarray:
    rng = substream(seed, "init", "head", name)
    if name.endswith(("b", "b1", "b2")) or name.startswith("b"):
        return np.zeros(shape)
    return rng.normal(0.0, 0.02, size=shape)


class _Head:
    def __init__(self, shapes: dict, seed: int):
        self.params = {name: ag.Tensor(_head_init(name, shape, seed),
                                       requires_grad=True)
                       for name, shape in sorted(shapes.items())}

    def named_params(self, prefix: str = "head.") -> list:
        return [(prefix + n, t) for n, t in sorted(self.params.items())]

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


class MLPHead(_Head):
    """Two-layer ReLU perceptron over one d-vector."""

    def __init__(self, d: int, n_out: int, seed: int = 0, hidden: int | None = None):
        hidden = hidden or d
        self.d, self.n_out, self.hidden = d, n_out, hidden
        super().__init__({"w1": (d, hidden), "b1": (hidden,),
                          "w2": (hidden, n_out), "b2": (n_out,)}, seed)

    def scores(self, vec: ag.Tensor) -> ag.Tensor:
        x = ag.reshape(vec, (1, self.d))
        h = ag.relu(ag.add_bias(ag.matmul(x, self.params["w1"]),
                                self.params["b1"]))
        out = ag.add_bias(ag.matmul(h, self.params["w2"]), self.params["b2"])
        return ag.reshape(out, (self.n_out,))


class LSTMTagHead(_Head):
    """One recurrent layer over word vectors, then a linear label layer."""

    def __init__(self, d: int, n_labels: int, seed: int = 0,
                 hidden: int | None = None):
        hidden = hidden or d
        self.d, self.n_labels, self.hidden = d, n_labels, hidden
        super().__init__({"wx": (d, 4 * hidden), "wh": (hidden, 4 * hidden),
                          "b": (4 * hidden,), "out_w": (hidden, n_labels),
                          "out_b": (n_labels,)}, seed)

    def label_scores(self, reps: ag.Tensor) -> ag.Tensor:
        """(n_words, n_labels) logits; consumes exactly one vector per word."""
        n, hs = reps.shape[0], self.hidden
        h = ag.constant(np.zeros((1, hs)))
        c = ag.constant(np.zeros((1, hs)))
        rows = []
        for i in range(n):
            x = reps[[i]]
            gates = ag.add_bias(
                ag.add(ag.matmul(x, self.params["wx"]),
                       ag.matmul(h, self.params["wh"])), self.params["b"])
            i_g = ag.sigmoid(gates[:, 0 * hs:1 * hs])
            f_g = ag.sigmoid(gates[:, 1 * hs:2 * hs])
            g_g = ag.tanh(gates[:, 2 * hs:3 * hs])
            o_g = ag.sigmoid(gates[:, 3 * hs:4 * hs])
            c = ag.add(ag.mul(f_g, c), ag.mul(i_g, g_g))
            h = ag.mul(o_g, ag.tanh(c))
            rows.append(ag.add_bias(ag.matmul(h, self.params["out_w"]),
                                    self.params["out_b"]))
        return rows[0] if n == 1 else ag.concat(rows, axis=0)


class LogisticHead(_Head):
    """Single linear layer over one word's vector."""

    def __init__(self, d: int, n_labels: int, seed: int = 0):
        self.d, self.n_labels = d, n_labels
        super().__init__({"w": (d, n_labels), "b": (n_labels,)}, seed)

    def scores(self, vec: ag.Tensor) -> ag.Tensor:
        out = ag.add_bias(ag.matmul(ag.reshape(vec, (1, self.d)),
                                    self.params["w"]), self.params["b"])
        return ag.reshape(out, (self.n_labels,))


def build_head(task: TaskSpec, d: int, seed: int = 0, hidden: int | None = None):
    if task.kind == "sequence_classification":
        return MLPHead(d, len(task.label_set), seed, hidden)
    if task.kind == "ranking":
        return MLPHead(d, 1, seed, hidden)
    if task.kind == "sequence_tagging":
        return LSTMTagHead(d, len(task.label_set), seed, hidden)
    if task.kind == "word_classification":
        return LogisticHead(d, len(task.label_set), seed)
    raise ValueError(f"unknown task kind {task.kind!r}")


# --- representatives ---------------------------------------------------------------


def word_representative(built: BuiltInput, h: ag.Tensor,
                        word_index: int) -> ag.Tensor:
    """The d-vector standing for one word: its encoder row if substituted,
    otherwise its first token's contextual vector."""
    if word_index not in built.rep_positions:
        raise IndexError(f"word index {word_index} out of range")
    pos = built.rep_positions[word_index]
    return ag.reshape(h[[pos]], (h.shape[1],))


def sequence_representative(h: ag.Tensor, objective: str) -> ag.Tensor:
    """First row for masked models, final row for autoregressive ones."""
    pos = 0 if objective == "masked" else h.shape[0] - 1
    return ag.reshape(h[[pos]], (h.shape[1],))


# --- metrics ------------------------------------------------------------------------


def micro_f1(predictions, gold, ignore_label: str | None = None) -> float:
    """Micro-averaged F1. With no ignore_label every position counts (this
    equals accuracy for single-label prediction); with one, the standard
    tagging convention over non-ignored labels applies."""
    predictions, gold = list(predictions), list(gold)
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions vs {len(gold)} gold")
    if ignore_label is None:
        tp = sum(1 for p, g in zip(predictions, gold) if p == g)
        fp = fn = len(gold) - tp
    else:
        tp = sum(1 for p, g in zip(predictions, gold)
                 if p == g and g != ignore_label)
        fp = sum(1 for p, g in zip(predictions, gold)
                 if p != ignore_label and p != g)
        fn = sum(1 for p, g in zip(predictions, gold)
                 if g != ignore_label and p != g)
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def bio_spans(labels) -> set:
    """(kind, start, end) spans from BIO tags; a bare I- opens a span."""
    spans = set()
    start, kind = None, None
    for i, lab in enumerate(list(labels) + ["O"]):
        tag, _, k = lab.partition("-")
        if start is not None and (tag in ("B", "O") or k != kind):
            spans.add((kind, start, i))
            start, kind = None, None
        if tag == "B" or (tag == "I" and start is None):
            start, kind = i, k
    return spans


def span_micro_f1(predicted_seqs, gold_seqs) -> float:
    """Entity-level micro-F1 under the BIO scheme."""
    if len(predicted_seqs) != len(gold_seqs):
        raise ValueError("sequence counts differ")
    tp = fp = fn = 0
    for pred, gold in zip(predicted_seqs, gold_seqs):
        p_spans, g_spans = bio_spans(pred), bio_spans(gold)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def mrr(ranked_lists, gold_ids) -> float:
    """Mean over queries of 1/rank of the gold candidate."""
    ranked_lists, gold_ids = list(ranked_lists), list(gold_ids)
    if len(ranked_lists) != len(gold_ids):
        raise ValueError("ranked list and gold counts differ")
    if not ranked_lists:
        raise ValueError("mrr of zero queries")
    total = 0.0
    for ranking, gold in zip(ranked_lists, gold_ids):
        if gold not in ranking:
            raise ValueError(f"gold id {gold!r} missing from candidates")
        total += 1.0 / (list(ranking).index(gold) + 1)
    return total / len(ranked_lists)


# --- task model ----------------------------------------------------------------------


def _clip_to_model(seq: TokenSequence, max_len: int) -> TokenSequence:
    """First word-boundary chunk that fits the model's position table."""
    if seq.length <= max_len:
        return seq
    ids, spans = [], []
    for start, end, word in seq.word_spans:
        if end > max_len:
            break
        spans.append((start, end, word))
        ids.extend(seq.token_ids[start:end])
    if not ids:
        raise ValueError("first word alone exceeds max_seq_len")
    log.debug("clipped %d-token sequence to %d", seq.length, len(ids))
    return TokenSequence(ids, spans)


@dataclass
class TaskModel:
    """Everything needed to score instances of one task under one setup.

    label_order pins the label-to-row mapping when the instances at hand do
    not cover every label the head was trained with.
    """

    bundle: ModelBundle
    vocab: Vocabulary
    task: TaskSpec
    setup: SetupConfig
    head: object
    label_order: list | None = None

    def __post_init__(self):
        self.labels = self.label_order or self.task.label_set
        self.label_ids = {lab: i for i, lab in enumerate(self.labels)}
        self.policy = self.setup.inference_policy()
        if self.setup.needs_char_modules() and not self.bundle.has_char_modules:
            raise ValueError(
                f"setup {self.setup.kind!r} needs a checkpoint with the "
                "character modules")

    def encode(self, text: str, index: int):
        seq = _clip_to_model(tokenize(text, self.vocab),
                             self.bundle.lm.config.max_seq_len)
        usage = select(self.policy, seq, self.vocab, index)
        built = build_input(seq, usage, self.bundle.lm, self.bundle.tok)
        h = self.bundle.lm.forward(self.bundle.lm.add_positions(built.vectors))
        return seq, built, h

    # -- per-instance losses (training) and predictions (evaluation) --

    def instance_loss(self, instance, index: int) -> ag.Tensor:
        kind = self.task.kind
        if kind == "sequence_classification":
            _, _, h = self.encode(instance.text, index)
            rep = sequence_representative(h, self.bundle.lm.config.objective)
            return self._class_loss(self.head.scores(rep), instance.label)
        if kind == "word_classification":
            seq, built, h = self.encode(instance.text, index)
            if instance.target_index >= len(seq.word_spans):
                raise ValueError("target word was clipped away")
            rep = word_representative(built, h, instance.target_index)
            return self._class_loss(self.head.scores(rep), instance.label)
        if kind == "sequence_tagging":
            seq, built, h = self.encode(" ".join(instance.words), index)
            reps = h[[built.rep_positions[wi] for wi in range(len(seq.word_spans))]]
            logits = self.head.label_scores(reps)
            probs = ag.softmax(logits, axis=-1)
            targets = [self.label_ids[lab]
                       for lab in instance.labels[:len(seq.word_spans)]]
            return ag.cross_entropy(probs, targets, reduction="mean")
        if kind == "ranking":
            pieces = []
            for pi, (passage, is_sel) in enumerate(instance.passages):
                score = self._passage_score(instance.query, passage,
                                            index * 31 + pi)
                pieces.append(_binary_cross_entropy(score, float(is_sel)))
            total = pieces[0]
            for p in pieces[1:]:
                total = ag.add(total, p)
            return ag.mul(total, 1.0 / len(pieces))
        raise ValueError(f"unknown task kind {kind!r}")

    def _class_loss(self, logits: ag.Tensor, label: str) -> ag.Tensor:
        probs = ag.softmax(ag.reshape(logits, (1, len(self.labels))), axis=-1)
        return ag.cross_entropy(probs, [self.label_ids[label]],
                                reduction="mean")

    def _passage_score(self, query: str, passage: str, index: int) -> ag.Tensor:
        text = f"{query} {RANKING_SEPARATOR} {passage}"
        seq = tokenize(text, self.vocab)
        max_len = self.bundle.lm.config.max_seq_len
        words = passage.split()
        while seq.length > max_len and words:
            words = words[:-1]
            log.debug("truncating passage to %d words", len(words))
            text = f"{query} {RANKING_SEPARATOR} {' '.join(words)}"
            seq = tokenize(text, self.vocab)
        seq = _clip_to_model(seq, max_len)
        usage = select(self.policy, seq, self.vocab, index)
        built = build_input(seq, usage, self.bundle.lm, self.bundle.tok)
        h = self.bundle.lm.forward(self.bundle.lm.add_positions(built.vectors))
        rep = sequence_representative(h, self.bundle.lm.config.objective)
        return ag.reshape(self.head.scores(rep), (1,))

    def predict(self, instance, index: int):
        kind = self.task.kind
        with ag.no_grad():
            if kind == "sequence_classification":
                _, _, h = self.encode(instance.text, index)
                rep = sequence_representative(h, self.bundle.lm.config.objective)
                return self.labels[int(np.argmax(self.head.scores(rep).data))]
            if kind == "word_classification":
                seq, built, h = self.encode(instance.text, index)
                rep = word_representative(built, h, instance.target_index)
                return self.labels[int(np.argmax(self.head.scores(rep).data))]
            if kind == "sequence_tagging":
                seq, built, h = self.encode(" ".join(instance.words), index)
                reps = h[[built.rep_positions[wi]
                          for wi in range(len(seq.word_spans))]]
                logits = self.head.label_scores(reps)
                return [self.labels[int(i)]
                        for i in np.argmax(logits.data, axis=-1)]
            if kind == "ranking":
                return rank_candidates(instance, self, index)
        raise ValueError(f"unknown task kind {kind!r}")


def _binary_cross_entropy(score: ag.Tensor, y: float) -> ag.Tensor:
    prob = ag.sigmoid(score)
    one_minus = ag.add(ag.mul(prob, -1.0), 1.0)
    loss = ag.add(ag.mul(ag.log(prob), -y),
                  ag.mul(ag.log(one_minus), -(1.0 - y)))
    return ag.reshape(loss, ())


def rank_candidates(group: RankingGroup, model: TaskModel,
                    index: int = 0) -> list:
    """Passage indices ordered by descending score; ties keep input order."""
    with ag.no_grad():
        scores = [float(model._passage_score(group.query, passage,
                                             index * 31 + pi).data[0])
                  for pi, (passage, _) in enumerate(group.passages)]
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


# --- evaluation ------------------------------------------------------------------------


def evaluate(model: TaskModel, instances, span_f1: bool = False) -> float:
    """The task's metric over a partition (micro-F1, or MRR for ranking)."""
    kind = model.task.kind
    if kind == "ranking":
        rankings = [model.predict(g, i) for i, g in enumerate(instances)]
        return mrr(rankings, [g.gold_index for g in instances])
    if kind == "sequence_tagging":
        preds = [model.predict(x, i) for i, x in enumerate(instances)]
        golds = [x.labels[:len(p)] for x, p in zip(instances, preds)]
        if span_f1:
            return span_micro_f1(preds, golds)
        flat_p = [lab for seq in preds for lab in seq]
        flat_g = [lab for seq in golds for lab in seq]
        return micro_f1(flat_p, flat_g, ignore_label="O")
    preds = [model.predict(x, i) for i, x in enumerate(instances)]
    return micro_f1(preds, [x.label for x in instances])


# --- fine-tuning -------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    head_lr: float = 1e-3
    body_lr: float = 2e-5
    epochs: int = 20
    batch_size: int = 8
    patience: int = 4
    seed: int = 0
    span_f1: bool = False
    shuffle: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


def finetune(task: TaskSpec, setup: SetupConfig, bundle: ModelBundle,
             vocab: Vocabulary, cfg: FinetuneConfig):
    """Train a head (and optionally the body) on the task's train split.

    Returns (TaskModel at its best dev epoch, EvalResult rows, one per epoch
    evaluated). Two Adam groups with separate peak rates share a 10%-warmup
    linear-decay schedule; training stops once the dev metric has not
    improved for cfg.patience epochs. With fine_tune_body=False the body
    receives no updates at all.
    """
    train = task.partitions.get("train", [])
    if not train:
        raise ValueError("empty training data")
    metric_name = "mrr" if task.kind == "ranking" else "micro_f1"
    log.info("setup %s: inference policy %s, fine_tune_body=%s, char modules %s",
             setup.kind, setup.inference_policy().kind, setup.fine_tune_body,
             "present" if bundle.has_char_modules else "absent")

    head = build_head(task, bundle.lm.config.d, seed=cfg.seed)
    model = TaskModel(bundle, vocab, task, setup, head)
    head_params = head.named_params("head.")
    body_params = bundle.named_params() if setup.fine_tune_body else []
    opt_head = Adam(head_params, lr=cfg.head_lr)
    opt_body = Adam(body_params, lr=cfg.body_lr) if body_params else None

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    head_lr_at = warmup_linear_schedule(cfg.head_lr, total_steps)
    body_lr_at = warmup_linear_schedule(cfg.body_lr, total_steps)

    results = []
    best_value, best_epoch = -1.0, -1
    best_head, best_body = None, None
    step = 0
    for epoch in range(cfg.epochs):
        order = np.arange(len(train))
        if cfg.shuffle:
            order = substream(cfg.seed, "task-order", epoch).permutation(order)
        for lo in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[lo:lo + cfg.batch_size]]
            total = None
            for i in idx:
                piece = model.instance_loss(train[i], i)
                total = piece if total is None else ag.add(total, piece)
            total = ag.mul(total, 1.0 / len(idx))
            if setup.aux_embedding_weight > 0:
                total = ag.add(total, ag.mul(
                    _aux_embedding_loss(model, [train[i] for i in idx], idx),
                    setup.aux_embedding_weight))
            if not math.isfinite(float(total.data)):
                ag.reset_tape()
                raise RuntimeError(f"non-finite task loss at step {step}")
            opt_head.zero_grad()
            if opt_body:
                opt_body.zero_grad()
            ag.backward(total)
            opt_head.step(lr=head_lr_at(step))
            if opt_body:
                opt_body.step(lr=body_lr_at(step))
            step += 1

        value = evaluate(model, task.partitions["dev"], span_f1=cfg.span_f1)
        results.append(EvalResult(task.kind, setup.kind, "dev", metric_name,
                                  value, epoch, cfg.seed))
        log.info("epoch %d dev %s %.4f", epoch, metric_name, value)
        if value > best_value:
            best_value, best_epoch = value, epoch
            best_head = clone_params(head_params)
            best_body = clone_params(body_params) if body_params else None
        elif epoch - best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %.4f at %d)",
                     epoch, best_value, best_epoch)
            break

    for name, tensor in head_params:
        tensor.data = best_head[name].copy()
    if best_body is not None:
        for name, tensor in body_params:
            tensor.data = best_body[name].copy()
    return model, results


def _aux_embedding_loss(model: TaskModel, instances, indices) -> ag.Tensor:
    """Optional fine-tune-time embedding matching on usage-selected words."""
    pairs = []
    for inst, index in zip(instances, indices):
        text = (" ".join(inst.words) if hasattr(inst, "words") else
                getattr(inst, "text", None))
        if text is None:
            continue
        seq = _clip_to_model(tokenize(text, model.vocab),
                             model.bundle.lm.config.max_seq_len)
        usage = select(model.policy, seq, model.vocab, index)
        for wi in usage.word_indices:
            start, end, word = seq.word_spans[wi]
            pairs.append((word, list(seq.token_ids[start:end])))
    return embedding_loss(pairs, model.bundle.tok, model.bundle.lm, "max_pool")
