"""Command-line front end.

Each subcommand resolves its settings in three layers (dataclass defaults,
an optional --config JSON file, then explicit flags, which win), writes the
resolved snapshot next to its outputs, and derives every random draw from
one root --seed. Runs are deterministic given the same inputs, config, and
seed. Errors exit nonzero with a message naming the offending field or file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (
    ModelBundle,
    file_sha256,
    format_param_diff,
    load_checkpoint,
    new_bundle,
    param_diff,
    read_manifest,
    save_checkpoint,
)
from .corpus_stats import compute_stats, format_stats_table
from .downstream import (
    FinetuneConfig,
    SetupConfig,
    TaskModel,
    evaluate,
    finetune,
)
from .second_pretrain import (
    TwoPTConfig,
    plain_lm_config,
    run_2pt,
    sample_detok_monitor,
)
from .tasks import EvalResult, TaskSpec, load_task, parse_partition
from .tokenizer import Vocabulary, train_bpe, vocab_discrepancy
from .transformer import ModelConfig
from .word_decoder import Detok, DetokConfig
from .word_encoder import CharVocabulary, Tok, TokConfig

log = logging.getLogger(__name__)

SEQUENCE_LEVEL_TASKS = ("sequence_classification", "ranking")
DEFAULT_EPOCHS_WORD_LEVEL = 20
DEFAULT_EPOCHS_SEQUENCE_LEVEL = 3


# --- config plumbing -------------------------------------------------------------


def _read_corpus(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        raise ValueError(f"corpus file {path} is empty")
    return lines


def _load_config_file(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return data


def _layered(config_path, overrides: dict) -> dict:
    merged = _load_config_file(config_path) if config_path else {}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _check_fields(cls, values: dict) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
    return values


def _snapshot(path: Path, command: str, resolved: dict) -> None:
    """The resolved-config record written next to every run's outputs."""
    payload = {"command": command, "resolved": resolved}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _sidecar(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".config.json")


def _policy_arg(value: str | None, role: str):
    """A policy flag is either a kind name or an inline JSON object."""
    if value is None:
        return None
    if value.strip().startswith("{"):
        d = json.loads(value)
        d.setdefault("role", role)
        return d
    return {"kind": value, "role": role}


# --- subcommands ------------------------------------------------------------------


def cmd_train_tokenizer(args) -> int:
    corpus = _read_corpus(args.corpus)
    merged = _layered(args.config, {
        "target_size": args.target_size,
        "scheme": args.scheme,
        "seed": args.seed,
    })
    merged.setdefault("scheme", "continuation_mark")
    merged.setdefault("seed", 0)
    if "target_size" not in merged:
        raise ValueError("missing required field 'target_size'")
    for key in merged:
        if key not in ("target_size", "scheme", "seed"):
            raise ValueError(f"unknown tokenizer field {key!r}")
    vocab = train_bpe(corpus, target_size=merged["target_size"],
                      seed=merged["seed"], scheme=merged["scheme"])
    vocab.save(args.out)
    _snapshot(_sidecar(args.out), "train-tokenizer",
              {**merged, "corpus": str(args.corpus), "out": str(args.out)})
    print(f"trained {len(vocab.tokens)}-token vocabulary "
          f"({merged['scheme']}) -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    corpus = _read_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab)
    stats = compute_stats(corpus, vocab)
    name = Path(args.corpus).name
    table = format_stats_table([(name, stats)])
    print(table)
    if args.out:
        Path(args.out).write_text(
            json.dumps({name: stats.to_dict()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        _snapshot(_sidecar(args.out), "stats",
                  {"corpus": str(args.corpus), "vocab": str(args.vocab),
                   "out": str(args.out)})
    return 0


def _model_config_from(merged: dict, vocab: Vocabulary) -> ModelConfig:
    merged = dict(merged)
    merged.setdefault("vocab_size", len(vocab.tokens))
    if merged["vocab_size"] != len(vocab.tokens):
        raise ValueError(
            f"vocab_size {merged['vocab_size']} does not match the "
            f"{len(vocab.tokens)}-token vocabulary")
    return ModelConfig(**_check_fields(ModelConfig, merged))


_TRAIN_KEYS = ("seed", "lr", "epochs", "batch_size")


def _split_train_keys(merged: dict) -> tuple:
    train = {k: merged.pop(k) for k in list(merged) if k in _TRAIN_KEYS}
    return merged, train


def cmd_pretrain(args) -> int:
    corpus = _read_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab)
    merged = _layered(args.config, {
        "d": args.d, "layers": args.layers, "heads": args.heads,
        "ff_dim": args.ff_dim, "max_seq_len": args.max_seq_len,
        "objective": args.objective, "seed": args.seed, "lr": args.lr,
        "epochs": args.epochs, "batch_size": args.batch_size,
    })
    arch, train = _split_train_keys(merged)
    model_cfg = _model_config_from(arch, vocab)
    seed = train.pop("seed", 0)
    cfg = plain_lm_config(seed=seed, **train)
    bundle = new_bundle(model_cfg, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trajectory = args.trajectory or f"{out}.trajectory.tsv"
    reports = run_2pt(corpus, vocab, bundle, cfg, trajectory_path=trajectory)
    save_checkpoint(out, bundle,
                    meta={"command": "pretrain", "steps": len(reports)},
                    vocab_sha256=file_sha256(args.vocab))
    _snapshot(_sidecar(out), "pretrain", {
        "model": model_cfg.to_dict(), "train": cfg.to_dict(),
        "corpus": str(args.corpus), "vocab": str(args.vocab),
        "out": str(out), "trajectory": str(trajectory),
    })
    print(f"pretrained {model_cfg.objective} model for {len(reports)} steps "
          f"-> {out}")
    return 0


def _attach_char_modules(bundle: ModelBundle, corpus, seed: int,
                         args) -> ModelBundle:
    """Graft fresh encoder/decoder modules onto a plain-LM checkpoint."""
    d = bundle.lm.config.d
    words = sorted({w for line in corpus for w in line.split()})
    char_vocab = CharVocabulary.from_words(words, char_dim=args.char_dim)
    tok_cfg = TokConfig(channels=args.tok_channels, d=d,
                        max_word_len=args.max_word_len)
    detok_cfg = DetokConfig(hidden=args.detok_hidden,
                            head_dim=args.detok_head_dim, d=d,
                            max_word_len=args.max_word_len)
    tok = Tok(char_vocab, tok_cfg, seed=seed)
    detok = Detok(char_vocab, detok_cfg, tok, seed=seed)
    log.info("attached fresh character modules (chars=%d, channels=%d, "
             "hidden=%d)", len(char_vocab.chars), tok_cfg.channels,
             detok_cfg.hidden)
    return ModelBundle(bundle.lm, tok, detok, char_vocab)


def _check_vocab_match(ckpt_path, vocab_path) -> None:
    manifest = read_manifest(ckpt_path)
    stored = manifest.get("vocab_sha256")
    if stored and stored != file_sha256(vocab_path):
        raise ValueError(
            f"checkpoint {ckpt_path} was built with a different vocabulary "
            f"than {vocab_path} (vocab_sha256 mismatch)")


def cmd_second_pretrain(args) -> int:
    corpus = _read_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab)
    _check_vocab_match(args.init, args.vocab)
    bundle = load_checkpoint(args.init)
    merged = _layered(args.config, {
        "seed": args.seed, "agg": args.agg, "lr": args.lr,
        "schedule": args.schedule, "batch_size": args.batch_size,
        "epochs": args.epochs, "lm_weight": args.lm_weight,
        "embedding_weight": args.embedding_weight,
        "generation_weight": args.generation_weight,
        "cycle_interval": args.cycle_interval,
        "cycle_top_k": args.cycle_top_k, "cycle_batch": args.cycle_batch,
        "usage_policy": _policy_arg(args.usage_policy, "usage"),
        "loss_policy": _policy_arg(args.loss_policy, "loss"),
        "gen_policy": _policy_arg(args.gen_policy, "generation"),
    })
    if args.loss_fraction is not None:
        merged["loss_policy"] = {"kind": "random_fraction", "role": "loss",
                                 "p": args.loss_fraction,
                                 "seed": merged.get("seed", 0)}
    cfg = TwoPTConfig.from_dict(_check_fields(TwoPTConfig, merged))
    if not bundle.has_char_modules:
        bundle = _attach_char_modules(bundle, corpus, cfg.seed, args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trajectory = args.trajectory or f"{out}.trajectory.tsv"
    reports = run_2pt(corpus, vocab, bundle, cfg, trajectory_path=trajectory,
                      monitor_samples=args.monitor_samples)
    save_checkpoint(out, bundle,
                    meta={"command": "second-pretrain", "steps": len(reports)},
                    vocab_sha256=file_sha256(args.vocab))
    _snapshot(_sidecar(out), "second-pretrain", {
        "config": cfg.to_dict(), "corpus": str(args.corpus),
        "vocab": str(args.vocab), "init": str(args.init), "out": str(out),
        "trajectory": str(trajectory),
    })
    print(f"second pre-training ran {len(reports)} steps -> {out}")
    return 0


def _save_head(run_dir: Path, head, task: TaskSpec, labels: list,
               seed: int) -> None:
    arrays = {name: t.data for name, t in head.named_params("")}
    np.savez(run_dir / "head.npz", **arrays)
    spec = {"kind": task.kind, "labels": labels, "seed": seed,
            "hidden": getattr(head, "hidden", None)}
    (run_dir / "head.json").write_text(
        json.dumps(spec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_head(run_dir: Path, d: int):
    spec = json.loads((run_dir / "head.json").read_text(encoding="utf-8"))
    head = _rebuild_head(spec["kind"], d, len(spec["labels"]), spec)
    with np.load(run_dir / "head.npz") as data:
        for name, tensor in head.named_params(""):
            stored = data[name]
            if stored.shape != tensor.shape:
                raise ValueError(f"head parameter {name} has shape "
                                 f"{stored.shape}, expected {tensor.shape}")
            tensor.data = stored.astype(tensor.data.dtype, copy=True)
    return head, spec


def _rebuild_head(kind: str, d: int, n_labels: int, spec: dict):
    from .downstream import LogisticHead, LSTMTagHead, MLPHead

    if kind == "sequence_classification":
        return MLPHead(d, n_labels, seed=spec["seed"], hidden=spec.get("hidden"))
    if kind == "ranking":
        return MLPHead(d, 1, seed=spec["seed"], hidden=spec.get("hidden"))
    if kind == "sequence_tagging":
        return LSTMTagHead(d, n_labels, seed=spec["seed"],
                           hidden=spec.get("hidden"))
    if kind == "word_classification":
        return LogisticHead(d, n_labels, seed=spec["seed"])
    raise ValueError(f"unknown task kind {kind!r}")


def cmd_finetune(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    _check_vocab_match(args.init, args.vocab)
    bundle = load_checkpoint(args.init)
    task = load_task(args.task_kind, args.train, args.dev, args.test)
    merged = _layered(args.config, {
        "head_lr": args.head_lr, "body_lr": args.body_lr,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "patience": args.patience, "seed": args.seed,
        "span_f1": args.span_f1 or None,
    })
    if "epochs" not in merged:
        merged["epochs"] = (DEFAULT_EPOCHS_SEQUENCE_LEVEL
                            if args.task_kind in SEQUENCE_LEVEL_TASKS
                            else DEFAULT_EPOCHS_WORD_LEVEL)
    cfg = FinetuneConfig(**_check_fields(FinetuneConfig, merged))
    setup = SetupConfig(args.setup, fine_tune_body=not args.freeze_body,
                        p=args.stochastic_p, seed=cfg.seed,
                        aux_embedding_weight=args.aux_embedding_weight)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)

    model, results = finetune(task, setup, bundle, vocab, cfg)
    if "test" in task.partitions:
        best = max(results, key=lambda r: r.value)
        value = evaluate(model, task.partitions["test"], span_f1=cfg.span_f1)
        results.append(EvalResult(task.kind, setup.kind, "test",
                                  results[0].metric, value, best.epoch,
                                  cfg.seed))
    rows = [EvalResult.ROW_HEADER] + [r.as_row() for r in results]
    (run_dir / "results.tsv").write_text("\n".join(rows) + "\n",
                                         encoding="utf-8")
    save_checkpoint(run_dir / "model.ckpt", bundle,
                    meta={"command": "finetune", "task": task.kind,
                          "setup": setup.kind},
                    vocab_sha256=file_sha256(args.vocab))
    _save_head(run_dir, model.head, task, model.labels, cfg.seed)
    _snapshot(run_dir / "config.json", "finetune", {
        "task_kind": task.kind, "setup": setup.to_dict(),
        "finetune": cfg.to_dict(), "vocab": str(args.vocab),
        "init": str(args.init), "train": str(args.train),
        "dev": str(args.dev), "test": str(args.test) if args.test else None,
        "out": str(run_dir),
    })
    for row in rows:
        print(row)
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    snapshot = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    resolved = snapshot["resolved"]
    vocab_path = args.vocab or resolved["vocab"]
    vocab = Vocabulary.load(vocab_path)
    _check_vocab_match(run_dir / "model.ckpt", vocab_path)
    bundle = load_checkpoint(run_dir / "model.ckpt")
    head, head_spec = _load_head(run_dir, bundle.lm.config.d)
    kind = head_spec["kind"]
    instances = parse_partition(kind, args.data)
    if not instances:
        raise ValueError(f"partition file {args.data} is empty")
    setup = SetupConfig.from_dict(resolved["setup"])
    task = TaskSpec(kind, {args.partition: instances})
    model = TaskModel(bundle, vocab, task, setup, head,
                      label_order=head_spec["labels"])
    span_f1 = resolved.get("finetune", {}).get("span_f1", False)
    value = evaluate(model, instances, span_f1=span_f1)
    metric = "mrr" if kind == "ranking" else "micro_f1"
    row = EvalResult(kind, setup.kind, args.partition, metric, value,
                     epoch=-1, seed=resolved.get("finetune", {}).get("seed", 0))
    print(EvalResult.ROW_HEADER)
    print(row.as_row())
    if args.out:
        Path(args.out).write_text(
            EvalResult.ROW_HEADER + "\n" + row.as_row() + "\n",
            encoding="utf-8")
        _snapshot(_sidecar(args.out), "eval", {
            "run": str(run_dir), "data": str(args.data),
            "partition": args.partition, "vocab": str(vocab_path),
            "out": str(args.out),
        })
    return 0


def cmd_sample_detok(args) -> int:
    bundle = load_checkpoint(args.init)
    if not bundle.has_char_modules:
        raise ValueError(f"checkpoint {args.init} has no character decoder")
    words = sample_detok_monitor(bundle.detok, args.count,
                                 bundle.lm.config.d, args.seed,
                                 max_len=args.max_len)
    for word in words:
        print(word if word else "<empty>")
    if args.out:
        Path(args.out).write_text("\n".join(words) + "\n", encoding="utf-8")
        _snapshot(_sidecar(args.out), "sample-detok", {
            "init": str(args.init), "count": args.count, "seed": args.seed,
            "max_len": args.max_len, "out": str(args.out),
        })
    return 0


def cmd_param_diff(args) -> int:
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    table = format_param_diff(param_diff(a, b))
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n", encoding="utf-8")
    return 0


def cmd_vocab_diff(args) -> int:
    a = Vocabulary.load(args.vocab_a)
    b = Vocabulary.load(args.vocab_b)
    value = vocab_discrepancy(a, b)
    print(f"vocab_discrepancy\t{value:.6f}")
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chargraft",
        description="character-level retrofit toolkit for subword LMs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tokenizer", help="learn a BPE vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--target-size", dest="target_size", type=int)
    p.add_argument("--scheme", choices=("continuation_mark", "space_prefix"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("stats", help="corpus statistics under a vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="train a plain subword LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--trajectory")
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ff-dim", dest="ff_dim", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.add_argument("--objective", choices=("masked", "autoregressive"))
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("second-pretrain",
                       help="retrofit character modules onto a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--trajectory")
    p.add_argument("--seed", type=int)
    p.add_argument("--agg", choices=("max_pool", "mean_pool", "first_token"))
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("warmup_linear", "constant"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lm-weight", dest="lm_weight", type=float)
    p.add_argument("--embedding-weight", dest="embedding_weight", type=float)
    p.add_argument("--generation-weight", dest="generation_weight", type=float)
    p.add_argument("--cycle-interval", dest="cycle_interval", type=int)
    p.add_argument("--cycle-top-k", dest="cycle_top_k", type=int)
    p.add_argument("--cycle-batch", dest="cycle_batch", type=int)
    p.add_argument("--usage-policy", dest="usage_policy",
                   help="policy kind or inline JSON")
    p.add_argument("--loss-policy", dest="loss_policy")
    p.add_argument("--gen-policy", dest="gen_policy")
    p.add_argument("--loss-fraction", dest="loss_fraction", type=float,
                   help="shorthand for a random_fraction loss policy")
    p.add_argument("--char-dim", dest="char_dim", type=int, default=32)
    p.add_argument("--tok-channels", dest="tok_channels", type=int, default=64)
    p.add_argument("--detok-hidden", dest="detok_hidden", type=int, default=64)
    p.add_argument("--detok-head-dim", dest="detok_head_dim", type=int,
                   default=64)
    p.add_argument("--max-word-len", dest="max_word_len", type=int, default=24)
    p.add_argument("--monitor-samples", dest="monitor_samples", type=int,
                   default=0)
    p.set_defaults(func=cmd_second_pretrain)

    p = sub.add_parser("finetune", help="train a task head on a checkpoint")
    p.add_argument("--task-kind", dest="task_kind", required=True,
                   choices=("sequence_classification", "sequence_tagging",
                            "word_classification", "ranking"))
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--test")
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config")
    p.add_argument("--setup", required=True,
                   choices=("none", "none_plus_2pt", "scaffolding",
                            "stochastic", "all_no_suff", "all_multi"))
    p.add_argument("--freeze-body", dest="freeze_body", action="store_true")
    p.add_argument("--stochastic-p", dest="stochastic_p", type=float,
                   default=0.10)
    p.add_argument("--aux-embedding-weight", dest="aux_embedding_weight",
                   type=float, default=0.0)
    p.add_argument("--head-lr", dest="head_lr", type=float)
    p.add_argument("--body-lr", dest="body_lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--span-f1", dest="span_f1", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a finetune run on a partition file")
    p.add_argument("--run", required=True, help="finetune output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--partition", default="test")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-detok",
                       help="decode words from random context vectors")
    p.add_argument("--init", required=True)
    p.add_argument("-n", "--count", dest="count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", dest="max_len", type=int, default=24)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_detok)

    p = sub.add_parser("param-diff",
                       help="per-parameter distance between two checkpoints")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_param_diff)

    p = sub.add_parser("vocab-diff",
                       help="segmentation discrepancy between two vocabularies")
    p.add_argument("vocab_a")
    p.add_argument("vocab_b")
    p.set_defaults(func=cmd_vocab_diff)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
