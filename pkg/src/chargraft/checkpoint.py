"""Model bundle and its on-disk checkpoint format.

A bundle is the base LM plus (optionally) the character-level encoder and
decoder sharing one character inventory. Checkpoints are a single binary
file: a magic line, a length-prefixed JSON manifest (configs, character
inventory, parameter names/shapes in sorted order), then the raw
little-endian parameter data concatenated in exactly that order. Writing is
fully deterministic: identical parameters produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .transformer import ModelConfig, TransformerLM
from .word_decoder import Detok, DetokConfig
from .word_encoder import CharVocabulary, Tok, TokConfig

MAGIC = b"chargraft-ckpt-v1\n"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class ModelBundle:
    lm: TransformerLM
    tok: Tok | None = None
    detok: Detok | None = None
    char_vocab: CharVocabulary | None = None

    def __post_init__(self):
        if (self.tok is None) != (self.detok is None):
            raise ValueError("tok and detok must be present together")
        if self.tok is not None and self.char_vocab is None:
            raise ValueError("char modules need a character vocabulary")

    @property
    def has_char_modules(self) -> bool:
        return self.tok is not None

    def named_params(self) -> list:
        out = list(self.lm.named_params("lm."))
        if self.tok is not None:
            out += self.tok.named_params("tok.")
            out += self.detok.named_params("detok.")
        return out

    def digest(self) -> str:
        """sha256 over parameter names, shapes, and exact bytes."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_params()):
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def new_bundle(model_config: ModelConfig, seed: int,
               tok_config: TokConfig | None = None,
               detok_config: DetokConfig | None = None,
               char_vocab: CharVocabulary | None = None) -> ModelBundle:
    lm = TransformerLM(model_config, seed=seed)
    if tok_config is None:
        return ModelBundle(lm)
    tok = Tok(char_vocab, tok_config, seed=seed)
    detok = Detok(char_vocab, detok_config, tok, seed=seed)
    return ModelBundle(lm, tok, detok, char_vocab)


def save_checkpoint(path, bundle: ModelBundle, meta: dict | None = None,
                    vocab_sha256: str | None = None) -> None:
    params = sorted(bundle.named_params())
    dtype = str(params[0][1].dtype) if params else "float64"
    manifest = {
        "format": "chargraft-checkpoint",
        "version": 1,
        "dtype": dtype,
        "model_config": bundle.lm.config.to_dict(),
        "tok_config": bundle.tok.config.__dict__ if bundle.tok else None,
        "detok_config": bundle.detok.config.__dict__ if bundle.detok else None,
        "char_vocab": (
            {"chars": bundle.char_vocab.chars, "char_dim": bundle.char_vocab.char_dim}
            if bundle.char_vocab else None
        ),
        "vocab_sha256": vocab_sha256,
        "meta": meta or {},
        "params": [[name, list(p.shape)] for name, p in params],
    }
    blob = json.dumps(manifest, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, p in params:
            f.write(np.ascontiguousarray(p.data, dtype=_DTYPES[dtype]).tobytes())


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[offset:offset + 8])
    offset += 8
    manifest = json.loads(raw[offset:offset + n].decode("utf-8"))
    offset += n
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")

    model_config = ModelConfig(**manifest["model_config"])
    char_vocab = None
    tok_config = None
    detok_config = None
    if manifest["char_vocab"] is not None:
        cv = manifest["char_vocab"]
        char_vocab = CharVocabulary(cv["chars"], cv["char_dim"])
        tok_config = TokConfig(**manifest["tok_config"])
        detok_config = DetokConfig(**manifest["detok_config"])
    bundle = new_bundle(model_config, seed=0, tok_config=tok_config,
                        detok_config=detok_config, char_vocab=char_vocab)

    np_dtype = np.dtype(_DTYPES[manifest["dtype"]])
    params = dict(bundle.named_params())
    listed = [name for name, _ in manifest["params"]]
    if set(listed) != set(params) or len(listed) != len(params):
        raise ValueError("checkpoint parameter names do not match the configs")
    for name, shape in manifest["params"]:
        shape = tuple(shape)
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {shape} != expected {params[name].shape}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np_dtype.itemsize
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=np_dtype)
        if arr.size != count:
            raise ValueError("checkpoint data is truncated")
        offset += nbytes
        params[name].data = arr.reshape(shape).astype(ag.default_dtype(), copy=True)
    return bundle


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- parameter drift reporting ------------------------------------------------


def _layer_key(name: str):
    area = {"lm.": 0, "tok.": 1, "detok.": 2}
    rank = next((r for p, r in area.items() if name.startswith(p)), 3)
    layer = -1
    rest = name.split(".", 1)[1] if "." in name else name
    if rest.startswith("layer"):
        layer = int(rest[5:].split(".", 1)[0])
    elif rest.startswith(("final_ln", "head")):
        layer = 10 ** 6
    return (rank, layer, name)


def param_diff(a: ModelBundle, b: ModelBundle) -> list:
    """Per-parameter euclidean distance, ordered embeddings -> layers -> head."""
    pa = dict(a.named_params())
    pb = dict(b.named_params())
    if set(pa) != set(pb):
        raise ValueError("parameter names differ between checkpoints")
    rows = []
    for name in sorted(pa, key=_layer_key):
        if pa[name].shape != pb[name].shape:
            raise ValueError(f"{name}: shapes differ")
        rows.append((name, float(np.linalg.norm(pa[name].data - pb[name].data))))
    return rows


def format_param_diff(rows) -> str:
    width = max(len(n) for n, _ in rows) if rows else 10
    lines = [f"{'parameter':<{width}}  distance"]
    for name, dist in rows:
        lines.append(f"{name:<{width}}  {dist:.6g}")
    return "\n".join(lines)
