"""Trainable desk-scale text encoders.

A hashed embedding-bag encoder produces mean-pooled vectors for queries and
documents alike; ranking uses plain L2 distance. The cross-encoder scores a
jointly encoded query-document pair with a linear head applied to the pooled
embedding: s = w . dropout(W^T h).

Tokens are hashed into a fixed number of buckets with a seeded, platform-stable
hash; bucket 0 is reserved for the query/document separator and is never
produced by tokenization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import sha256_bytes

log = logging.getLogger(__name__)

TokenId = int

SEP_BUCKET = 0
MAX_SIDE_TOKENS = 512  # per-side cap on cross-encoder inputs
DEFAULT_HASH_SEED = 706271

ENCODER_MAGIC = b"NDRENC01"
CROSS_MAGIC = b"NDRXEN01"
_HEADER = struct.Struct("<QQQqd")  # vocab_buckets, dim, hidden, hash_seed, dropout_rate

_TERM_RE = re.compile(r"[a-z0-9]+")


def split_terms(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; drops empty tokens."""
    return _TERM_RE.findall(text.lower())


def hash_term(term: str, vocab_buckets: int, hash_seed: int) -> TokenId:
    """Hash a normalized term into [1, vocab_buckets); bucket 0 stays reserved."""
    payload = f"{hash_seed}\x1f{term}".encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab_buckets - 1)


def tokenize(text: str, vocab_buckets: int, hash_seed: int = DEFAULT_HASH_SEED) -> list[TokenId]:
    return [hash_term(t, vocab_buckets, hash_seed) for t in split_terms(text)]


@dataclass
class EncoderModel:
    """Hashed embedding-bag encoder; the same model embeds queries and items."""

    embedding: np.ndarray  # (vocab_buckets, dim) float64
    hash_seed: int = DEFAULT_HASH_SEED
    version: str = "ndrenc-v1"

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        if self.vocab_buckets < 1024:
            raise ValueError(f"vocab_buckets must be >= 1024, got {self.vocab_buckets}")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if not np.isfinite(self.embedding).all():
            raise ValueError("embedding table contains non-finite entries")

    @property
    def vocab_buckets(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def tokenize(self, text: str) -> list[TokenId]:
        return tokenize(text, self.vocab_buckets, self.hash_seed)

    @classmethod
    def initialize(cls, vocab_buckets: int, dim: int, seed: int,
                   hash_seed: int = DEFAULT_HASH_SEED) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        table = rng.uniform(-0.05, 0.05, size=(vocab_buckets, dim))
        return cls(embedding=table, hash_seed=hash_seed)


@dataclass
class CrossEncoderModel:
    """Joint encoder plus linear scoring head s = w . dropout(W^T h)."""

    base: EncoderModel
    W: np.ndarray  # (dim, hidden)
    w: np.ndarray  # (hidden,)
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.W.shape != (self.base.dim, self.hidden):
            raise ValueError(f"W must be (dim, hidden), got {self.W.shape}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.w).all()):
            raise ValueError("head parameters contain non-finite entries")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def hidden(self) -> int:
        return self.w.shape[0]

    @classmethod
    def initialize(cls, vocab_buckets: int, dim: int, hidden: int, seed: int,
                   hash_seed: int = DEFAULT_HASH_SEED,
                   dropout_rate: float = 0.1) -> "CrossEncoderModel":
        rng = np.random.default_rng(seed)
        base = EncoderModel(
            embedding=rng.uniform(-0.05, 0.05, size=(vocab_buckets, dim)),
            hash_seed=hash_seed,
        )
        # head init scaled by 1/sqrt(fan-in)
        W = rng.uniform(-1.0, 1.0, size=(dim, hidden)) / np.sqrt(dim)
        w = rng.uniform(-1.0, 1.0, size=hidden) / np.sqrt(hidden)
        return cls(base=base, W=W, w=w, dropout_rate=dropout_rate)


def embed_tokens(model: EncoderModel, tokens: list[TokenId]) -> np.ndarray:
    if not tokens:
        return np.zeros(model.dim)
    return model.embedding[tokens].mean(axis=0)


def embed_text(model: EncoderModel, text: str) -> np.ndarray:
    """Mean of the embedding rows of the text's tokens; zero vector if empty."""
    tokens = model.tokenize(text)
    if not tokens:
        log.warning("embed_text: no tokens in %r, returning zero vector", text[:40])
    return embed_tokens(model, tokens)


def biencoder_distance(model: EncoderModel, query: str, doc: str) -> float:
    """Euclidean distance between the mean-pooled query and document vectors."""
    return float(np.linalg.norm(embed_text(model, query) - embed_text(model, doc)))


def joint_tokens(model: CrossEncoderModel, query: str, doc: str) -> list[TokenId]:
    """Token sequence for the joint encoding: query, separator, document."""
    q = model.base.tokenize(query)[:MAX_SIDE_TOKENS]
    d = model.base.tokenize(doc)[:MAX_SIDE_TOKENS]
    return q + [SEP_BUCKET] + d


def dropout_mask(hidden: int, rate: float, seed: int) -> np.ndarray:
    """Inverted-dropout mask: keeps with prob 1-rate, scales survivors by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(hidden)
    rng = np.random.default_rng(seed)
    keep = rng.random(hidden) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def crossencoder_score(model: CrossEncoderModel, query: str, doc: str,
                       training_mode: bool = False, seed: int = 0) -> float:
    """Score a query-document pair with the joint encoder and linear head."""
    h = embed_tokens(model.base, joint_tokens(model, query, doc))
    z = model.W.T @ h
    if training_mode:
        z = z * dropout_mask(model.hidden, model.dropout_rate, seed)
    return float(model.w @ z)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def encoder_bytes(model: EncoderModel) -> bytes:
    header = _HEADER.pack(model.vocab_buckets, model.dim, 0, model.hash_seed, 0.0)
    table = model.embedding.astype("<f4").tobytes(order="C")
    return ENCODER_MAGIC + header + table


def crossencoder_bytes(model: CrossEncoderModel) -> bytes:
    header = _HEADER.pack(model.base.vocab_buckets, model.base.dim, model.hidden,
                          model.base.hash_seed, model.dropout_rate)
    body = (model.base.embedding.astype("<f4").tobytes(order="C")
            + model.W.astype("<f4").tobytes(order="C")
            + model.w.astype("<f4").tobytes(order="C"))
    return CROSS_MAGIC + header + body


def model_fingerprint(model: EncoderModel | CrossEncoderModel) -> str:
    if isinstance(model, CrossEncoderModel):
        return sha256_bytes(crossencoder_bytes(model))
    return sha256_bytes(encoder_bytes(model))


def save_encoder(model: EncoderModel, path: str | Path, manifest: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encoder_bytes(model))
    _write_sidecar(path, "NDRENC01", model.vocab_buckets, model.dim, 0,
                   model.hash_seed, 0.0, manifest)


def save_crossencoder(model: CrossEncoderModel, path: str | Path,
                      manifest: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(crossencoder_bytes(model))
    _write_sidecar(path, "NDRXEN01", model.base.vocab_buckets, model.base.dim,
                   model.hidden, model.base.hash_seed, model.dropout_rate, manifest)


def _write_sidecar(path: Path, fmt: str, vocab: int, dim: int, hidden: int,
                   hash_seed: int, dropout_rate: float, manifest: dict | None) -> None:
    sidecar = {
        "format": fmt,
        "vocab_buckets": vocab,
        "dim": dim,
        "hidden": hidden,
        "hash_seed": hash_seed,
        "dropout_rate": dropout_rate,
    }
    if manifest:
        sidecar.update(manifest)
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_header(data: bytes, magic: bytes, path: Path):
    if data[:8] != magic:
        raise ValueError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    return _HEADER.unpack_from(data, 8)


def load_encoder(path: str | Path) -> EncoderModel:
    path = Path(path)
    data = path.read_bytes()
    vocab, dim, _hidden, hash_seed, _rate = _read_header(data, ENCODER_MAGIC, path)
    offset = 8 + _HEADER.size
    table = np.frombuffer(data, dtype="<f4", count=vocab * dim, offset=offset)
    return EncoderModel(embedding=table.reshape(vocab, dim).astype(np.float64),
                        hash_seed=hash_seed)


def load_crossencoder(path: str | Path) -> CrossEncoderModel:
    path = Path(path)
    data = path.read_bytes()
    vocab, dim, hidden, hash_seed, rate = _read_header(data, CROSS_MAGIC, path)
    offset = 8 + _HEADER.size
    n_emb, n_w = vocab * dim, dim * hidden
    flat = np.frombuffer(data, dtype="<f4", count=n_emb + n_w + hidden, offset=offset)
    base = EncoderModel(embedding=flat[:n_emb].reshape(vocab, dim).astype(np.float64),
                        hash_seed=hash_seed)
    W = flat[n_emb:n_emb + n_w].reshape(dim, hidden).astype(np.float64)
    w = flat[n_emb + n_w:].astype(np.float64)
    return CrossEncoderModel(base=base, W=W, w=w, dropout_rate=rate)
