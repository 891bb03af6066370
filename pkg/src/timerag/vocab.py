"""Frozen vocabulary embedding table and the trainable prototype pool.

The table stands in for a language model's input/output embedding matrix and
is never updated by training. The prototype pool is a small trainable linear
map over the full table; its rows are the cross-attention source/value.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .abstraction import DEFAULT_LABEL_TOKENS
from .errors import ConflictError, FormatError


@dataclass
class EmbeddingTable:
    tokens: list[str]
    vectors: np.ndarray  # (V, d_llm), read-only

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens):
            raise FormatError("token list and vector rows disagree")
        if self.vectors.shape[0] < 2:
            raise FormatError("embedding table needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConflictError("duplicate token in embedding table")
        if not np.isfinite(self.vectors).all():
            raise FormatError("non-finite embedding vector")
        self.vectors.setflags(write=False)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_llm(self) -> int:
        return self.vectors.shape[1]

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise KeyError(f"token {token!r} not in embedding table")
        return self._ids[token]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\x00".join(self.tokens).encode("utf-8"))
        h.update(self.vectors.tobytes())
        return h.hexdigest()


def save_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    """Serialize: JSON header line, then one `token\\tfloats` line per token.

    Floats carry 9 significant digits, enough for a value-exact round-trip of
    the textual form used everywhere downstream.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"v": table.size, "d": table.d_llm}) + "\n")
        for token, row in zip(table.tokens, table.vectors):
            fh.write(token + "\t" + " ".join(f"{v:.17g}" for v in row) + "\n")


def load_embedding_table(path: str | Path) -> EmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
            v, d = int(header["v"]), int(header["d"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad embedding-table header: {exc}") from exc
        tokens, rows = [], []
        for i, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                token, payload = line.rstrip("\n").split("\t", 1)
                row = [float(x) for x in payload.split()]
            except ValueError as exc:
                raise FormatError(f"line {i}: malformed embedding row") from exc
            if len(row) != d:
                raise FormatError(f"line {i}: expected {d} values, got {len(row)}")
            tokens.append(token)
            rows.append(row)
    if len(tokens) != v:
        raise FormatError(f"header declared {v} tokens, file has {len(tokens)}")
    return EmbeddingTable(tokens, np.asarray(rows, dtype=np.float64))


def build_synthetic_table(
    v: int = 64, d_llm: int = 32, seed: int = 0, label_tokens: list[str] | None = None
) -> EmbeddingTable:
    """Desk-scale stand-in for an LLM vocabulary: the label tokens first,
    then filler tokens, all with seeded Gaussian vectors."""
    label_tokens = list(label_tokens) if label_tokens is not None else list(DEFAULT_LABEL_TOKENS)
    if v < len(label_tokens) + 1:
        raise ValueError(f"v must exceed the {len(label_tokens)} label tokens")
    tokens = label_tokens + [f"tok{i:04d}" for i in range(v - len(label_tokens))]
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((v, d_llm)) / np.sqrt(d_llm)
    return EmbeddingTable(tokens, vectors)


class PrototypePool:
    """Trainable S x V projection over the frozen table; rows of
    `prototypes` (S x d_llm) feed cross-attention as source and value."""

    def __init__(self, projection: np.ndarray, table: EmbeddingTable):
        projection = np.asarray(projection, dtype=np.float64)
        if projection.ndim != 2 or projection.shape[1] != table.size:
            raise ValueError("projection must be S x V")
        if projection.shape[0] >= table.size:
            raise ValueError("S must be smaller than the table vocabulary")
        self.projection = projection
        self.table = table
        self._cache: np.ndarray | None = None

    @property
    def S(self) -> int:
        return self.projection.shape[0]

    @property
    def prototypes(self) -> np.ndarray:
        if self._cache is None:
            self._cache = self.projection @ self.table.vectors
        return self._cache

    def set_projection(self, projection: np.ndarray) -> None:
        self.projection = np.asarray(projection, dtype=np.float64)
        self._cache = None


def build_prototypes(table: EmbeddingTable, S: int, init_seed: int = 0) -> PrototypePool:
    """Seeded uniform(-1/V, 1/V) init of the downsampling projection."""
    if S < 2 or S >= table.size:
        raise ValueError(f"need 2 <= S < V, got S={S}, V={table.size}")
    rng = np.random.default_rng(init_seed)
    bound = 1.0 / table.size
    projection = rng.uniform(-bound, bound, size=(S, table.size))
    return PrototypePool(projection, table)


def decode_greedy(h: np.ndarray, table: EmbeddingTable) -> tuple[str, int]:
    """Greedy token decode: argmax of E @ h, ties to the lowest index."""
    h = np.asarray(h, dtype=np.float64)
    if not np.isfinite(h).all():
        raise ValueError("non-finite aligned vector")
    token_id = int(np.argmax(table.vectors @ h))
    return table.tokens[token_id], token_id


def decode_greedy_batch(h: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Vectorized decode over the leading axes of h (..., d_llm) -> ids."""
    logits = np.asarray(h, dtype=np.float64) @ table.vectors.T
    return np.argmax(logits, axis=-1)
