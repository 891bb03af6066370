"""Flat cosine vector store for incident knowledge.

Documents are packed into chunks of at most 512 tokens (paragraphs first,
then sentences, then hard token splits), optionally filtered by a binary
classifier, embedded, and searched exhaustively by cosine similarity.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConflictError, FormatError

log = logging.getLogger(__name__)

DEFAULT_CHUNK_TOKENS = 512
DEFAULT_TOP_K = 5

Tokenizer = Callable[[str], int]
BinaryClassifier = Callable[[str], bool]
Embedder = Callable[[str], np.ndarray]


def whitespace_token_count(text: str) -> int:
    return len(text.split())


@dataclass
class IncidentDocument:
    id: str
    title: str
    body: str
    source: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.body:
            raise ValueError(f"document {self.id!r} has an empty body")


@dataclass
class Chunk:
    id: str
    doc_id: str
    seq: int
    text: str
    token_count: int
    embedding: np.ndarray | None = None
    metadata: dict[str, str] = field(default_factory=dict)


_PARA_BOUNDARY = re.compile(r"\n[ \t]*\n")
_SENT_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


def _split_keep(text: str, boundary: re.Pattern) -> list[str]:
    """Split at boundary matches, keeping each boundary attached to the
    preceding piece so concatenation reproduces the input exactly."""
    pieces, prev = [], 0
    for m in boundary.finditer(text):
        pieces.append(text[prev : m.end()])
        prev = m.end()
    if prev < len(text):
        pieces.append(text[prev:])
    return pieces


def _hard_split(text: str, max_tokens: int, tokenizer: Tokenizer) -> list[str]:
    """Last resort: cut at whitespace-token boundaries every max_tokens."""
    spans = [m.span() for m in re.finditer(r"\S+", text)]
    if len(spans) <= max_tokens:
        return [text]
    pieces, prev = [], 0
    for cut in range(max_tokens, len(spans), max_tokens):
        pieces.append(text[prev : spans[cut][0]])
        prev = spans[cut][0]
    pieces.append(text[prev:])
    return pieces


def chunk_document(
    doc: IncidentDocument,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
    tokenizer: Tokenizer = whitespace_token_count,
) -> list[Chunk]:
    """Greedy paragraph packing into chunks of at most max_tokens tokens.

    Oversized paragraphs fall back to sentence packing, then to hard token
    splits. The concatenated chunk texts equal the document body exactly.
    """
    if not doc.body.strip():
        return []
    pieces: list[str] = []
    for para in _split_keep(doc.body, _PARA_BOUNDARY):
        if tokenizer(para) <= max_tokens:
            pieces.append(para)
            continue
        for sent in _split_keep(para, _SENT_BOUNDARY):
            if tokenizer(sent) <= max_tokens:
                pieces.append(sent)
            else:
                pieces.extend(_hard_split(sent, max_tokens, tokenizer))

    chunks: list[Chunk] = []
    current = ""
    for piece in pieces:
        if current and tokenizer(current) + tokenizer(piece) > max_tokens:
            chunks.append(_make_chunk(doc, len(chunks), current, tokenizer))
            current = piece
        else:
            current += piece
    if current:
        chunks.append(_make_chunk(doc, len(chunks), current, tokenizer))
    return chunks


def _make_chunk(doc: IncidentDocument, seq: int, text: str, tokenizer: Tokenizer) -> Chunk:
    return Chunk(
        id=f"{doc.id}:{seq}",
        doc_id=doc.id,
        seq=seq,
        text=text,
        token_count=tokenizer(text),
        metadata=dict(doc.metadata),
    )


def filter_chunks(chunks: Sequence[Chunk], classifier: BinaryClassifier) -> list[Chunk]:
    """Keep chunks the classifier accepts; blank chunks are always dropped."""
    kept = []
    for chunk in chunks:
        if not chunk.text.strip():
            continue
        if classifier(chunk.text):
            kept.append(chunk)
    if chunks and not kept:
        log.warning("classifier rejected every chunk")
    return kept


class VectorStore:
    """Exhaustive cosine-similarity index over embedded chunks."""

    def __init__(self, d_e: int):
        if d_e < 1:
            raise ValueError("d_e must be positive")
        self.d_e = d_e
        self.chunks: dict[str, Chunk] = {}

    def __len__(self) -> int:
        return len(self.chunks)

    def add(self, chunk: Chunk) -> None:
        if chunk.embedding is None:
            raise ValueError(f"chunk {chunk.id!r} has no embedding")
        emb = np.asarray(chunk.embedding, dtype=np.float64)
        if emb.shape != (self.d_e,):
            raise ValueError(f"chunk {chunk.id!r}: embedding dim {emb.shape} != ({self.d_e},)")
        if np.linalg.norm(emb) == 0:
            raise ValueError(f"chunk {chunk.id!r}: zero-norm embedding")
        if chunk.id in self.chunks:
            raise ConflictError(f"duplicate chunk id {chunk.id!r}")
        chunk.embedding = emb
        self.chunks[chunk.id] = chunk

    def remove_document(self, doc_id: str) -> None:
        for cid in [c for c, ch in self.chunks.items() if ch.doc_id == doc_id]:
            del self.chunks[cid]


@dataclass
class IngestReport:
    documents: int = 0
    chunks: int = 0
    kept: int = 0
    embedded: int = 0


def ingest(
    docs: Iterable[IncidentDocument],
    embedder: Embedder,
    classifier: BinaryClassifier,
    store: VectorStore,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
    tokenizer: Tokenizer = whitespace_token_count,
) -> IngestReport:
    """chunk -> filter -> embed -> index; re-ingesting a doc id replaces it."""
    report = IngestReport()
    for doc in docs:
        report.documents += 1
        chunks = chunk_document(doc, max_tokens, tokenizer)
        report.chunks += len(chunks)
        kept = filter_chunks(chunks, classifier)
        report.kept += len(kept)
        store.remove_document(doc.id)
        for chunk in kept:
            emb = np.asarray(embedder(chunk.text), dtype=np.float64)
            if emb.shape != (store.d_e,):
                raise FormatError(
                    f"embedder produced dim {emb.shape[-1]}, store expects {store.d_e}"
                )
            chunk.embedding = emb
            report.embedded += 1
            store.add(chunk)
    return report


def retrieve_topk(
    query_embedding: np.ndarray,
    store: VectorStore,
    k: int = DEFAULT_TOP_K,
) -> list[tuple[Chunk, float]]:
    """Top-k chunks by cosine similarity, descending; ties by id ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query_embedding, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("zero-norm query embedding")
    scored = []
    for chunk in store.chunks.values():
        sim = float(np.dot(q, chunk.embedding) / (qn * np.linalg.norm(chunk.embedding)))
        scored.append((chunk, sim))
    scored.sort(key=lambda cs: (-cs[1], cs[0].id))
    return scored[:k]


STORE_FORMAT = "timerag-store"
STORE_VERSION = 1


def save_store(store: VectorStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": STORE_FORMAT, "version": STORE_VERSION, "d_e": store.d_e}) + "\n")
        for chunk in sorted(store.chunks.values(), key=lambda c: c.id):
            fh.write(
                json.dumps(
                    {
                        "id": chunk.id,
                        "doc_id": chunk.doc_id,
                        "seq": chunk.seq,
                        "text": chunk.text,
                        "token_count": chunk.token_count,
                        "embedding": chunk.embedding.tolist(),
                        "metadata": chunk.metadata,
                    }
                )
                + "\n"
            )


def load_store(path: str | Path) -> VectorStore:
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad store header: {exc}") from exc
        if header.get("format") != STORE_FORMAT or header.get("version") != STORE_VERSION:
            raise FormatError("unrecognized store format/version")
        store = VectorStore(int(header["d_e"]))
        chunks = []
        for i, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                chunks.append(
                    Chunk(
                        id=rec["id"],
                        doc_id=rec["doc_id"],
                        seq=rec["seq"],
                        text=rec["text"],
                        token_count=rec["token_count"],
                        embedding=np.asarray(rec["embedding"], dtype=np.float64),
                        metadata=rec.get("metadata", {}),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"line {i}: malformed chunk record: {exc}") from exc
    for chunk in chunks:
        store.add(chunk)
    return store


def load_documents(path: str | Path) -> list[IncidentDocument]:
    """Document input JSONL: {"id","title","body","source","metadata"}."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(
                    IncidentDocument(
                        id=rec["id"],
                        title=rec.get("title", ""),
                        body=rec["body"],
                        source=rec.get("source", ""),
                        metadata=rec.get("metadata", {}),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"line {i}: malformed document record: {exc}") from exc
    return docs
