"""Vocabulary, TF-IDF vectors (forest input) and padded id sequences (LSTM input)."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from besent.errors import DataError, FormatError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
DEFAULT_SEQ_LEN = 50
DEFAULT_EMBED_DIM = 32


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    doc_freq: tuple[int, ...]
    n_docs: int

    def __post_init__(self):
        if self.terms[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise DataError("vocabulary must start with the PAD and UNK entries")
        if len(self.doc_freq) != len(self.terms):
            raise DataError("doc_freq must align with terms")
        if any(df > self.n_docs for df in self.doc_freq):
            raise DataError("document frequency exceeds corpus size")

    def __len__(self):
        return len(self.terms)

    @cached_property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.terms)}

    @cached_property
    def idf(self) -> np.ndarray:
        df = np.asarray(self.doc_freq, dtype=np.float64)
        out = np.log((1.0 + self.n_docs) / (1.0 + df)) + 1.0
        out[:2] = 0.0
        return out

    @cached_property
    def fingerprint(self) -> str:
        payload = json.dumps([list(self.terms), list(self.doc_freq), self.n_docs],
                             ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"terms": list(self.terms), "doc_freq": list(self.doc_freq), "n_docs": self.n_docs}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["terms"]), tuple(d["doc_freq"]), d["n_docs"])


def build_vocabulary(docs: Sequence, min_df: int = 1, max_size: int = 20000) -> Vocabulary:
    """Terms with document frequency >= ``min_df``, most frequent first.

    Ties in frequency are broken lexicographically so ids are stable.
    """
    if min_df < 1 or max_size < 1:
        raise ValueError("min_df and max_size must be >= 1")
    if not docs:
        raise DataError("cannot build a vocabulary from an empty corpus")
    df: Counter = Counter()
    for doc in docs:
        df.update(set(doc.tokens))
    kept = sorted((t for t, c in df.items() if c >= min_df), key=lambda t: (-df[t], t))
    kept = kept[:max_size]
    return Vocabulary(
        terms=(PAD_TOKEN, UNK_TOKEN, *kept),
        doc_freq=(0, 0, *(df[t] for t in kept)),
        n_docs=len(docs),
    )


@dataclass(frozen=True)
class FeatureVector:
    entries: dict
    dim: int

    def __post_init__(self):
        for k, v in self.entries.items():
            if not 0 <= k < self.dim:
                raise DataError(f"feature id {k} outside dimension {self.dim}")
            if not math.isfinite(v):
                raise DataError(f"non-finite weight for feature {k}")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        for k, v in self.entries.items():
            out[k] = v
        return out


def vectorize_tfidf(doc, vocab: Vocabulary) -> FeatureVector:
    """L2-normalized tf * smoothed-idf weights; unknown tokens are ignored."""
    counts = Counter(vocab.index[t] for t in doc.tokens if t in vocab.index and vocab.index[t] >= 2)
    idf = vocab.idf
    raw = {i: tf * float(idf[i]) for i, tf in sorted(counts.items())}
    norm = math.sqrt(sum(w * w for w in raw.values()))
    if norm > 0:
        raw = {i: w / norm for i, w in raw.items()}
    return FeatureVector(raw, len(vocab))


def tfidf_matrix(docs: Sequence, vocab: Vocabulary) -> np.ndarray:
    """Dense ``(n_docs, len(vocab))`` stack of :func:`vectorize_tfidf` rows."""
    X = np.zeros((len(docs), len(vocab)))
    for r, doc in enumerate(docs):
        for k, v in vectorize_tfidf(doc, vocab).entries.items():
            X[r, k] = v
    return X


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    true_len: int

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 <= self.true_len <= len(self.ids):
            raise DataError("true_len outside sequence length")
        if any(i == PAD for i in self.ids[:self.true_len]):
            raise DataError("PAD id inside the true length")
        if any(i != PAD for i in self.ids[self.true_len:]):
            raise DataError("non-PAD id after the true length")


def encode_sequence(doc, vocab: Vocabulary, L: int = DEFAULT_SEQ_LEN) -> TokenSequence:
    if L < 1:
        raise ValueError("sequence length must be >= 1")
    toks = doc.tokens[:L]
    ids = [vocab.index.get(t, UNK) for t in toks]
    # PAD_TOKEN appearing as literal text must not become PAD
    ids = [UNK if i == PAD else i for i in ids]
    return TokenSequence(tuple(ids) + (PAD,) * (L - len(ids)), len(ids))


def sequences_to_arrays(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([s.ids for s in seqs], dtype=np.int64).reshape(len(seqs), -1)
    lengths = np.array([s.true_len for s in seqs], dtype=np.int64)
    return ids, lengths


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    d: int = field(default=DEFAULT_EMBED_DIM)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.d:
            raise DataError("embedding matrix must have shape (vocab, d)")
        if np.any(self.vectors[PAD] != 0):
            raise DataError("PAD embedding row must be zero")


def random_embeddings(vocab: Vocabulary, d: int, rng: np.random.Generator) -> EmbeddingMatrix:
    vecs = rng.uniform(-0.05, 0.05, size=(len(vocab), d))
    vecs[PAD] = 0.0
    return EmbeddingMatrix(vecs, d)


def load_embeddings(path, vocab: Vocabulary, d: int = DEFAULT_EMBED_DIM,
                    rng: np.random.Generator | None = None) -> EmbeddingMatrix:
    """Warm-start embeddings from a word-vector text file.

    Terms missing from the file get U(-0.05, 0.05) rows drawn from ``rng``.
    A leading ``<count> <dim>`` header line, as written by word2vec tools,
    is skipped.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    emb = random_embeddings(vocab, d, rng)
    vecs = emb.vectors
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p != ""]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and d != 1 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != d + 1:
                raise FormatError(f"expected a token and {d} values, got {len(parts) - 1} values",
                                  line=lineno)
            try:
                values = [float(p) for p in parts[1:]]
            except ValueError:
                raise FormatError("non-numeric vector component", line=lineno) from None
            idx = vocab.index.get(parts[0])
            if idx is not None and idx >= 2:
                vecs[idx] = values
    vecs[PAD] = 0.0
    return EmbeddingMatrix(vecs, d)
