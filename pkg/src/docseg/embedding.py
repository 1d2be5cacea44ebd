"""Skip-gram word embeddings and per-pixel text embedding maps.

Embeddings train by stochastic gradient ascent on the average log
probability of context words given their center word, with the full
softmax over the vocabulary (desk-scale vocabularies keep this exact and
cheap). A trained table then turns sentence records (token sequence plus
page box) into an N x H x W map: every pixel inside a sentence's box
carries the mean input vector of the sentence's tokens, all other pixels
stay zero.

Out-of-vocabulary tokens fall back to the mean of hashed character
3-gram bucket vectors. The 4096-bucket table is derived from a fixed seed
and the embedding width alone, so it is identical at train time and after
loading a saved table, without being serialized.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InputError, OOVError
from .geometry import Box

OOV_BUCKETS = 4096
_BUCKET_SEED = 1001001001  # fixed; bucket vectors must be reproducible at load

MAGIC = b"DSKE"
VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on everything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SkipGramConfig:
    embedding_dim: int = 128
    window: int = 5
    epochs: int = 5
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise InputError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.window < 1:
            raise InputError(f"window must be >= 1, got {self.window}")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise InputError("epochs must be >= 0 and learning_rate positive")


def _bucket_vectors(dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([_BUCKET_SEED, OOV_BUCKETS, dim]))
    span = 0.5 / dim
    return rng.uniform(-span, span, size=(OOV_BUCKETS, dim)).astype(np.float32)


def _char_trigrams(token: str) -> list[str]:
    padded = f"<{token}>"
    return [padded[i:i + 3] for i in range(len(padded) - 2)]


class EmbeddingTable:
    """Vocabulary plus the input and output vector matrices."""

    def __init__(self, tokens: list[str], vec_in: np.ndarray, vec_out: np.ndarray):
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        if vec_in.shape != vec_out.shape or vec_in.ndim != 2:
            raise InputError(
                f"vector matrices must share a VxN shape: {vec_in.shape} vs {vec_out.shape}"
            )
        if vec_in.shape[0] != len(tokens):
            raise InputError(f"{len(tokens)} tokens but {vec_in.shape[0]} vector rows")
        self.tokens = list(tokens)
        self.vec_in = np.ascontiguousarray(vec_in, dtype=np.float32)
        self.vec_out = np.ascontiguousarray(vec_out, dtype=np.float32)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self._buckets = _bucket_vectors(self.dim)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.vec_in.shape[1]

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def row(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise OOVError(f"token {token!r} is not in the vocabulary") from None

    def vector(self, token: str) -> np.ndarray:
        """Input vector for a token, with 3-gram fallback for unknown ones."""
        idx = self.index.get(token)
        if idx is not None:
            return self.vec_in[idx]
        return self.oov_vector(token)

    def oov_vector(self, token: str) -> np.ndarray:
        grams = _char_trigrams(token)
        if not grams:
            return np.zeros(self.dim, dtype=np.float32)
        rows = [zlib.crc32(g.encode("utf-8")) % OOV_BUCKETS for g in grams]
        return self._buckets[rows].mean(axis=0)


def build_vocabulary(corpus: list[list[str]]) -> list[str]:
    """Tokens ordered by descending count, ties alphabetical."""
    counts: dict[str, int] = {}
    for sentence in corpus:
        for token in sentence:
            counts[token] = counts.get(token, 0) + 1
    return sorted(counts, key=lambda t: (-counts[t], t))


def train_skipgram(corpus: list[list[str]], config: SkipGramConfig,
                   seed: int = 0) -> EmbeddingTable:
    """Full-softmax skip-gram training; bitwise reproducible for a seed."""
    sentences = [list(s) for s in corpus if s]
    if not sentences:
        raise InputError("cannot train embeddings on an empty corpus")
    tokens = build_vocabulary(sentences)
    vocab = {t: i for i, t in enumerate(tokens)}
    v, n = len(tokens), config.embedding_dim

    rng = np.random.default_rng(seed)
    span = 0.5 / n
    vec_in = rng.uniform(-span, span, size=(v, n)).astype(np.float32)
    vec_out = np.zeros((v, n), dtype=np.float32)

    encoded = [np.array([vocab[t] for t in s], dtype=np.int64) for s in sentences]
    window = config.window
    lr = np.float32(config.learning_rate)

    for _ in range(config.epochs):
        order = rng.permutation(len(encoded))
        for si in order:
            ids = encoded[si]
            length = len(ids)
            for t in range(length):
                lo = max(0, t - window)
                hi = min(length, t + window + 1)
                k = hi - lo - 1
                if k == 0:
                    continue
                center = ids[t]
                h = vec_in[center].copy()
                logits = vec_out @ h
                logits -= logits.max()
                p = np.exp(logits)
                p /= p.sum()
                counts = np.bincount(ids[lo:hi], minlength=v).astype(np.float32)
                counts[center] -= 1  # exclude j = 0
                g_logits = counts - k * p
                g_h = vec_out.T @ g_logits
                vec_out += lr * np.outer(g_logits, h)
                vec_in[center] += lr * g_h

    return EmbeddingTable(tokens, vec_in, vec_out)


def softmax_probability(center: str, context: str, table: EmbeddingTable) -> float:
    """P(context | center) under the full softmax, computed in float64."""
    ci = table.row(center)
    oi = table.row(context)
    logits = (table.vec_out.astype(np.float64) @ table.vec_in[ci].astype(np.float64))
    logits -= logits.max()
    e = np.exp(logits)
    return float(e[oi] / e.sum())


def corpus_log_likelihood(corpus: list[list[str]], table: EmbeddingTable,
                          window: int) -> float:
    """Average over centers of summed context log probabilities."""
    total = 0.0
    centers = 0
    vec_out = table.vec_out.astype(np.float64)
    for sentence in corpus:
        ids = np.array([table.row(t) for t in sentence], dtype=np.int64)
        length = len(ids)
        for t in range(length):
            lo = max(0, t - window)
            hi = min(length, t + window + 1)
            if hi - lo - 1 == 0:
                continue
            logits = vec_out @ table.vec_in[ids[t]].astype(np.float64)
            logits -= logits.max()
            logp = logits - np.log(np.exp(logits).sum())
            ctx = np.concatenate([ids[lo:t], ids[t + 1:hi]])
            total += logp[ctx].sum()
            centers += 1
    if centers == 0:
        return 0.0
    return total / centers


def sentence_embedding(tokens: list[str], table: EmbeddingTable) -> np.ndarray:
    """Mean input vector over tokens (OOV tokens via the 3-gram fallback)."""
    if not tokens:
        return np.zeros(table.dim, dtype=np.float32)
    acc = np.zeros(table.dim, dtype=np.float64)
    for token in tokens:
        acc += table.vector(token)
    return (acc / len(tokens)).astype(np.float32)


# ---------------------------------------------------------------------------
# embedding maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SentenceRecord:
    tokens: tuple
    box: Box

    @staticmethod
    def from_text(text: str, box: Box) -> "SentenceRecord":
        return SentenceRecord(tuple(tokenize(text)), box)


@dataclass
class EmbeddingMap:
    data: np.ndarray  # N x H x W float32

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def build_embedding_map(sentences: list[SentenceRecord], table: EmbeddingTable,
                        height: int, width: int) -> EmbeddingMap:
    """Fill each sentence box with its embedding; zero elsewhere.

    Boxes must lie inside the page and must not overlap each other.
    """
    data = np.zeros((table.dim, height, width), dtype=np.float32)
    occupied = np.zeros((height, width), dtype=bool)
    for record in sentences:
        box = record.box
        if not box.within(width, height):
            raise InputError(f"sentence box {box.as_tuple()} outside {height}x{width} page")
        patch = occupied[box.y0:box.y1, box.x0:box.x1]
        if patch.any():
            raise InputError(f"sentence box {box.as_tuple()} overlaps another sentence")
        patch[:] = True
        vec = sentence_embedding(list(record.tokens), table)
        data[:, box.y0:box.y1, box.x0:box.x1] = vec[:, None, None]
    return EmbeddingMap(data)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_table(path, table: EmbeddingTable) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<III", VERSION, table.size, table.dim)
    for token in table.tokens:
        encoded = token.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
    blob += np.ascontiguousarray(table.vec_in, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(table.vec_out, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_table(path) -> EmbeddingTable:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read embedding table {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise InputError(f"{path} is not an embedding table (bad magic)")
    version, v, n = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise InputError(f"unsupported embedding table version {version}")
    pos = 16
    tokens = []
    for _ in range(v):
        (length,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        tokens.append(raw[pos:pos + length].decode("utf-8"))
        pos += length
    matrix_bytes = 4 * v * n
    if len(raw) != pos + 2 * matrix_bytes:
        raise InputError(f"embedding table {path} is truncated or padded")
    vec_in = np.frombuffer(raw, dtype="<f4", count=v * n, offset=pos).reshape(v, n)
    vec_out = np.frombuffer(raw, dtype="<f4", count=v * n,
                            offset=pos + matrix_bytes).reshape(v, n)
    return EmbeddingTable(tokens, vec_in.copy(), vec_out.copy())


def read_corpus(path) -> list[list[str]]:
    """One sentence per line, tokenized; blank or token-free lines dropped."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise InputError(f"cannot read corpus {path}: {exc}") from exc
    corpus = [tokenize(line) for line in lines]
    return [s for s in corpus if s]
