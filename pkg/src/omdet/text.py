"""Word-embedding providers, the OMEV file format and set encoders.

Raw word vectors stand in for a frozen text encoder. Two providers exist:
a deterministic hash provider (vectors seeded from the FNV-1a hash of the
word) and a file-backed provider reading exported vectors.

OMEV layout (little-endian)::

    b"OMEV" | u32 version=1 | u32 count | u32 dim
    count x ( u16 name_len | name_len bytes UTF-8 | dim x f32 )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from omdet.autodiff import FeedForward, Linear, Module, MultiHeadSelfAttention, Tensor
from omdet.autodiff import functional as F
from omdet.errors import ConfigError, EmbeddingLookupError, FormatError, UsageError

PAD = None
OMEV_MAGIC = b"OMEV"
OMEV_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise FormatError("embedding vector has zero norm")
    return vec / norm


class EmbeddingProvider:
    dim: int

    def vector(self, word: str) -> np.ndarray:
        raise NotImplementedError

    def __contains__(self, word: str) -> bool:
        try:
            self.vector(word)
        except EmbeddingLookupError:
            return False
        return True


class HashEmbeddingProvider(EmbeddingProvider):
    """Unit gaussian vectors from a Philox stream keyed by FNV-1a(word)."""

    variant = "deterministic-hash"

    def __init__(self, dim: int = 32):
        if dim < 1:
            raise ConfigError("embedding dim must be positive")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            gen = np.random.Generator(np.random.Philox(key=fnv1a_64(word)))
            vec = _unit(gen.standard_normal(self.dim))
            vec.setflags(write=False)
            self._cache[word] = vec
        return vec


class FileEmbeddingProvider(EmbeddingProvider):
    variant = "file-backed"

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: int):
        self.dim = dim
        self._vectors = {}
        for word, vec in vectors.items():
            v = _unit(np.asarray(vec, dtype=np.float64))
            v.setflags(write=False)
            self._vectors[word] = v

    def vector(self, word: str) -> np.ndarray:
        try:
            return self._vectors[word]
        except KeyError:
            raise EmbeddingLookupError(word) from None

    def words(self) -> list[str]:
        return list(self._vectors)

    def __len__(self) -> int:
        return len(self._vectors)


def write_embedding_file(path, vectors: Mapping[str, Sequence[float]], dim: int | None = None) -> None:
    items = list(vectors.items())
    if dim is None:
        if not items:
            raise UsageError("dim is required when writing an empty embedding file")
        dim = len(items[0][1])
    buf = bytearray(OMEV_MAGIC)
    buf += struct.pack("<III", OMEV_VERSION, len(items), dim)
    for name, vec in items:
        arr = np.asarray(vec, dtype="<f4")
        if arr.shape != (dim,):
            raise UsageError(f"vector for {name!r} has shape {arr.shape}, expected ({dim},)")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw + arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_embedding_file(path) -> FileEmbeddingProvider:
    """Parse an OMEV file; every entry is re-normalised to unit length."""
    data = Path(path).read_bytes()

    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(data):
            raise FormatError(f"truncated OMEV file while reading {what}", offset)

    need(0, 4, "magic")
    if data[:4] != OMEV_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {OMEV_MAGIC!r}", 0)
    need(4, 12, "header")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != OMEV_VERSION:
        raise FormatError(f"unsupported OMEV version {version}", 4)
    if dim < 1:
        raise FormatError(f"invalid embedding dim {dim}", 12)
    off = 16
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (n,) = struct.unpack_from("<H", data, off)
        need(off + 2, n, "name")
        try:
            name = data[off + 2 : off + 2 + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", off + 2) from None
        if name in vectors:
            raise FormatError(f"duplicate entry {name!r}", off)
        off += 2 + n
        need(off, 4 * dim, f"vector of {name!r}")
        vectors[name] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after {count} entries", off)
    return FileEmbeddingProvider(vectors, dim)


def embed_labels(provider: EmbeddingProvider, words: Sequence[str | None], max_k: int | None = None) -> np.ndarray:
    """Stack unit vectors for ``words``; ``PAD`` (None) slots become zero rows."""
    if not words or all(w is PAD for w in words):
        raise UsageError("a task needs at least one real word")
    if max_k is not None and len(words) > max_k:
        raise UsageError(f"task has {len(words)} slots but K={max_k}")
    out = np.zeros((len(words), provider.dim))
    for i, word in enumerate(words):
        if word is not PAD:
            out[i] = provider.vector(word)
    return out


@dataclass
class TaskContext:
    """Per-image task words padded to a common width, with their raw vectors."""

    words: list[list[str | None]]
    raw: Tensor  # (B, K, d_text)
    valid: np.ndarray  # (B, K) True for real words
    task_tokens: Tensor | None = None
    label_tokens: Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def pad_mask(self) -> np.ndarray:
        return ~self.valid

    @property
    def width(self) -> int:
        return self.valid.shape[1]


class SetEncoder(Module):
    """Projection followed by position-free transformer layers over a word set."""

    def __init__(self, d_text: int, d: int, rng: np.random.Generator, layers: int = 2, heads: int = 4):
        self.proj = Linear(d_text, d, rng)
        self.attn = [MultiHeadSelfAttention(d, heads, rng) for _ in range(layers)]
        self.ffn = [FeedForward(d, 2 * d, rng) for _ in range(layers)]

    def forward(self, raw: Tensor, valid: np.ndarray) -> Tensor:
        x = self.proj(raw)
        for attn, ffn in zip(self.attn, self.ffn):
            x = ffn(attn(x, key_mask=valid))
        return x


def pad_tasks(tasks: Iterable[Sequence[str | None]]) -> list[list[str | None]]:
    tasks = [list(t) for t in tasks]
    width = max(len(t) for t in tasks)
    return [t + [PAD] * (width - len(t)) for t in tasks]
