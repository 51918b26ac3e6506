"""Text to vector encoders (feature hashing and remote service) and the embedding cache."""

from __future__ import annotations

import hashlib
import logging
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .ingest import ItemRecord
from .remote import RemoteConfigError, ServiceConfig, endpoint, post_json

logger = logging.getLogger(__name__)

DEFAULT_DIM = 384

STOP_WORDS = frozenset(
    """
    a about above after again against all also am an and any are as at be because been before being
    below between both but by can could did do does doing down during each few for from further had
    has have having he her here hers herself him himself his how i if in into is it its itself just
    me more most my myself no nor not now of off on once only or other our ours ourselves out over
    own same she should so some such than that the their theirs them themselves then there these they
    this those through to too under until up very was we were what when where which while who whom why
    will with would you your yours yourself yourselves
    """.split()
)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_SENTENCE_RE = re.compile(r"[.!?;\n]+")


def tokenize(text: str, drop_stop_words: bool = True) -> list[str]:
    tokens = _TOKEN_RE.findall(text.lower())
    if drop_stop_words:
        tokens = [t for t in tokens if t not in STOP_WORDS]
    return tokens


def hash_features(text: str) -> list[str]:
    """Unigrams plus within-sentence bigrams."""
    feats: list[str] = []
    bigrams: list[str] = []
    for sentence in _SENTENCE_RE.split(text):
        tokens = tokenize(sentence)
        feats.extend(tokens)
        bigrams.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
    return feats + bigrams


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source: str
    empty: bool = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class TextEncoder(Protocol):
    dim: int

    @property
    def fingerprint(self) -> str: ...

    def encode_many(self, texts: Sequence[str]) -> np.ndarray: ...


def _hash64(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


def encode_text_hash(text: str, d: int = DEFAULT_DIM, seed: int = 0, normalize: bool = True) -> EmbeddingVector:
    """Signed feature hashing of unigrams and bigrams.

    An empty token stream yields an un-normalised zero vector with ``empty`` set.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    vec = np.zeros(d, dtype=np.float64)
    feats = hash_features(text)
    for feat in feats:
        h = _hash64(feat, seed)
        vec[h % d] += 1.0 if (h >> 63) & 1 else -1.0
    if not feats:
        return EmbeddingVector(vec.astype(np.float32), "hash", empty=True)
    if normalize:
        norm = np.linalg.norm(vec)
        # all features may cancel through sign collisions
        if norm > 0:
            vec /= norm
    return EmbeddingVector(vec.astype(np.float32), "hash")


class HashEncoder:
    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0, normalize: bool = True) -> None:
        self.dim = dim
        self.seed = seed
        self.normalize = normalize

    @property
    def fingerprint(self) -> str:
        return f"hash-v1:d={self.dim}:seed={self.seed}:norm={int(self.normalize)}"

    def encode(self, text: str) -> EmbeddingVector:
        return encode_text_hash(text, self.dim, self.seed, self.normalize)

    def encode_many(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, t in enumerate(texts):
            out[i] = self.encode(t).values
        return out


class RemoteEncoder:
    """Client for an embeddings endpoint taking ``{"model", "input": [...]}``."""

    def __init__(
        self,
        config: ServiceConfig,
        dim: int = DEFAULT_DIM,
        normalize: bool = True,
        client: httpx.Client | None = None,
        batch_size: int = 64,
        sleep=None,
    ) -> None:
        self.config = config
        self.dim = dim
        self.normalize = normalize
        self.client = client or httpx.Client()
        self.batch_size = batch_size
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteEncoder":
        return cls(ServiceConfig.from_env("TEMPREC_EMBED"), **kwargs)

    @property
    def fingerprint(self) -> str:
        return f"remote:{self.config.model}:d={self.dim}:norm={int(self.normalize)}"

    def _post(self, texts: list[str]) -> dict:
        kwargs = {"sleep": self._sleep} if self._sleep else {}
        return post_json(
            self.client,
            endpoint(self.config.base_url, "/embeddings"),
            {"model": self.config.model, "input": texts},
            self.config,
            **kwargs,
        )

    def encode_many(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for start in range(0, len(texts), self.batch_size):
            chunk = list(texts[start : start + self.batch_size])
            data = self._post(chunk).get("data") or []
            if len(data) != len(chunk):
                raise RemoteConfigError(f"embedding service returned {len(data)} vectors for {len(chunk)} inputs")
            rows = sorted(data, key=lambda r: r.get("index", 0)) if all("index" in r for r in data) else data
            for j, row in enumerate(rows):
                out[start + j] = self._check(row["embedding"])
        return out

    def _check(self, values: Sequence[float]) -> np.ndarray:
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise RemoteConfigError(f"embedding dimension {vec.shape[0]} does not match configured d={self.dim}")
        if not np.all(np.isfinite(vec)):
            raise RemoteConfigError("embedding service returned non-finite values")
        if self.normalize:
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec = vec / norm
        return vec.astype(np.float32)

    def encode(self, text: str) -> EmbeddingVector:
        return EmbeddingVector(self.encode_many([text])[0], "remote")


def encode_text_remote(text: str, encoder: RemoteEncoder) -> EmbeddingVector:
    return encoder.encode(text)


_CACHE_MAGIC = b"TRECEMB\x00"
_CACHE_VERSION = 1


class EmbeddingCache:
    """Key to float32 vector store persisted in a small binary container.

    Layout: magic, u32 version, u32 d, u64 count, then per entry a u32 key
    length, the UTF-8 key bytes and d little-endian float32 values.
    """

    def __init__(self, dim: int, path: str | Path | None = None) -> None:
        self.dim = dim
        self.path = Path(path) if path else None
        self._store: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            self._store = self.read(self.path, dim)

    def __contains__(self, key: str) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key: str) -> np.ndarray | None:
        return self._store.get(key)

    def put(self, key: str, values: np.ndarray) -> None:
        arr = np.asarray(values, dtype="<f4")
        if arr.shape != (self.dim,):
            raise ValueError(f"expected shape ({self.dim},), got {arr.shape}")
        with self._lock:
            self._store[key] = arr.copy()

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._store.items()

    def save(self, path: str | Path | None = None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            raise ValueError("no cache path configured")
        with self._lock:
            chunks = [_CACHE_MAGIC, struct.pack("<IIQ", _CACHE_VERSION, self.dim, len(self._store))]
            for key in sorted(self._store):
                kb = key.encode("utf-8")
                chunks.append(struct.pack("<I", len(kb)))
                chunks.append(kb)
                chunks.append(self._store[key].astype("<f4").tobytes())
        tmp = target.with_suffix(target.suffix + ".tmp")
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(target)

    @staticmethod
    def read(path: str | Path, dim: int | None = None) -> dict[str, np.ndarray]:
        blob = Path(path).read_bytes()
        if blob[:8] != _CACHE_MAGIC:
            raise ValueError(f"{path} is not an embedding cache")
        version, d, count = struct.unpack_from("<IIQ", blob, 8)
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        if dim is not None and d != dim:
            raise ValueError(f"cache dimension {d} != expected {dim}")
        off = 8 + 16
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", blob, off)
            off += 4
            key = blob[off : off + klen].decode("utf-8")
            off += klen
            out[key] = np.frombuffer(blob, dtype="<f4", count=d, offset=off).copy()
            off += 4 * d
        return out

    def get_or_encode(self, keys: Sequence[str], texts: Sequence[str], encoder: TextEncoder) -> np.ndarray:
        """Look up ``keys`` (namespaced by the encoder fingerprint), encoding the misses in one batch."""
        full = [f"{encoder.fingerprint}|{k}" for k in keys]
        missing = [i for i, k in enumerate(full) if k not in self._store]
        self.hits += len(full) - len(missing)
        self.misses += len(missing)
        if missing:
            vecs = encoder.encode_many([texts[i] for i in missing])
            for i, v in zip(missing, vecs):
                self.put(full[i], v)
        return np.stack([self._store[k] for k in full]) if full else np.zeros((0, self.dim), np.float32)


def encode_item(item: ItemRecord, encoder: TextEncoder, cache: EmbeddingCache) -> np.ndarray:
    return cache.get_or_encode([f"item:{item.item_id}"], [item.text], encoder)[0]


def encode_catalog(
    catalog: Mapping[str, ItemRecord], encoder: TextEncoder, cache: EmbeddingCache | None = None
) -> tuple[list[str], np.ndarray]:
    """Embed every catalog item; returns sorted item ids and the row-aligned matrix."""
    ids = sorted(catalog)
    cache = cache or EmbeddingCache(encoder.dim)
    mat = cache.get_or_encode([f"item:{i}" for i in ids], [catalog[i].text for i in ids], encoder)
    return ids, mat.astype(np.float64)
