"""Embedding provider interface with a deterministic hashing default.

Real deployments plug in an external sentence encoder; tests and the mock
pipeline use :class:`HashingEmbedder`, which maps word unigrams and
character trigrams into a fixed-width vector via the hashing trick. Texts
sharing vocabulary land near each other in cosine space, which is enough
structure for neighbor-based scoring at desk scale.
"""

from __future__ import annotations

import hashlib
import re
from typing import Iterable, Protocol

import numpy as np

_WORD_RE = re.compile(r"\w+")


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.dim = dim
        self._seed = seed.to_bytes(8, "little", signed=True)

    def _bucket(self, feature: str) -> tuple[int, float]:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=self._seed).digest()
        value = int.from_bytes(digest, "little")
        return (value >> 1) % self.dim, 1.0 if value & 1 else -1.0

    def _features(self, text: str) -> Iterable[str]:
        words = [w.lower() for w in _WORD_RE.findall(text)]
        for word in words:
            yield "w:" + word
            padded = f"^{word}$"
            for i in range(len(padded) - 2):
                yield "c:" + padded[i : i + 3]

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for feature in self._features(text):
            bucket, sign = self._bucket(feature)
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            bucket, _ = self._bucket("empty:" + text)
            vec[bucket] = 1.0
            return vec
        return vec / norm

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self.embed(t) for t in texts])
