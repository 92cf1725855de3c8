"""Text embeddings via interchangeable providers.

All vectors are L2-normalized at ingestion so downstream similarity is a
plain dot product. The offline provider is a seeded feature-hashing
embedder: deterministic across processes, cheap, and similar texts land
close in cosine, which is all the offline pipeline and tests need.
"""
from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyText,
    ProviderUnavailable,
    TransientProviderError,
    ZeroVector,
)
from .providers import call_with_retries

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingVector:
    """Unit-norm float32 vector plus the tag of the producing provider."""

    components: np.ndarray
    provider_tag: str = ""

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float32)
        if comp.ndim != 1:
            raise ValueError("embedding must be one-dimensional")
        if not np.isfinite(comp).all():
            raise ValueError("embedding has non-finite components")
        norm = float(np.linalg.norm(comp.astype(np.float64)))
        if abs(norm - 1.0) > _NORM_TOL:
            raise ValueError(f"embedding not unit-norm (|v| = {norm})")
        comp.setflags(write=False)
        object.__setattr__(self, "components", comp)

    @property
    def dimension(self) -> int:
        return int(self.components.shape[0])


def _normalized(raw: np.ndarray) -> np.ndarray:
    vec = np.asarray(raw, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ZeroVector("cannot normalize the all-zero vector")
    return (vec / norm).astype(np.float32)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """dot(a, b) / (|a||b|), clamped to [-1, 1]."""
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"{a.dimension} vs {b.dimension}")
    av = a.components.astype(np.float64)
    bv = b.components.astype(np.float64)
    denom = float(np.linalg.norm(av) * np.linalg.norm(bv))
    if denom == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    return max(-1.0, min(1.0, float(np.dot(av, bv) / denom)))


@runtime_checkable
class EmbeddingProvider(Protocol):
    tag: str
    dimension: int

    def embed_text(self, text: str) -> np.ndarray: ...


# --- offline feature hashing ---------------------------------------------


def _tokens(text: str) -> list[str]:
    out = []
    word = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


def _hash_token(token: str, key: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def _seed_key(seed: int) -> bytes:
    return (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")


def offline_embed(text: str, dim: int, seed: int) -> EmbeddingVector:
    """Deterministic hashed bag-of-tokens embedding.

    Tokens are lowercased alphanumeric runs; each hashes (keyed by the
    seed) to a bucket and a +/-1 sign; counts accumulate and the result is
    L2-normalized. A pure function of (text, dim, seed) with no dependence
    on process state.
    """
    if dim < 8:
        raise ValueError(f"dimension must be at least 8, got {dim}")
    toks = _tokens(text)
    if not toks:
        raise EmptyText("no tokens to embed")
    key = _seed_key(seed)
    acc = np.zeros(dim, dtype=np.float64)
    for tok in toks:
        h = _hash_token(tok, key)
        bucket = (h & 0xFFFFFFFF) % dim
        sign = 1.0 if (h >> 63) & 1 else -1.0
        acc[bucket] += sign
    return EmbeddingVector(
        components=_normalized(acc), provider_tag=f"offline-hash(d{dim},s{seed})"
    )


class OfflineHashingEmbedder:
    """Provider wrapper around offline_embed with a token-hash cache."""

    remote = False

    def __init__(self, dimension: int, seed: int = 0):
        if dimension < 8:
            raise ValueError(f"dimension must be at least 8, got {dimension}")
        self.dimension = dimension
        self.seed = seed
        self.tag = f"offline-hash(d{dimension},s{seed})"
        self._key = _seed_key(seed)
        self._cache: dict[str, tuple[int, float]] = {}

    def _bucket_sign(self, token: str) -> tuple[int, float]:
        hit = self._cache.get(token)
        if hit is None:
            h = _hash_token(token, self._key)
            hit = ((h & 0xFFFFFFFF) % self.dimension, 1.0 if (h >> 63) & 1 else -1.0)
            self._cache[token] = hit
        return hit

    def embed_text(self, text: str) -> np.ndarray:
        toks = _tokens(text)
        if not toks:
            raise EmptyText("no tokens to embed")
        acc = np.zeros(self.dimension, dtype=np.float64)
        for tok in toks:
            bucket, sign = self._bucket_sign(tok)
            acc[bucket] += sign
        return acc


# --- remote provider ------------------------------------------------------


def _default_post(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    try:
        response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransientProviderError(f"request to {url} failed: {exc}") from exc
    if response.status_code == 429 or response.status_code >= 500:
        raise TransientProviderError(f"{url} returned HTTP {response.status_code}")
    if response.status_code >= 400:
        raise ProviderUnavailable(
            f"{url} returned HTTP {response.status_code}: {response.text[:200]}"
        )
    return response.json()


class RemoteEmbedder:
    """Embeddings over HTTP JSON; the request/response schema stays here."""

    remote = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        dimension: int,
        api_key_env: str = "ARCA_API_KEY",
        timeout: float = 60.0,
        post_fn: Callable[..., dict] | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.post_fn = post_fn or _default_post
        self.tag = f"remote-embed({model},d{dimension})"

    def embed_text(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {"model": self.model, "input": text, "dimensions": self.dimension}
        body = self.post_fn(self.endpoint, payload, headers, self.timeout)
        try:
            return np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"malformed embedding response: {exc}") from exc


def embed(
    text: str,
    provider: EmbeddingProvider,
    max_attempts: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> EmbeddingVector:
    """Embed text via the provider with retry, check and normalization.

    Transient remote failures are retried with exponential backoff up to
    max_attempts; a wrong-length reply raises DimensionMismatch.
    """
    if not text:
        raise EmptyText("cannot embed empty text")
    raw = call_with_retries(
        lambda: provider.embed_text(text), max_attempts=max_attempts, sleep=sleep
    )
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (provider.dimension,):
        raise DimensionMismatch(
            f"provider returned shape {raw.shape}, expected ({provider.dimension},)"
        )
    if not np.isfinite(raw).all():
        raise ValueError("provider returned non-finite components")
    return EmbeddingVector(components=_normalized(raw), provider_tag=provider.tag)


def embed_many(
    texts: list[str], provider: EmbeddingProvider, max_attempts: int = 3
) -> list[EmbeddingVector]:
    """Embed a batch; output order matches input order."""
    return [embed(t, provider, max_attempts=max_attempts) for t in texts]
