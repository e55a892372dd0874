"""Query and role embedding providers.

Models never call an encoder directly; they consume fixed-dimension float64
vectors from an :class:`EmbeddingProvider`.  The synthetic provider is fully
deterministic per seed, which is what makes training runs reproducible.
"""

from __future__ import annotations

import hashlib
import os
from abc import ABC, abstractmethod

import numpy as np

from .errors import EmbeddingServiceError, ValidationError
from .graphs import RoleDescriptor, RolePool


class EmbeddingProvider(ABC):
    """Maps query text and role descriptors to fixed-size vectors."""

    name: str = "abstract"

    @property
    @abstractmethod
    def dimension(self) -> int: ...

    @abstractmethod
    def embed_query(self, text: str) -> np.ndarray:
        """Return a float64 vector of length ``dimension``."""

    @abstractmethod
    def embed_role(self, role: RoleDescriptor) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v if norm == 0.0 else v / norm


class SyntheticEmbedder(EmbeddingProvider):
    """Deterministic random-projection embedder for synthetic corpora.

    Each whitespace token maps to a fixed unit direction drawn from a seeded
    generator; a query embeds as the normalized sum of its token directions.
    Tokens of the form ``dom:<k>`` are up-weighted by ``domain_scale`` so
    that queries from one domain share a strong common component while
    queries from different domains stay nearly orthogonal.
    """

    name = "synthetic"

    def __init__(self, dimension: int = 64, seed: int = 0, domain_scale: float = 3.0):
        if dimension < 1:
            raise ValidationError(f"dimension must be positive, got {dimension}")
        self._dimension = int(dimension)
        self.seed = int(seed)
        self.domain_scale = float(domain_scale)
        self._token_cache: dict[str, np.ndarray] = {}

    @property
    def dimension(self) -> int:
        return self._dimension

    def _direction(self, key: str) -> np.ndarray:
        cached = self._token_cache.get(key)
        if cached is not None:
            return cached
        digest = hashlib.sha256(f"{self.seed}|{key}".encode("utf-8")).digest()
        entropy = int.from_bytes(digest[:16], "big")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        vec = _unit(rng.standard_normal(self._dimension))
        self._token_cache[key] = vec
        return vec

    def embed_query(self, text: str) -> np.ndarray:
        total = np.zeros(self._dimension, dtype=np.float64)
        for token in text.split():
            weight = self.domain_scale if token.startswith("dom:") else 1.0
            total += weight * self._direction(f"tok|{token}")
        return _unit(total)

    def embed_role(self, role: RoleDescriptor) -> np.ndarray:
        return self._direction(f"role|{role.role_id}|{role.name}")


class ExternalEmbedder(EmbeddingProvider):
    """Client for an HTTP embedding endpoint.

    Expects ``POST endpoint`` with ``{"texts": [...]}`` to return
    ``{"vectors": [[...], ...]}``.  Stateless between calls, so instances are
    safe to share across threads.  Failures raise
    :class:`EmbeddingServiceError` with ``retriable`` set for transport and
    server-side errors and cleared for malformed requests or responses.
    """

    name = "external"

    def __init__(self, endpoint: str | None = None, dimension: int = 768,
                 timeout: float = 10.0):
        endpoint = endpoint or os.environ.get("TOPOPRIOR_EMBED_URL")
        if not endpoint:
            raise ValidationError(
                "no endpoint given and TOPOPRIOR_EMBED_URL is not set")
        self.endpoint = endpoint
        self._dimension = int(dimension)
        self.timeout = float(timeout)

    @property
    def dimension(self) -> int:
        return self._dimension

    def _embed(self, text: str) -> np.ndarray:
        import requests

        try:
            resp = requests.post(
                self.endpoint, json={"texts": [text]}, timeout=self.timeout)
        except requests.Timeout as exc:
            raise EmbeddingServiceError(
                f"timeout after {self.timeout}s", retriable=True) from exc
        except requests.RequestException as exc:
            raise EmbeddingServiceError(str(exc), retriable=True) from exc
        if resp.status_code >= 500:
            raise EmbeddingServiceError(
                f"server error {resp.status_code}", retriable=True)
        if resp.status_code != 200:
            raise EmbeddingServiceError(
                f"request rejected with status {resp.status_code}", retriable=False)
        try:
            vectors = resp.json()["vectors"]
            vec = np.asarray(vectors[0], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise EmbeddingServiceError(
                f"malformed response payload: {exc}", retriable=False) from exc
        if vec.shape != (self._dimension,):
            raise EmbeddingServiceError(
                f"endpoint returned dimension {vec.shape}, expected"
                f" ({self._dimension},)", retriable=False)
        return vec

    def embed_query(self, text: str) -> np.ndarray:
        return self._embed(text)

    def embed_role(self, role: RoleDescriptor) -> np.ndarray:
        return self._embed(f"{role.name}. {role.description}")


def role_feature_matrix(pool: RolePool, provider: EmbeddingProvider) -> np.ndarray:
    """Stack role embeddings into an (num_roles, dimension) float64 matrix."""
    return np.stack([provider.embed_role(r) for r in pool.roles]).astype(np.float64)
