"""
Text-to-vector featurizers for thought nodes.

Hosted chat APIs do not expose hidden states, so node features come either
from an embeddings endpoint projected to ``d`` dimensions or from a seeded
hash featurizer for offline runs.
"""

import hashlib
import logging
import threading
from abc import ABC, abstractmethod
from typing import Optional

import numpy as np
from sklearn.random_projection import GaussianRandomProjection

from errors import ShapeError

logger = logging.getLogger(__name__)


class FeatureProvider(ABC):
    source = ""

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise ShapeError(f"Feature dimension must be positive, got {dimension}")
        self.dimension = dimension

    @abstractmethod
    def _vector(self, text: str) -> np.ndarray:
        pass

    def featurize(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("Cannot featurize empty text")
        vector = np.asarray(self._vector(text), dtype=float)
        if vector.shape != (self.dimension,):
            raise ShapeError(f"Feature has shape {vector.shape}, expected ({self.dimension},)")
        if not np.all(np.isfinite(vector)):
            raise ShapeError("Feature contains non-finite entries")
        return vector


class HashFeaturizer(FeatureProvider):
    """Deterministic features in [-1, 1] seeded by the SHA-256 of the text."""

    source = "hash"

    def __init__(self, dimension: int = 64, salt: str = ""):
        super().__init__(dimension)
        self.salt = salt

    def _vector(self, text):
        digest = hashlib.sha256((self.salt + text).encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "big"))
        return rng.uniform(-1.0, 1.0, self.dimension)


class EmbeddingFeaturizer(FeatureProvider):
    """Provider embeddings reduced to ``d`` by a fixed seeded Gaussian projection."""

    source = "embedding"

    def __init__(self, backend, dimension: int = 64, seed: int = 0):
        super().__init__(dimension)
        self.backend = backend
        self.seed = seed
        self._projection: Optional[GaussianRandomProjection] = None
        self._lock = threading.Lock()

    def _project(self, embedding: np.ndarray) -> np.ndarray:
        with self._lock:
            if self._projection is None:
                self._projection = GaussianRandomProjection(n_components=self.dimension, random_state=self.seed)
                self._projection.fit(np.zeros((1, embedding.shape[0])))
                logger.info(f"Projecting {embedding.shape[0]}-dim embeddings to {self.dimension} dims")
        return self._projection.transform(embedding.reshape(1, -1))[0]

    def _vector(self, text):
        embedding = np.asarray(self.backend.embed(text), dtype=float)
        return self._project(embedding)


def featurize(provider: FeatureProvider, text: str) -> np.ndarray:
    return provider.featurize(text)


def make_feature_provider(source: str, dimension: int, backend=None, seed: int = 0) -> FeatureProvider:
    if source == "hash":
        return HashFeaturizer(dimension)
    if source == "embedding":
        if backend is None or not hasattr(backend, "embed"):
            raise ValueError("Embedding features need an HTTP backend")
        return EmbeddingFeaturizer(backend, dimension, seed)
    raise ValueError(f"Unknown feature source: {source!r}")
