"""Stochastic-embedding quality filter for faces.

A face's quality is judged by how dispersed repeated stochastic embeddings
of it are: ``m`` reparameterized draws from its latent Gaussian are scored
by ``2 * sigmoid(-(2 / m^2) * sum_{i<j} ||x_i - x_j||)``. Identical draws
score exactly 1.0 and the score decays to 0 as pairwise distances grow, so
high-variance (low-quality) faces fall below the keep threshold.

Dropping every face would leave the group aggregation undefined, so when a
whole group fails the threshold the single best-scoring face is kept.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .gaussian_embedding import GaussianEmbedding
from .numerics import SeededRng

DEFAULT_THRESHOLD = 0.3
DEFAULT_SAMPLES = 8


@dataclass(frozen=True)
class QualityAssessment:
    face_id: str
    score: float
    kept: bool
    samples: int


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def fiqe_score(embeddings: Sequence[np.ndarray] | np.ndarray) -> float:
    """Dispersion score of ``m >= 2`` stochastic embeddings of one face."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"need a (m >= 2, dim) stack of embeddings, got shape {x.shape}")
    m = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.square(diff).sum(axis=-1))
    total = float(dist[np.triu_indices(m, k=1)].sum())
    return 2.0 * _sigmoid(-(2.0 / (m * m)) * total)


def score_face(
    emb: GaussianEmbedding, samples: int, rng: SeededRng, eps: np.ndarray | None = None
) -> float:
    """Score one face from ``samples`` reparameterized draws of its Gaussian.

    ``eps`` may supply the (samples, dim) noise block directly (test hook).
    """
    if samples < 2:
        raise ValueError("quality scoring needs at least 2 samples")
    if eps is None:
        eps = rng.normals((samples, emb.dim))
    z = emb.mu[None, :] + eps * emb.sigma[None, :]
    return fiqe_score(z)


def filter_faces(
    embeddings: Sequence[GaussianEmbedding],
    samples: int,
    threshold: float,
    rng_streams: Sequence[SeededRng],
) -> tuple[list[int], list[QualityAssessment]]:
    """Keep the faces whose quality score reaches ``threshold``.

    Each face draws from its own rng stream, so filtering is independent of
    list order. If no face passes, the single best-scoring one (first on
    ties) is kept so the group never becomes empty. Returns kept indices in
    original order plus an assessment for every face.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if len(rng_streams) != len(embeddings):
        raise ShapeError("one rng stream per face is required")
    scores = [
        score_face(emb, samples, stream) for emb, stream in zip(embeddings, rng_streams)
    ]
    kept = [i for i, s in enumerate(scores) if s >= threshold]
    if not kept and scores:
        kept = [int(np.argmax(scores))]
    kept_set = set(kept)
    assessments = [
        QualityAssessment(
            face_id=emb.source_id, score=score, kept=i in kept_set, samples=samples
        )
        for i, (emb, score) in enumerate(zip(embeddings, scores))
    ]
    return kept, assessments
