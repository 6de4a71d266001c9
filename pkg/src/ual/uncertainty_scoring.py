"""Uncertainty scores, importance weights, and weighted group aggregation.

A face's uncertainty-sensitive score is the harmonic mean of the component
magnitudes of ``sigma * eps`` (the same noise that produced its stochastic
draw). Scores are reflected into importance scalars
``alpha = s_min + s_max - s`` so the most uncertain face in a group gets the
smallest weight, and faces are aggregated as the alpha-weighted mean of
their draws.

Raw ``sigma_d * eps_d`` products can be negative or vanish, so the harmonic
mean runs over ``max(|sigma_d * eps_d|, 1e-8)``: scores stay positive and
finite, which keeps every alpha (and hence every aggregation weight)
positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .gaussian_embedding import GaussianEmbedding, StochasticDraw

SCORE_FLOOR = 1e-8


@dataclass(frozen=True)
class ScoredIndividual:
    draw: StochasticDraw
    score: float
    importance: float


def score_individuals(
    embeddings: Sequence[GaussianEmbedding], draws: Sequence[StochasticDraw]
) -> list[ScoredIndividual]:
    """Score a group's draws and attach their importance scalars.

    Each draw is scored against its own embedding's sigma using the stored
    noise (the same eps that produced z*), then the whole group's scores
    are reflected into importance weights.
    """
    if len(embeddings) != len(draws):
        raise ShapeError(f"{len(embeddings)} embeddings for {len(draws)} draws")
    scores = [uncertainty_score(e.sigma, d.eps) for e, d in zip(embeddings, draws)]
    alphas = importance_scalars(scores)
    return [
        ScoredIndividual(draw=d, score=float(s), importance=float(a))
        for d, s, a in zip(draws, scores, alphas)
    ]


def uncertainty_score(sigma, eps) -> float:
    """Harmonic mean of ``max(|sigma_d * eps_d|, 1e-8)`` over dimensions."""
    sigma = np.asarray(sigma, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if sigma.shape != eps.shape or sigma.ndim != 1 or sigma.shape[0] < 1:
        raise ShapeError(f"sigma/eps must be equal-length vectors, got {sigma.shape} vs {eps.shape}")
    t = np.maximum(np.abs(sigma * eps), SCORE_FLOOR)
    return float(sigma.shape[0] / np.sum(1.0 / t))


def uncertainty_scores(sigma: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Batched scores over the last axis; leading axes index individuals/draws."""
    t = np.maximum(np.abs(sigma * eps), SCORE_FLOOR)
    d = t.shape[-1]
    return d / np.sum(1.0 / t, axis=-1)


def importance_scalars(scores) -> np.ndarray:
    """Reflect scores into weights: ``alpha = s_min + s_max - s``.

    The ordering of alpha is the exact reverse of the ordering of the
    scores. When all scores coincide (including a single individual) the
    projection is degenerate and every alpha is 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] < 1:
        raise ShapeError("scores must be a nonempty 1-D sequence")
    s_min, s_max = float(s.min()), float(s.max())
    if s_max > s_min:
        return s_min + s_max - s
    return np.ones_like(s)


def aggregate_group(draws: Sequence[StochasticDraw] | np.ndarray, alphas) -> np.ndarray:
    """Alpha-weighted mean of the stochastic draws: ``sum(a z*) / sum(a)``."""
    a = np.asarray(alphas, dtype=np.float64)
    if isinstance(draws, np.ndarray):
        z = draws
    else:
        z = np.stack([d.z_star for d in draws]) if len(draws) else np.zeros((0, 0))
    if z.shape[0] == 0:
        raise ValueError("cannot aggregate an empty group")
    if a.ndim != 1 or a.shape[0] != z.shape[0]:
        raise ShapeError(f"{a.shape[0] if a.ndim == 1 else a.shape} weights for {z.shape[0]} draws")
    if not np.all(a > 0.0):
        raise ValueError("aggregation weights must be strictly positive")
    w = a / a.sum()  # normalize first: a single face aggregates to exactly z*
    return (w[:, None] * z).sum(axis=0)


def high_low_partition(alphas: np.ndarray, ratio: float) -> tuple[np.ndarray, int]:
    """Descending stable sort order and the size of the high partition.

    The top ``ceil(ratio * n)`` indices form the high group, capped at
    ``n - 1`` so the low group is never empty; ties keep original order.
    """
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] < 2:
        raise ShapeError("high/low partition needs at least 2 individuals")
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    order = np.argsort(-a, kind="stable")
    n_high = min(math.ceil(ratio * a.shape[0]), a.shape[0] - 1)
    return order, n_high


def split_high_low(alphas, ratio: float) -> tuple[float, float]:
    """Mean importance of the high and low partitions."""
    a = np.asarray(alphas, dtype=np.float64)
    order, n_high = high_low_partition(a, ratio)
    return float(a[order[:n_high]].mean()), float(a[order[n_high:]].mean())
