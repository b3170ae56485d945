"""Retrieval evaluation: Rank-k recall, mAP, and mINP over full similarity rankings."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import Corpus
from .errors import EvalWithoutTruthError, ParameterError

logger = logging.getLogger(__name__)


@dataclass
class RankingResult:
    """Per-query gallery order (descending similarity, ties by ascending id)
    and the relevance mask aligned with that order."""

    order: np.ndarray
    relevance: np.ndarray

    @property
    def n_queries(self) -> int:
        return self.order.shape[0]

    @property
    def gallery_size(self) -> int:
        return self.order.shape[1]


@dataclass
class MetricsReport:
    r1: float
    r5: float
    r10: float
    map: float
    minp: float
    n_queries: int

    def to_json_dict(self) -> dict:
        return asdict(self)


def rank_gallery(
    query_vectors: np.ndarray,
    gallery_vectors: np.ndarray,
    query_identity: np.ndarray,
    gallery_identity: np.ndarray,
) -> RankingResult:
    """Full inner-product ranking of the gallery for every query."""
    if query_identity is None or gallery_identity is None:
        raise EvalWithoutTruthError("ranking requires identity labels for queries and gallery")
    q = np.asarray(query_vectors, dtype=np.float64)
    g = np.asarray(gallery_vectors, dtype=np.float64)
    sims = q @ g.T
    n_gallery = g.shape[0]
    ids = np.arange(n_gallery)
    order = np.empty_like(sims, dtype=np.int64)
    for i in range(sims.shape[0]):
        order[i] = np.lexsort((ids, -sims[i]))
    relevance = np.asarray(gallery_identity)[order] == np.asarray(query_identity)[:, None]
    return RankingResult(order=order, relevance=relevance)


def recall_at_k(result: RankingResult, k: int) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    return float(result.relevance[:, :k].any(axis=1).mean())


def _per_query_stats(result: RankingResult, strict: bool, metric: str):
    """Yields relevance rows, skipping (or rejecting) queries without any relevant item."""
    for i in range(result.n_queries):
        row = result.relevance[i]
        if not row.any():
            if strict:
                raise EvalWithoutTruthError(f"query {i} has no relevant gallery item ({metric})")
            logger.warning("query %d has no relevant gallery item; excluded from %s", i, metric)
            continue
        yield row


def mean_average_precision(result: RankingResult, strict: bool = False) -> float:
    """mAP with AP = mean over relevant ranks r of (relevant within top r) / r."""
    values = []
    for row in _per_query_stats(result, strict, "mAP"):
        positions = np.nonzero(row)[0]
        precisions = np.cumsum(row)[positions] / (positions + 1)
        values.append(precisions.mean())
    return float(np.mean(values)) if values else 0.0


def mean_inverse_negative_penalty(result: RankingResult, strict: bool = False) -> float:
    """mINP with INP = (#relevant) / rank of the hardest (last-retrieved) relevant item."""
    values = []
    for row in _per_query_stats(result, strict, "mINP"):
        positions = np.nonzero(row)[0]
        values.append(positions.size / (positions[-1] + 1))
    return float(np.mean(values)) if values else 0.0


def evaluate(
    corpus: Corpus,
    image_head,
    text_head,
    direction: str = "text_to_image",
    strict: bool = False,
) -> MetricsReport:
    """Encode the corpus and report text-to-image retrieval metrics (or the reverse)."""
    if corpus.ground_truth is None:
        raise EvalWithoutTruthError("corpus carries no ground-truth identities")
    images = image_head.encode(corpus.images.vectors)
    texts = text_head.encode(corpus.texts.vectors)
    truth = corpus.ground_truth
    if direction == "text_to_image":
        result = rank_gallery(texts, images, truth.text_identity, truth.image_identity)
    elif direction == "image_to_text":
        result = rank_gallery(images, texts, truth.image_identity, truth.text_identity)
    else:
        raise ParameterError(f"unknown direction {direction!r}")
    return MetricsReport(
        r1=recall_at_k(result, 1),
        r5=recall_at_k(result, 5),
        r10=recall_at_k(result, 10),
        map=mean_average_precision(result, strict=strict),
        minp=mean_inverse_negative_penalty(result, strict=strict),
        n_queries=result.n_queries,
    )
