"""Similarity matrices, k-reciprocal neighbor sets, and the Jaccard re-ranking distance.

The Jaccard distance follows the standard k-reciprocal re-ranking construction:
expanded reciprocal neighborhoods, exp-of-distance fuzzy memberships, optional
local query expansion, then 1 - min-sum / max-sum over membership vectors.
Inside that construction the neighbor lists are rank lists that contain the
point itself (so duplicates get identical membership vectors and distance 0);
the standalone `k_reciprocal_neighbors` operation excludes self per its
contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EmbeddingSet
from .errors import ParameterError

COSINE = "cosine"
JACCARD = "jaccard"


@dataclass
class DistanceMatrix:
    values: np.ndarray
    kind: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


def cosine_distance_matrix(embedding_set) -> DistanceMatrix:
    """Pairwise 1 - <x_i, x_j> on unit vectors; symmetric, zero diagonal, range [0, 2]."""
    vectors = embedding_set.vectors if isinstance(embedding_set, EmbeddingSet) else embedding_set
    x = np.asarray(vectors, dtype=np.float64)
    d = 1.0 - x @ x.T
    d = (d + d.T) / 2.0
    np.clip(d, 0.0, 2.0, out=d)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(values=d, kind=COSINE)


def _rank_table(dist: np.ndarray) -> np.ndarray:
    """Row-wise index order by ascending distance; stable, so ties break by id."""
    return np.argsort(dist, axis=1, kind="stable")


def k_reciprocal_neighbors(dist: DistanceMatrix, i: int, k: int) -> np.ndarray:
    """R(i,k) = { j : j in kNN(i,k) and i in kNN(j,k) }, kNN excluding self."""
    d = dist.values
    n = d.shape[0]
    if k >= n:
        raise ParameterError(f"k={k} must be < n={n}")
    order = _rank_table(d)
    knn_i = order[i][order[i] != i][:k]
    result = [j for j in knn_i if i in order[j][order[j] != j][:k]]
    return np.asarray(sorted(result), dtype=np.int64)


def _reciprocal_inclusive(order: np.ndarray, i: int, k: int) -> np.ndarray:
    """Self-inclusive reciprocal set over the first k+1 rank positions."""
    forward = order[i, : k + 1]
    backward = order[forward, : k + 1]
    return forward[(backward == i).any(axis=1)]


def jaccard_distance_matrix(
    dist: DistanceMatrix,
    k1: int = 20,
    k2: int = 6,
    expansion: bool = True,
    query_expansion: bool = True,
) -> DistanceMatrix:
    """k-reciprocal Jaccard distance over a precomputed base distance matrix.

    Membership vectors are V_i[j] = exp(-dist(i,j)) on the expanded reciprocal
    set R*(i,k1); a neighborhood R(j, ceil(k1/2)) is merged into R*(i,k1) when
    it overlaps R(i,k1) by at least two thirds of its size. Local query
    expansion (when enabled) replaces V_i by the mean of V over i and its
    k2 - 1 nearest neighbors. The result is symmetrized and clipped to [0, 1].
    """
    if k2 > k1:
        raise ParameterError(f"k2={k2} must be <= k1={k1}")
    if k2 < 1:
        raise ParameterError(f"k2={k2} must be >= 1")
    d = dist.values
    n = d.shape[0]
    k1 = min(k1, n - 1)
    k2 = min(k2, n)
    order = _rank_table(d)
    half = (k1 + 1) // 2

    memberships = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        reciprocal = _reciprocal_inclusive(order, i, k1)
        expanded = reciprocal
        if expansion:
            pieces = [reciprocal]
            for j in reciprocal:
                candidate = _reciprocal_inclusive(order, int(j), half)
                if np.intersect1d(candidate, reciprocal).size >= (2.0 / 3.0) * candidate.size:
                    pieces.append(candidate)
            expanded = np.unique(np.concatenate(pieces))
        memberships[i, expanded] = np.exp(-d[i, expanded])
        memberships[i, i] = 1.0  # self always belongs; keeps row sums positive under mass ties

    if query_expansion and k2 > 1:
        averaged = np.empty_like(memberships)
        for i in range(n):
            others = order[i][order[i] != i][: k2 - 1]
            averaged[i] = (memberships[i] + memberships[others].sum(axis=0)) / k2
        memberships = averaged

    row_sums = memberships.sum(axis=1)
    columns = [np.nonzero(memberships[:, m])[0] for m in range(n)]
    jaccard = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        min_sum = np.zeros(n, dtype=np.float64)
        for m in np.nonzero(memberships[i])[0]:
            rows = columns[m]
            min_sum[rows] += np.minimum(memberships[i, m], memberships[rows, m])
        jaccard[i] = 1.0 - min_sum / (row_sums[i] + row_sums - min_sum)

    jaccard = (jaccard + jaccard.T) / 2.0
    np.clip(jaccard, 0.0, 1.0, out=jaccard)
    np.fill_diagonal(jaccard, 0.0)
    return DistanceMatrix(values=jaccard, kind=JACCARD)
