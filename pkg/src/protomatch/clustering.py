"""Pseudo-label generation: DBSCAN on precomputed distances, k-means, relabeling.

Labels use OUTLIER (-1) for noise points. Cluster ids are dense (0..n_clusters-1,
each non-empty). All scans run in ascending instance id so results are
reproducible; DBSCAN border points reachable from several clusters go to the
cluster of the lowest-id core point within eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affinity import DistanceMatrix
from .corpus import EmbeddingSet
from .errors import ParameterError

OUTLIER = -1


@dataclass
class PseudoLabeling:
    """Per-instance cluster assignment with an explicit outlier sentinel."""

    labels: np.ndarray
    n_clusters: int
    modality: str = "image"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def count(self) -> int:
        return self.labels.shape[0]

    def outlier_count(self) -> int:
        return int((self.labels == OUTLIER).sum())

    def outlier_ids(self) -> np.ndarray:
        return np.nonzero(self.labels == OUTLIER)[0]

    def members(self, cluster: int) -> np.ndarray:
        return np.nonzero(self.labels == cluster)[0]

    def assign(self, instance: int, cluster: int) -> None:
        """Give an outlier an existing cluster id (mining never invents labels)."""
        if not 0 <= cluster < self.n_clusters:
            raise ParameterError(f"cluster id {cluster} outside 0..{self.n_clusters - 1}")
        if self.labels[instance] != OUTLIER:
            raise ParameterError(f"instance {instance} is not an outlier")
        self.labels[instance] = cluster

    def copy(self) -> "PseudoLabeling":
        return PseudoLabeling(self.labels.copy(), self.n_clusters, self.modality)


def dbscan(dist: DistanceMatrix, eps: float, min_pts: int, modality: str = "image") -> PseudoLabeling:
    """Classic DBSCAN on a precomputed symmetric distance matrix.

    A point is core iff it has >= min_pts neighbors within eps, itself included.
    Clusters are connected components of core points; border points attach to
    the cluster of the lowest-id core point in range; the rest are outliers.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ParameterError(f"min_pts must be >= 1, got {min_pts}")
    d = dist.values
    n = d.shape[0]
    within = d <= eps
    core = within.sum(axis=1) >= min_pts

    labels = np.full(n, OUTLIER, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != OUTLIER:
            continue
        labels[seed] = next_id
        frontier = [seed]
        while frontier:
            point = frontier.pop()
            for neighbor in np.nonzero(within[point])[0]:
                if core[neighbor] and labels[neighbor] == OUTLIER:
                    labels[neighbor] = next_id
                    frontier.append(int(neighbor))
        next_id += 1

    # border points: lowest-id reachable core decides the cluster
    for point in range(n):
        if core[point] or labels[point] != OUTLIER:
            continue
        reachable = np.nonzero(within[point] & core)[0]
        if reachable.size:
            labels[point] = labels[reachable[0]]

    return PseudoLabeling(labels=labels, n_clusters=next_id, modality=modality)


def kmeans(
    features,
    k: int,
    max_iters: int = 100,
    seed: int = 0,
    modality: str = "image",
    objective_trace: list | None = None,
) -> PseudoLabeling:
    """Lloyd's algorithm with k-means++ seeding; empty clusters re-seed from the farthest point.

    Terminates at max_iters or at an assignment fixpoint; never emits outliers.
    When objective_trace is a list, the within-cluster squared cost measured
    after each assignment step is appended to it.
    """
    x = features.vectors if isinstance(features, EmbeddingSet) else features
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ParameterError(f"k={k} must be <= n={n}")
    if k < 1:
        raise ParameterError("k must be >= 1")
    if max_iters < 1:
        raise ParameterError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(x, k, rng)

    labels: np.ndarray | None = None
    for _ in range(max_iters):
        sq_dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(sq_dist, axis=1)
        point_cost = sq_dist[np.arange(n), new_labels]
        counts = np.bincount(new_labels, minlength=k)
        for cluster in range(k):
            if counts[cluster]:
                continue
            # steal the costliest point, but never the only member of its cluster
            eligible = counts[new_labels] > 1
            farthest = int(np.argmax(np.where(eligible, point_cost, -1.0)))
            counts[new_labels[farthest]] -= 1
            counts[cluster] += 1
            centroids[cluster] = x[farthest]
            new_labels[farthest] = cluster
            point_cost[farthest] = 0.0
        if objective_trace is not None:
            objective_trace.append(float(point_cost.sum()))
        if labels is not None and (new_labels == labels).all():
            break
        labels = new_labels
        for cluster in range(k):
            centroids[cluster] = x[labels == cluster].mean(axis=0)

    return PseudoLabeling(labels=labels, n_clusters=k, modality=modality)


def _kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    chosen = {first}
    for i in range(1, k):
        sq = ((x[:, None, :] - centroids[None, :i, :]) ** 2).sum(axis=2).min(axis=1)
        total = sq.sum()
        if total <= 0:
            candidates = sorted(set(range(n)) - chosen)
            pick = candidates[int(rng.integers(len(candidates)))]
        else:
            pick = int(rng.choice(n, p=sq / total))
        centroids[i] = x[pick]
        chosen.add(pick)
    return centroids


def kmeans_objective(features, labeling: PseudoLabeling) -> float:
    """Sum of squared distances to assigned centroids (centroids = member means)."""
    x = features.vectors if isinstance(features, EmbeddingSet) else features
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    for cluster in range(labeling.n_clusters):
        members = x[labeling.labels == cluster]
        if members.size:
            total += ((members - members.mean(axis=0)) ** 2).sum()
    return float(total)


def relabel_dense(labeling: PseudoLabeling) -> PseudoLabeling:
    """Compact cluster ids to 0..m-1 in order of first appearance; outliers kept."""
    mapping: dict[int, int] = {}
    new_labels = np.full_like(labeling.labels, OUTLIER)
    for i, label in enumerate(labeling.labels):
        if label == OUTLIER:
            continue
        if label not in mapping:
            mapping[int(label)] = len(mapping)
        new_labels[i] = mapping[int(label)]
    return PseudoLabeling(labels=new_labels, n_clusters=len(mapping), modality=labeling.modality)
