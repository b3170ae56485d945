"""Prototype memories: per-modality cluster prototypes with momentum maintenance.

A memory holds one prototype row per pseudo-label cluster. Prototypes start as
(re-normalized) cluster means or as a randomly drawn member, and move by
c <- m*c + (1-m)*f after every optimization step. Prototypes are treated as
constants by the losses; the momentum rule is the only thing that moves them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import OUTLIER, PseudoLabeling
from .corpus import EmbeddingSet, PairGraph
from .errors import EmptyMemoryError, ParameterError, ReferentialIntegrityError

AVERAGE = "average"
RANDOM = "random"

TEMPERATURE_MIN = 0.005
TEMPERATURE_MAX = 1.0


@dataclass
class PrototypeMemory:
    prototypes: np.ndarray
    momentum: float
    temperature: float
    modality: str
    renormalize: bool = True

    @property
    def n_clusters(self) -> int:
        return self.prototypes.shape[0]


def init_memory(
    features,
    labeling: PseudoLabeling,
    policy: str = AVERAGE,
    seed: int = 0,
    momentum: float = 0.9,
    temperature: float = 0.07,
    renormalize: bool = True,
) -> PrototypeMemory:
    """Build a memory from the current labeling; outlier instances are ignored.

    Average policy: prototype = mean of member features, then renormalized.
    Random policy: prototype = the feature of one uniformly drawn member.
    """
    x = features.vectors if isinstance(features, EmbeddingSet) else features
    x = np.asarray(x, dtype=np.float64)
    if labeling.n_clusters < 1:
        raise EmptyMemoryError(f"labeling for {labeling.modality} has zero clusters")
    if policy not in (AVERAGE, RANDOM):
        raise ParameterError(f"unknown init policy {policy!r}")

    rng = np.random.default_rng(seed)
    prototypes = np.empty((labeling.n_clusters, x.shape[1]), dtype=np.float64)
    for cluster in range(labeling.n_clusters):
        members = labeling.members(cluster)
        if members.size == 0:
            raise EmptyMemoryError(f"cluster {cluster} of {labeling.modality} labeling is empty")
        if policy == AVERAGE:
            prototypes[cluster] = x[members].mean(axis=0)
        else:
            prototypes[cluster] = x[int(rng.choice(members))]
    if renormalize:
        prototypes = _renormalize_rows(prototypes)
    return PrototypeMemory(
        prototypes=prototypes,
        momentum=momentum,
        temperature=temperature,
        modality=labeling.modality,
        renormalize=renormalize,
    )


def momentum_update(mem: PrototypeMemory, feature: np.ndarray, cluster: int) -> None:
    """c <- m*c + (1-m)*f for one feature, then renormalize if enabled."""
    if not 0 <= cluster < mem.n_clusters:
        raise IndexError(f"cluster id {cluster} outside 0..{mem.n_clusters - 1}")
    updated = mem.momentum * mem.prototypes[cluster] + (1.0 - mem.momentum) * np.asarray(feature, dtype=np.float64)
    if mem.renormalize:
        norm = np.linalg.norm(updated)
        if norm > 1e-12:
            updated = updated / norm
    mem.prototypes[cluster] = updated


def update_from_batch(mem: PrototypeMemory, features: np.ndarray, clusters: np.ndarray) -> None:
    """Apply momentum updates feature by feature, in batch order; outlier rows are skipped."""
    for feature, cluster in zip(features, clusters):
        if cluster == OUTLIER:
            continue
        momentum_update(mem, feature, int(cluster))


def lookup_positive(
    mem: PrototypeMemory,
    instance: int,
    opposite_labeling: PseudoLabeling,
    pairs: PairGraph,
    paired_instance: int | None = None,
) -> int | None:
    """Cluster id of the paired instance in the opposite modality, or None if it is an outlier.

    When several paired instances exist the caller passes the one drawn for the
    batch item; by default the first listed pair is used.
    """
    mapping = pairs.text_to_images if mem.modality == "image" else pairs.image_to_texts
    partners = mapping.get(instance, [])
    if not partners:
        raise ReferentialIntegrityError(f"instance {instance} has no pairs")
    if paired_instance is None:
        paired_instance = partners[0]
    elif paired_instance not in partners:
        raise ReferentialIntegrityError(f"instance {instance} is not paired with {paired_instance}")
    label = int(opposite_labeling.labels[paired_instance])
    return None if label == OUTLIER else label


def _renormalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms <= 1e-12] = 1.0
    return matrix / norms
