"""Outlier pseudo-label mining through the pairing relation.

For each outlier instance the refined stage walks: paired instances that are
clustered (set B), the same-modality cluster mates of B (set C, minus the
outlier's own paired set), their clustered paired instances back in the
outlier's modality (set D, minus the outlier itself), and finally assigns the
cluster of the most similar member of D. Picked candidates found unusable go
into an exclusion set U and the argmax re-selects; with the default
pre-filtered D the loop accepts on the first pick.

Assignments apply immediately by default, so later outliers in the same pass
see earlier recoveries; a deferred mode freezes labels for the whole pass and
applies assignments at the end. The second stage is a partition: pairs whose
endpoints are both clustered are "mined", the rest feed a supplementary
contrastive stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import OUTLIER, PseudoLabeling
from .corpus import PairGraph
from .errors import ParameterError

CLUSTER_MATES = "cluster"
KNN_MATES = "knn"


@dataclass
class MiningReport:
    """What one refined-stage run assigned, what is left, and what the argmax rejected."""

    assigned: list[tuple[int, int, str]] = field(default_factory=list)
    remaining_outliers_image: int = 0
    remaining_outliers_text: int = 0
    excluded_trace: dict[str, dict[int, list[int]]] = field(default_factory=lambda: {"image": {}, "text": {}})

    def assigned_count(self, modality: str) -> int:
        return sum(1 for _, _, m in self.assigned if m == modality)

    def to_json_dict(self) -> dict:
        return {
            "assigned": [[int(i), int(c), m] for i, c, m in self.assigned],
            "remaining_outliers_image": self.remaining_outliers_image,
            "remaining_outliers_text": self.remaining_outliers_text,
            "excluded_trace": {
                mod: {str(k): [int(x) for x in v] for k, v in trace.items()}
                for mod, trace in self.excluded_trace.items()
            },
        }


def _cluster_mates(labels: np.ndarray, clusters: set[int], exclude: set[int]) -> list[int]:
    mask = np.isin(labels, list(clusters))
    return [int(i) for i in np.nonzero(mask)[0] if int(i) not in exclude]


def _knn_mates(features: np.ndarray, seed_ids: list[int], labels: np.ndarray, exclude: set[int], k: int) -> list[int]:
    """k nearest clustered same-modality samples of each seed, by inner product."""
    mates: set[int] = set()
    clustered = np.nonzero(labels != OUTLIER)[0]
    for s in seed_ids:
        sims = features[clustered] @ features[s]
        order = clustered[np.argsort(-sims, kind="stable")]
        picked = [int(j) for j in order if int(j) != s and int(j) not in exclude][:k]
        mates.update(picked)
    return sorted(mates)


def _mine_direction(
    outlier_features: np.ndarray,
    mate_features: np.ndarray,
    outlier_labels: PseudoLabeling,
    mate_labels: PseudoLabeling,
    to_mates: dict[int, list[int]],
    to_outlier_side: dict[int, list[int]],
    modality: str,
    neighbor_mode: str,
    knn_k: int,
    deferred: bool,
    report: MiningReport,
) -> None:
    """One directional pass; mutates outlier_labels (at the end when deferred)."""
    initial = [int(i) for i in outlier_labels.outlier_ids()]
    reference = outlier_labels.labels.copy() if deferred else outlier_labels.labels
    pending: list[tuple[int, int]] = []

    for anchor in initial:
        trace: list[int] = []
        report.excluded_trace[modality][anchor] = trace

        paired = to_mates.get(anchor, [])
        clustered_paired = [t for t in paired if mate_labels.labels[t] != OUTLIER]
        if not clustered_paired:
            continue

        seed_clusters = {int(mate_labels.labels[t]) for t in clustered_paired}
        if neighbor_mode == CLUSTER_MATES:
            mates = _cluster_mates(mate_labels.labels, seed_clusters, exclude=set(paired))
        elif neighbor_mode == KNN_MATES:
            mates = _knn_mates(mate_features, clustered_paired, mate_labels.labels, exclude=set(paired), k=knn_k)
        else:
            raise ParameterError(f"unknown neighbor mode {neighbor_mode!r}")
        if not mates:
            continue

        candidates: list[int] = []
        seen = {anchor}
        for mate in mates:
            for cand in to_outlier_side.get(mate, []):
                if cand not in seen and reference[cand] != OUTLIER:
                    seen.add(cand)
                    candidates.append(cand)
        if not candidates:
            continue

        candidates = sorted(candidates)
        excluded: set[int] = set()
        while len(excluded) < len(candidates):
            remaining = [c for c in candidates if c not in excluded]
            sims = outlier_features[remaining] @ outlier_features[anchor]
            best = remaining[int(np.argmax(sims))]
            label = int(reference[best])
            if label != OUTLIER:
                if deferred:
                    pending.append((anchor, label))
                else:
                    outlier_labels.assign(anchor, label)
                report.assigned.append((anchor, label, modality))
                break
            excluded.add(best)
            trace.append(best)

    for anchor, label in pending:
        outlier_labels.assign(anchor, label)


def mine_outliers_v2t(
    image_features: np.ndarray,
    text_features: np.ndarray,
    pairs: PairGraph,
    labels_v: PseudoLabeling,
    labels_t: PseudoLabeling,
    neighbor_mode: str = CLUSTER_MATES,
    knn_k: int = 20,
    deferred: bool = False,
    report: MiningReport | None = None,
) -> MiningReport:
    """Assign outlier images via their captions' cluster neighborhoods; mutates labels_v."""
    report = report if report is not None else MiningReport()
    _mine_direction(
        outlier_features=np.asarray(image_features, dtype=np.float64),
        mate_features=np.asarray(text_features, dtype=np.float64),
        outlier_labels=labels_v,
        mate_labels=labels_t,
        to_mates=pairs.image_to_texts,
        to_outlier_side=pairs.text_to_images,
        modality="image",
        neighbor_mode=neighbor_mode,
        knn_k=knn_k,
        deferred=deferred,
        report=report,
    )
    report.remaining_outliers_image = labels_v.outlier_count()
    report.remaining_outliers_text = labels_t.outlier_count()
    return report


def mine_outliers_t2v(
    image_features: np.ndarray,
    text_features: np.ndarray,
    pairs: PairGraph,
    labels_v: PseudoLabeling,
    labels_t: PseudoLabeling,
    neighbor_mode: str = CLUSTER_MATES,
    knn_k: int = 20,
    deferred: bool = False,
    report: MiningReport | None = None,
) -> MiningReport:
    """Assign outlier texts via their images' cluster neighborhoods; mutates labels_t."""
    report = report if report is not None else MiningReport()
    _mine_direction(
        outlier_features=np.asarray(text_features, dtype=np.float64),
        mate_features=np.asarray(image_features, dtype=np.float64),
        outlier_labels=labels_t,
        mate_labels=labels_v,
        to_mates=pairs.text_to_images,
        to_outlier_side=pairs.image_to_texts,
        modality="text",
        neighbor_mode=neighbor_mode,
        knn_k=knn_k,
        deferred=deferred,
        report=report,
    )
    report.remaining_outliers_image = labels_v.outlier_count()
    report.remaining_outliers_text = labels_t.outlier_count()
    return report


def run_refined_stage(
    image_features: np.ndarray,
    text_features: np.ndarray,
    pairs: PairGraph,
    labels_v: PseudoLabeling,
    labels_t: PseudoLabeling,
    neighbor_mode: str = CLUSTER_MATES,
    knn_k: int = 20,
    deferred: bool = False,
    image_first: bool = True,
) -> MiningReport:
    """Both directional passes (image direction first by default); merged report."""
    report = MiningReport()
    passes = [mine_outliers_v2t, mine_outliers_t2v] if image_first else [mine_outliers_t2v, mine_outliers_v2t]
    for fn in passes:
        fn(
            image_features,
            text_features,
            pairs,
            labels_v,
            labels_t,
            neighbor_mode=neighbor_mode,
            knn_k=knn_k,
            deferred=deferred,
            report=report,
        )
    return report


def partition_two_stage(
    pairs: PairGraph,
    labels_v: PseudoLabeling,
    labels_t: PseudoLabeling,
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Split all pairs into (mined, supplementary) by whether both endpoints are clustered.

    The two lists are disjoint and jointly cover every pair.
    """
    mined: list[tuple[int, int]] = []
    supplementary: list[tuple[int, int]] = []
    for img, txt in pairs.pairs():
        if labels_v.labels[img] != OUTLIER and labels_t.labels[txt] != OUTLIER:
            mined.append((img, txt))
        else:
            supplementary.append((img, txt))
    return mined, supplementary
