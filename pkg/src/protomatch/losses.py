"""Hybrid contrastive loss stack with closed-form gradients.

Four losses over a batch of paired (image, text) features:

* prototype-contrastive matching, cross-modal: each feature against the
  opposite modality's prototype memory, positive = the paired instance's
  cluster prototype;
* prototype-contrastive matching, single-modal: each feature against its own
  modality's memory, positive = its own cluster prototype;
* instance cross-modal projection matching: KL between the in-batch softmax
  similarity rows and a pseudo-label-derived matching distribution;
* in-batch bidirectional InfoNCE over the paired instances.

Gradients are derived from softmax/KL closed forms and returned with respect
to the batch feature matrices and the temperatures involved; prototype
memories are constants in the loss graph. Per-item losses are averaged over
the (effective) batch, and every softmax subtracts its row max before
exponentiation so values stay finite down to temperature 0.005.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import OUTLIER, PseudoLabeling
from .corpus import PairGraph
from .errors import DegenerateMatchError, EmptyBatchError
from .memory import PrototypeMemory

TAU_IMAGE = "image_temperature"
TAU_TEXT = "text_temperature"
TAU_ICPM = "icpm_temperature"
TAU_ITC = "itc_temperature"


@dataclass
class Batch:
    """Aligned rows of paired image/text features plus their positive prototype ids.

    image_pos_cluster[i] is the image's own cluster in the image labeling and
    text_pos_cluster[i] the paired text's cluster in the text labeling; OUTLIER
    marks "no positive" and excludes the item from the loss terms needing it.
    """

    image_features: np.ndarray
    text_features: np.ndarray
    image_ids: np.ndarray
    text_ids: np.ndarray
    image_pos_cluster: np.ndarray
    text_pos_cluster: np.ndarray

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        self.image_pos_cluster = np.asarray(self.image_pos_cluster, dtype=np.int64)
        self.text_pos_cluster = np.asarray(self.text_pos_cluster, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.image_features.shape[0]


@dataclass
class LossOutput:
    """Scalar loss plus exact gradients w.r.t. batch features and temperatures."""

    value: float
    grad_image: np.ndarray
    grad_text: np.ndarray
    grad_temps: dict[str, float] = field(default_factory=dict)

    def add(self, other: "LossOutput") -> "LossOutput":
        temps = dict(self.grad_temps)
        for key, val in other.grad_temps.items():
            temps[key] = temps.get(key, 0.0) + val
        return LossOutput(
            value=self.value + other.value,
            grad_image=self.grad_image + other.grad_image,
            grad_text=self.grad_text + other.grad_text,
            grad_temps=temps,
        )


@dataclass
class LossConfig:
    """Toggles and fixed temperatures for the combined objective."""

    use_pcm: bool = True
    pcm_variant: str = "cross"
    use_icpm: bool = True
    icpm_temperature: float = 0.07
    icpm_epsilon: float = 1e-8


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _zeros_like_batch(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros_like(batch.image_features), np.zeros_like(batch.text_features)


def _pcm_direction(anchors: np.ndarray, prototypes: np.ndarray, positives: np.ndarray, tau: float):
    """Mean cross-entropy of anchors against a prototype bank.

    Returns (value, grad_anchors, grad_tau). grad_anchors rows are the softmax
    residuals mapped back through the prototype bank; prototypes are constants.
    """
    n = anchors.shape[0]
    scores = anchors @ prototypes.T
    logits = scores / tau
    log_probs = _log_softmax(logits)
    rows = np.arange(n)
    value = float(-log_probs[rows, positives].mean())

    residual = np.exp(log_probs)
    residual[rows, positives] -= 1.0
    grad_anchors = residual @ prototypes / (tau * n)
    # d(loss)/d(tau): logits scale as s/tau, so dz/dtau = -s/tau^2
    grad_tau = float(-(residual * scores).sum() / (tau * tau * n))
    return value, grad_anchors, grad_tau


def _pcm_pair(batch, image_bank, text_bank, image_positives, text_positives, tau_image, tau_text):
    """Shared machinery for both prototype-contrastive variants.

    The image direction scores image features against image_bank using
    tau_image and image_positives; symmetric for text. Items without a
    positive are dropped from that direction only.
    """
    if batch.size == 0:
        raise EmptyBatchError("batch has no items")
    valid_v = np.nonzero(image_positives != OUTLIER)[0]
    valid_t = np.nonzero(text_positives != OUTLIER)[0]
    if valid_v.size == 0 and valid_t.size == 0:
        raise EmptyBatchError("no batch item has a usable positive prototype")

    grad_image, grad_text = _zeros_like_batch(batch)
    value = 0.0
    grad_tau_v = grad_tau_t = 0.0
    if valid_v.size:
        v, g, gt = _pcm_direction(
            batch.image_features[valid_v], image_bank, image_positives[valid_v], tau_image
        )
        value += v
        grad_image[valid_v] = g
        grad_tau_v = gt
    if valid_t.size:
        v, g, gt = _pcm_direction(
            batch.text_features[valid_t], text_bank, text_positives[valid_t], tau_text
        )
        value += v
        grad_text[valid_t] = g
        grad_tau_t = gt
    return LossOutput(
        value=value,
        grad_image=grad_image,
        grad_text=grad_text,
        grad_temps={TAU_IMAGE: grad_tau_v, TAU_TEXT: grad_tau_t},
    )


def pcm_cross(batch: Batch, text_mem: PrototypeMemory, image_mem: PrototypeMemory) -> LossOutput:
    """Cross-modal prototype matching: images score the text memory (positive =
    the paired caption's cluster) with the image-side temperature, and
    symmetrically for texts."""
    return _pcm_pair(
        batch,
        image_bank=text_mem.prototypes,
        text_bank=image_mem.prototypes,
        image_positives=batch.text_pos_cluster,
        text_positives=batch.image_pos_cluster,
        tau_image=image_mem.temperature,
        tau_text=text_mem.temperature,
    )


def pcm_single(batch: Batch, image_mem: PrototypeMemory, text_mem: PrototypeMemory) -> LossOutput:
    """Single-modal prototype matching: each feature scores its own modality's
    memory with its own cluster as the positive."""
    return _pcm_pair(
        batch,
        image_bank=image_mem.prototypes,
        text_bank=text_mem.prototypes,
        image_positives=batch.image_pos_cluster,
        text_positives=batch.text_pos_cluster,
        tau_image=image_mem.temperature,
        tau_text=text_mem.temperature,
    )


def _projection_direction(anchors, candidates, match, tau, eps):
    """One direction of the projection-matching KL; returns value and gradients.

    p = row-softmax(anchors @ candidates.T / tau), q = row-normalized match,
    loss = (1/N) sum_ij p_ij log(p_ij / (q_ij + eps)).
    """
    n = anchors.shape[0]
    scores = anchors @ candidates.T
    logits = scores / tau
    log_p = _log_softmax(logits)
    p = np.exp(log_p)
    q = match / match.sum(axis=1, keepdims=True)
    ratio = log_p - np.log(q + eps)
    value = float((p * ratio).sum() / n)

    # dL/dz_ik = p_ik (ratio_ik - sum_j p_ij ratio_ij); the +1 term cancels
    # because softmax rows of dp sum to zero.
    inner = (p * ratio).sum(axis=1, keepdims=True)
    g = p * (ratio - inner)
    grad_anchors = g @ candidates / (tau * n)
    grad_candidates = g.T @ anchors / (tau * n)
    grad_tau = float(-(g * scores).sum() / (tau * tau * n))
    return value, grad_anchors, grad_candidates, grad_tau


def icpm(batch: Batch, match: np.ndarray, tau: float = 0.07, eps: float = 1e-8) -> LossOutput:
    """Instance-level projection matching over one batch, both directions.

    match[i, j] is true when image item i and text item j count as a positive
    pair under the current pseudo labels; the diagonal must be true.
    """
    if batch.size == 0:
        raise EmptyBatchError("batch has no items")
    match = np.asarray(match, dtype=bool)
    if not match.any(axis=1).all():
        raise DegenerateMatchError("a match-matrix row has no positive entry")
    if not match.any(axis=0).all():
        raise DegenerateMatchError("a match-matrix column has no positive entry")
    m = match.astype(np.float64)

    v2t, grad_v_a, grad_t_c, gtau_a = _projection_direction(
        batch.image_features, batch.text_features, m, tau, eps
    )
    t2v, grad_t_a, grad_v_c, gtau_b = _projection_direction(
        batch.text_features, batch.image_features, m.T, tau, eps
    )
    return LossOutput(
        value=v2t + t2v,
        grad_image=grad_v_a + grad_v_c,
        grad_text=grad_t_c + grad_t_a,
        grad_temps={TAU_ICPM: gtau_a + gtau_b},
    )


def build_match_matrix(
    batch: Batch,
    labels_v: PseudoLabeling,
    labels_t: PseudoLabeling,
    pairs: PairGraph,
) -> np.ndarray:
    """Positive-pair matrix for projection matching, bridged through the pair graph.

    match[i, j] is true iff i == j, or text j shares a text-cluster with some
    caption paired to image i, or image i shares an image-cluster with some
    image paired to text j.
    """
    n = batch.size
    match = np.eye(n, dtype=bool)

    paired_text_clusters = []
    for img in batch.image_ids:
        clusters = {int(labels_t.labels[t]) for t in pairs.image_to_texts.get(int(img), [])}
        paired_text_clusters.append(clusters - {OUTLIER})
    paired_image_clusters = []
    for txt in batch.text_ids:
        clusters = {int(labels_v.labels[i]) for i in pairs.text_to_images.get(int(txt), [])}
        paired_image_clusters.append(clusters - {OUTLIER})

    text_cluster = labels_t.labels[batch.text_ids]
    image_cluster = labels_v.labels[batch.image_ids]
    for i in range(n):
        for j in range(n):
            if match[i, j]:
                continue
            if text_cluster[j] != OUTLIER and int(text_cluster[j]) in paired_text_clusters[i]:
                match[i, j] = True
            elif image_cluster[i] != OUTLIER and int(image_cluster[i]) in paired_image_clusters[j]:
                match[i, j] = True
    return match


def itc(batch: Batch, tau: float = 0.07) -> LossOutput:
    """Bidirectional in-batch InfoNCE with the diagonal as positives."""
    n = batch.size
    if n < 2:
        raise EmptyBatchError(f"InfoNCE needs at least 2 items for negatives, got {n}")
    scores = batch.image_features @ batch.text_features.T
    rows = np.arange(n)

    log_p_v2t = _log_softmax(scores / tau)
    log_p_t2v = _log_softmax(scores.T / tau)
    value = float(-log_p_v2t[rows, rows].mean() - log_p_t2v[rows, rows].mean())

    res_v2t = np.exp(log_p_v2t)
    res_v2t[rows, rows] -= 1.0
    res_t2v = np.exp(log_p_t2v)
    res_t2v[rows, rows] -= 1.0

    grad_image = (res_v2t @ batch.text_features + res_t2v.T @ batch.text_features) / (tau * n)
    grad_text = (res_v2t.T @ batch.image_features + res_t2v @ batch.image_features) / (tau * n)
    grad_tau = float(-((res_v2t * scores).sum() + (res_t2v * scores.T).sum()) / (tau * tau * n))
    return LossOutput(
        value=value,
        grad_image=grad_image,
        grad_text=grad_text,
        grad_temps={TAU_ITC: grad_tau},
    )


def overall_loss(
    batch: Batch,
    image_mem: PrototypeMemory,
    text_mem: PrototypeMemory,
    labels_v: PseudoLabeling,
    labels_t: PseudoLabeling,
    pairs: PairGraph,
    config: LossConfig,
) -> LossOutput:
    """Combined objective: prototype matching plus projection matching, by toggles."""
    grad_image, grad_text = _zeros_like_batch(batch)
    total = LossOutput(value=0.0, grad_image=grad_image, grad_text=grad_text, grad_temps={})
    if config.use_pcm:
        if config.pcm_variant == "cross":
            total = total.add(pcm_cross(batch, text_mem, image_mem))
        elif config.pcm_variant == "single":
            total = total.add(pcm_single(batch, image_mem, text_mem))
        else:
            raise ValueError(f"unknown pcm variant {config.pcm_variant!r}")
    if config.use_icpm:
        match = build_match_matrix(batch, labels_v, labels_t, pairs)
        total = total.add(icpm(batch, match, tau=config.icpm_temperature, eps=config.icpm_epsilon))
    return total
