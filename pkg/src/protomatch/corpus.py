"""Bimodal embedding corpora: binary I/O, pairing graphs, synthetic generation.

Embedding file layout (little-endian):
    magic "CPCL" | u32 version=1 | u32 count | u32 dim | count*dim float32, row-major

Pair file: JSON {"image_to_texts": {"<image-id>": [text-ids...]}}; the inverse
map is derived on load. Ground-truth file: JSON {"images": {id: identity},
"texts": {id: identity}}; it is only ever read by the evaluation module.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateVectorError,
    EmptyCorpusError,
    FormatError,
    ParameterError,
    ReferentialIntegrityError,
)

MAGIC = b"CPCL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

IMAGE = "image"
TEXT = "text"


@dataclass
class EmbeddingSet:
    """Dense float32 feature matrix for one modality; the row index is the instance id."""

    vectors: np.ndarray
    modality: str = IMAGE

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float32, order="C")  # own copy, frozen below
        if v.ndim != 2:
            raise ParameterError(f"embedding matrix must be 2-D, got shape {v.shape}")
        v.setflags(write=False)
        self.vectors = v

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class PairGraph:
    """Many-to-many image/text pairing; the two maps are kept mutually inverse."""

    image_to_texts: dict[int, list[int]]
    text_to_images: dict[int, list[int]]

    @classmethod
    def from_image_map(cls, image_to_texts: dict[int, list[int]]) -> "PairGraph":
        inverse: dict[int, list[int]] = {}
        for img in sorted(image_to_texts):
            for txt in image_to_texts[img]:
                inverse.setdefault(txt, []).append(img)
        return cls(image_to_texts=dict(sorted(image_to_texts.items())), text_to_images=inverse)

    def pairs(self) -> list[tuple[int, int]]:
        """All (image-id, text-id) pairs, image-major order."""
        return [(i, t) for i in sorted(self.image_to_texts) for t in self.image_to_texts[i]]

    def validate(self, n_images: int, n_texts: int) -> None:
        """Exhaustive scan: id ranges, complete pairing, mutual inverse."""
        for img, txts in self.image_to_texts.items():
            if not 0 <= img < n_images:
                raise ReferentialIntegrityError(f"pair file references unknown image id {img}")
            if not txts:
                raise ReferentialIntegrityError(f"image {img} has an empty pair list")
            for t in txts:
                if not 0 <= t < n_texts:
                    raise ReferentialIntegrityError(f"pair file references unknown text id {t}")
                if img not in self.text_to_images.get(t, []):
                    raise ReferentialIntegrityError(f"maps not mutually inverse at pair ({img},{t})")
        for txt, imgs in self.text_to_images.items():
            if not imgs:
                raise ReferentialIntegrityError(f"text {txt} has an empty pair list")
            for i in imgs:
                if txt not in self.image_to_texts.get(i, []):
                    raise ReferentialIntegrityError(f"maps not mutually inverse at pair ({i},{txt})")
        if set(self.image_to_texts) != set(range(n_images)):
            missing = sorted(set(range(n_images)) - set(self.image_to_texts))[:5]
            raise ReferentialIntegrityError(f"images without any pair, e.g. {missing}")
        if set(self.text_to_images) != set(range(n_texts)):
            missing = sorted(set(range(n_texts)) - set(self.text_to_images))[:5]
            raise ReferentialIntegrityError(f"texts without any pair, e.g. {missing}")


@dataclass
class GroundTruth:
    """Planted identity per instance. Read only by the evaluation module."""

    image_identity: np.ndarray
    text_identity: np.ndarray


@dataclass
class Corpus:
    images: EmbeddingSet
    texts: EmbeddingSet
    pairs: PairGraph
    ground_truth: GroundTruth | None = None


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for the synthetic two-modality corpus generator."""

    n_identities: int
    images_per_id: int
    texts_per_image: int
    dim: int
    intra_id_noise: float = 0.05
    modality_offset_scale: float = 0.1
    outlier_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_identities", "images_per_id", "texts_per_image", "dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.intra_id_noise < 0 or self.modality_offset_scale < 0:
            raise ParameterError("noise scales must be >= 0")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ParameterError("outlier_fraction must be in [0, 1)")


# ---------------------------------------------------------------------------
# binary embedding I/O


def save_embeddings(embedding_set: EmbeddingSet, path) -> None:
    path = Path(path)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, embedding_set.count, embedding_set.dim)
    payload = np.ascontiguousarray(embedding_set.vectors, dtype="<f4").tobytes()
    try:
        path.write_bytes(header + payload)
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc


def load_embeddings(path, modality: str = IMAGE) -> EmbeddingSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read embeddings from {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(raw)} bytes)")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if count == 0 or dim == 0:
        raise EmptyCorpusError(f"{path}: empty corpus (count={count}, dim={dim})")
    expected = _HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size {len(raw) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    vectors = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    return EmbeddingSet(vectors=vectors.copy(), modality=modality)


def normalize(embedding_set: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm. Mandatory step before any similarity math."""
    norms = np.linalg.norm(embedding_set.vectors, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if zero.size:
        raise DegenerateVectorError(
            f"{embedding_set.modality} instance {int(zero[0])} has zero norm and cannot be normalized"
        )
    return EmbeddingSet(
        vectors=embedding_set.vectors / norms[:, None],
        modality=embedding_set.modality,
    )


# ---------------------------------------------------------------------------
# pair / ground-truth I/O


def save_pairs(pairs: PairGraph, path) -> None:
    payload = {"image_to_texts": {str(i): list(t) for i, t in sorted(pairs.image_to_texts.items())}}
    Path(path).write_text(json.dumps(payload, indent=0, sort_keys=True) + "\n", encoding="utf-8")


def load_pairs(path, n_images: int, n_texts: int) -> PairGraph:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse pair file: {exc}") from exc
    if "image_to_texts" not in payload:
        raise FormatError(f"{path}: missing 'image_to_texts' key")
    try:
        mapping = {int(k): [int(t) for t in v] for k, v in payload["image_to_texts"].items()}
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed pair entries: {exc}") from exc
    graph = PairGraph.from_image_map(mapping)
    graph.validate(n_images, n_texts)
    return graph


def save_ground_truth(truth: GroundTruth, path) -> None:
    payload = {
        "images": {str(i): int(v) for i, v in enumerate(truth.image_identity)},
        "texts": {str(i): int(v) for i, v in enumerate(truth.text_identity)},
    }
    Path(path).write_text(json.dumps(payload, indent=0, sort_keys=True) + "\n", encoding="utf-8")


def load_ground_truth(path, n_images: int, n_texts: int) -> GroundTruth:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse ground-truth file: {exc}") from exc
    image_identity = np.full(n_images, -1, dtype=np.int64)
    text_identity = np.full(n_texts, -1, dtype=np.int64)
    try:
        for k, v in payload["images"].items():
            image_identity[int(k)] = int(v)
        for k, v in payload["texts"].items():
            text_identity[int(k)] = int(v)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed ground-truth entries: {exc}") from exc
    if (image_identity < 0).any() or (text_identity < 0).any():
        raise FormatError(f"{path}: ground truth does not cover every instance")
    return GroundTruth(image_identity=image_identity, text_identity=text_identity)


def save_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_embeddings(corpus.images, directory / "images.bin")
    save_embeddings(corpus.texts, directory / "texts.bin")
    save_pairs(corpus.pairs, directory / "pairs.json")
    if corpus.ground_truth is not None:
        save_ground_truth(corpus.ground_truth, directory / "ground_truth.json")


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    images = load_embeddings(directory / "images.bin", modality=IMAGE)
    texts = load_embeddings(directory / "texts.bin", modality=TEXT)
    pairs = load_pairs(directory / "pairs.json", images.count, texts.count)
    truth = None
    gt_path = directory / "ground_truth.json"
    if gt_path.exists():
        truth = load_ground_truth(gt_path, images.count, texts.count)
    return Corpus(images=images, texts=texts, pairs=pairs, ground_truth=truth)


# ---------------------------------------------------------------------------
# synthetic corpora


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Generate a planted-identity bimodal corpus; pure function of the spec (incl. seed).

    Per identity: a unit-sphere center. Each image draws center + image-modality
    offset + Gaussian noise, each text the same with the text offset; all rows
    are renormalized. A fraction of identities get 3x noise so that natural
    outlier material exists. Every image is wired to texts_per_image texts.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_id, ipi, tpi, dim = spec.n_identities, spec.images_per_id, spec.texts_per_image, spec.dim

    centers = rng.normal(size=(n_id, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    image_offset = _unit(rng.normal(size=dim)) * spec.modality_offset_scale
    text_offset = _unit(rng.normal(size=dim)) * spec.modality_offset_scale

    n_noisy = int(round(spec.outlier_fraction * n_id))
    noisy = set(rng.choice(n_id, size=n_noisy, replace=False).tolist()) if n_noisy else set()

    image_rows, text_rows = [], []
    image_identity, text_identity = [], []
    image_to_texts: dict[int, list[int]] = {}
    for ident in range(n_id):
        sigma = 3.0 * spec.intra_id_noise if ident in noisy else spec.intra_id_noise
        for _ in range(ipi):
            img_id = len(image_rows)
            image_rows.append(_unit(centers[ident] + image_offset + rng.normal(scale=sigma, size=dim)))
            image_identity.append(ident)
            txt_ids = []
            for _ in range(tpi):
                txt_ids.append(len(text_rows))
                text_rows.append(_unit(centers[ident] + text_offset + rng.normal(scale=sigma, size=dim)))
                text_identity.append(ident)
            image_to_texts[img_id] = txt_ids

    images = EmbeddingSet(np.asarray(image_rows, dtype=np.float32), modality=IMAGE)
    texts = EmbeddingSet(np.asarray(text_rows, dtype=np.float32), modality=TEXT)
    pairs = PairGraph.from_image_map(image_to_texts)
    pairs.validate(images.count, texts.count)
    truth = GroundTruth(
        image_identity=np.asarray(image_identity, dtype=np.int64),
        text_identity=np.asarray(text_identity, dtype=np.int64),
    )
    return Corpus(images=images, texts=texts, pairs=pairs, ground_truth=truth)
