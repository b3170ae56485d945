"""End-to-end epoch loop and run orchestration.

Each epoch: encode the whole corpus with the current heads, cluster per
modality, initialize prototype memories from the fresh labeling, mine outlier
labels through the pair graph, partition pairs into mined/supplementary, run
the combined loss over mined batches (Adam on head weights and, when
learnable, the two memory temperatures; memories momentum-updated after every
step), then the supplementary InfoNCE stage over the leftover pairs.

A full run is a pure function of (corpus bytes, config, seed): batch order and
all random draws derive from the seed and epoch index, so identical runs give
byte-identical reports and checkpoints, and checkpoints restore training
bit-exactly at epoch boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import affinity, clustering, mining
from .corpus import Corpus, EmbeddingSet, load_embeddings, save_embeddings
from .errors import DegenerateEpochError, ParameterError
from .evaluation import MetricsReport, evaluate
from .heads import ProjectionHead
from .losses import TAU_IMAGE, TAU_TEXT, Batch, LossConfig, itc, overall_loss
from .memory import TEMPERATURE_MAX, TEMPERATURE_MIN, init_memory, update_from_batch
from .optim import AdamState, adam_step, clip_gradients, lr_at


@dataclass
class TrainConfig:
    """All run knobs; defaults follow the reference training recipe."""

    # optimization
    batch_size: int = 128
    epochs: int = 60
    warmup_epochs: int = 5
    lr: float = 1e-5
    lr_floor: float = 1e-6
    clip_grad_norm: float = 5.0  # 0 disables clipping
    seed: int = 0
    # encoders
    out_dim: int = 0  # 0 -> keep the input dimension
    hidden_dim: int = 0  # 0 -> plain affine head
    # prototype memory
    memory_momentum: float = 0.9
    memory_init: str = "average"  # "average" | "random"
    memory_renormalize: bool = True
    temperature_init: float = 0.07
    temperature_learnable: bool = True
    # clustering
    cluster_backend: str = "dbscan"  # "dbscan" | "kmeans"
    affinity_kind: str = "jaccard"  # "jaccard" | "cosine"
    k_reciprocal: int = 20
    k_expansion: int = 6
    jaccard_expansion: bool = True
    jaccard_query_expansion: bool = True
    eps_image: float = 0.5
    min_pts_image: int = 2
    eps_text: float = 0.6
    min_pts_text: int = 4
    kmeans_k: int = 50
    kmeans_iters: int = 50
    # loss toggles
    use_pcm: bool = True
    pcm_variant: str = "cross"  # "cross" | "single"
    use_icpm: bool = True
    icpm_temperature: float = 0.07
    icpm_epsilon: float = 1e-8
    itc_temperature: float = 0.07
    # outlier mining
    oplm_refined: bool = True
    oplm_two_stage: bool = True
    oplm_neighbor_mode: str = "cluster"  # "cluster" | "knn"
    oplm_knn_k: int = 20
    oplm_deferred: bool = False
    oplm_image_first: bool = True
    # evaluation
    eval_every: int = 1  # 0 disables per-epoch metrics

    def loss_config(self) -> LossConfig:
        return LossConfig(
            use_pcm=self.use_pcm,
            pcm_variant=self.pcm_variant,
            use_icpm=self.use_icpm,
            icpm_temperature=self.icpm_temperature,
            icpm_epsilon=self.icpm_epsilon,
        )

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class EpochReport:
    epoch: int
    n_clusters_image: int
    n_clusters_text: int
    outliers_image_pre: int
    outliers_image_post: int
    outliers_text_pre: int
    outliers_text_post: int
    mined_pairs: int
    supplementary_pairs: int
    batches_mined: int
    batches_supplementary: int
    loss_mined_mean: float
    loss_supplementary_mean: float
    lr_last: float
    image_temperature: float
    text_temperature: float
    metrics: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    image_head: ProjectionHead
    text_head: ProjectionHead
    adam: AdamState
    image_temperature: np.ndarray  # 0-d float64, aliased into the parameter dict
    text_temperature: np.ndarray
    epoch: int = 0

    @classmethod
    def create(cls, corpus: Corpus, config: TrainConfig) -> "TrainState":
        in_dim = corpus.images.dim
        out_dim = config.out_dim or in_dim
        hidden = config.hidden_dim or None
        return cls(
            image_head=ProjectionHead.create(in_dim, out_dim, hidden, seed=_derive_seed(config.seed, 0, 1)),
            text_head=ProjectionHead.create(corpus.texts.dim, out_dim, hidden, seed=_derive_seed(config.seed, 0, 2)),
            adam=AdamState(),
            image_temperature=np.array(config.temperature_init, dtype=np.float64),
            text_temperature=np.array(config.temperature_init, dtype=np.float64),
        )

    def parameters(self, config: TrainConfig) -> dict[str, np.ndarray]:
        params = {f"image.{k}": v for k, v in self.image_head.params.items()}
        params.update({f"text.{k}": v for k, v in self.text_head.params.items()})
        if config.temperature_learnable:
            params[TAU_IMAGE] = self.image_temperature
            params[TAU_TEXT] = self.text_temperature
        return params


def _derive_seed(seed: int, epoch: int, salt: int) -> int:
    return int(np.random.default_rng([seed, epoch, salt]).integers(2**63))


def sample_batches(pair_list: list[tuple[int, int]], batch_size: int, seed: int) -> list[list[tuple[int, int]]]:
    """Shuffle pairs and chunk them; a trailing single-pair batch is dropped."""
    if batch_size < 2:
        raise ParameterError("batch_size must be >= 2")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pair_list))
    shuffled = [pair_list[int(i)] for i in order]
    chunks = [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if chunks and len(chunks[-1]) < 2:
        chunks.pop()
    return chunks


def _cluster_modality(features: np.ndarray, modality: str, config: TrainConfig, epoch: int) -> clustering.PseudoLabeling:
    if config.cluster_backend == "kmeans":
        k = min(config.kmeans_k, features.shape[0])
        return clustering.kmeans(
            features, k, max_iters=config.kmeans_iters,
            seed=_derive_seed(config.seed, epoch, 10 if modality == "image" else 11),
            modality=modality,
        )
    if config.cluster_backend != "dbscan":
        raise ParameterError(f"unknown cluster backend {config.cluster_backend!r}")
    base = affinity.cosine_distance_matrix(features)
    if config.affinity_kind == "jaccard":
        dist = affinity.jaccard_distance_matrix(
            base,
            k1=min(config.k_reciprocal, features.shape[0] - 1),
            k2=min(config.k_expansion, min(config.k_reciprocal, features.shape[0] - 1)),
            expansion=config.jaccard_expansion,
            query_expansion=config.jaccard_query_expansion,
        )
    elif config.affinity_kind == "cosine":
        dist = base
    else:
        raise ParameterError(f"unknown affinity kind {config.affinity_kind!r}")
    eps = config.eps_image if modality == "image" else config.eps_text
    min_pts = config.min_pts_image if modality == "image" else config.min_pts_text
    return clustering.dbscan(dist, eps=eps, min_pts=min_pts, modality=modality)


def _make_batch(corpus: Corpus, state: TrainState, chunk, labels_v, labels_t):
    image_ids = np.array([p[0] for p in chunk], dtype=np.int64)
    text_ids = np.array([p[1] for p in chunk], dtype=np.int64)
    image_out, image_cache = state.image_head.forward(corpus.images.vectors[image_ids])
    text_out, text_cache = state.text_head.forward(corpus.texts.vectors[text_ids])
    batch = Batch(
        image_features=image_out,
        text_features=text_out,
        image_ids=image_ids,
        text_ids=text_ids,
        image_pos_cluster=labels_v.labels[image_ids],
        text_pos_cluster=labels_t.labels[text_ids],
    )
    return batch, image_cache, text_cache


def _apply_step(state: TrainState, config: TrainConfig, loss, image_cache, text_cache, total_steps: int) -> float:
    grads = {f"image.{k}": v for k, v in state.image_head.backward(image_cache, loss.grad_image).items()}
    grads.update({f"text.{k}": v for k, v in state.text_head.backward(text_cache, loss.grad_text).items()})
    if config.temperature_learnable:
        grads[TAU_IMAGE] = np.array(loss.grad_temps.get(TAU_IMAGE, 0.0), dtype=np.float64)
        grads[TAU_TEXT] = np.array(loss.grad_temps.get(TAU_TEXT, 0.0), dtype=np.float64)
    if config.clip_grad_norm > 0:
        clip_gradients(grads, config.clip_grad_norm)
    lr = lr_at(
        state.adam.step,
        total_steps=total_steps,
        warmup_steps=_warmup_steps(config, total_steps),
        base_lr=config.lr,
        floor_lr=config.lr_floor,
    )
    adam_step(state.parameters(config), grads, state.adam, lr)
    np.clip(state.image_temperature, TEMPERATURE_MIN, TEMPERATURE_MAX, out=state.image_temperature)
    np.clip(state.text_temperature, TEMPERATURE_MIN, TEMPERATURE_MAX, out=state.text_temperature)
    return lr


def _warmup_steps(config: TrainConfig, total_steps: int) -> int:
    if config.epochs == 0:
        return 0
    return int(round(total_steps * config.warmup_epochs / config.epochs))


def nominal_total_steps(corpus: Corpus, config: TrainConfig) -> int:
    per_epoch = math.ceil(len(corpus.pairs.pairs()) / config.batch_size) + 1
    return config.epochs * per_epoch


def train_epoch(state: TrainState, corpus: Corpus, config: TrainConfig, total_steps: int | None = None) -> EpochReport:
    """One full pass: cluster, build memories, mine, train mined then supplementary batches."""
    if total_steps is None:
        total_steps = nominal_total_steps(corpus, config)
    epoch = state.epoch

    encoded_images = state.image_head.encode(corpus.images.vectors)
    encoded_texts = state.text_head.encode(corpus.texts.vectors)
    labels_v = _cluster_modality(encoded_images, "image", config, epoch)
    labels_t = _cluster_modality(encoded_texts, "text", config, epoch)
    outliers_image_pre = labels_v.outlier_count()
    outliers_text_pre = labels_t.outlier_count()

    if config.oplm_refined:
        mining.run_refined_stage(
            encoded_images,
            encoded_texts,
            corpus.pairs,
            labels_v,
            labels_t,
            neighbor_mode=config.oplm_neighbor_mode,
            knn_k=config.oplm_knn_k,
            deferred=config.oplm_deferred,
            image_first=config.oplm_image_first,
        )

    mined, supplementary = mining.partition_two_stage(corpus.pairs, labels_v, labels_t)

    image_mem = text_mem = None
    if mined:
        image_mem = init_memory(
            encoded_images, labels_v, policy=config.memory_init,
            seed=_derive_seed(config.seed, epoch, 20), momentum=config.memory_momentum,
            temperature=float(state.image_temperature), renormalize=config.memory_renormalize,
        )
        text_mem = init_memory(
            encoded_texts, labels_t, policy=config.memory_init,
            seed=_derive_seed(config.seed, epoch, 21), momentum=config.memory_momentum,
            temperature=float(state.text_temperature), renormalize=config.memory_renormalize,
        )

    loss_cfg = config.loss_config()
    mined_chunks = sample_batches(mined, config.batch_size, _derive_seed(config.seed, epoch, 30)) if mined else []
    mined_losses = []
    lr_last = 0.0
    for chunk in mined_chunks:
        batch, image_cache, text_cache = _make_batch(corpus, state, chunk, labels_v, labels_t)
        image_mem.temperature = float(state.image_temperature)
        text_mem.temperature = float(state.text_temperature)
        loss = overall_loss(batch, image_mem, text_mem, labels_v, labels_t, corpus.pairs, loss_cfg)
        lr_last = _apply_step(state, config, loss, image_cache, text_cache, total_steps)
        update_from_batch(image_mem, batch.image_features, batch.image_pos_cluster)
        update_from_batch(text_mem, batch.text_features, batch.text_pos_cluster)
        mined_losses.append(loss.value)

    supp_chunks = []
    supp_losses = []
    if config.oplm_two_stage and supplementary:
        supp_chunks = sample_batches(supplementary, config.batch_size, _derive_seed(config.seed, epoch, 31))
        for chunk in supp_chunks:
            batch, image_cache, text_cache = _make_batch(corpus, state, chunk, labels_v, labels_t)
            loss = itc(batch, tau=config.itc_temperature)
            lr_last = _apply_step(state, config, loss, image_cache, text_cache, total_steps)
            supp_losses.append(loss.value)

    if not mined_chunks and not supp_chunks:
        raise DegenerateEpochError(f"epoch {epoch}: no usable batches in either stage")

    metrics = None
    if config.eval_every and corpus.ground_truth is not None and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
        metrics = evaluate(corpus, state.image_head, state.text_head).to_json_dict()

    state.epoch = epoch + 1
    return EpochReport(
        epoch=epoch,
        n_clusters_image=labels_v.n_clusters,
        n_clusters_text=labels_t.n_clusters,
        outliers_image_pre=outliers_image_pre,
        outliers_image_post=labels_v.outlier_count(),
        outliers_text_pre=outliers_text_pre,
        outliers_text_post=labels_t.outlier_count(),
        mined_pairs=len(mined),
        supplementary_pairs=len(supplementary),
        batches_mined=len(mined_chunks),
        batches_supplementary=len(supp_chunks),
        loss_mined_mean=float(np.mean(mined_losses)) if mined_losses else 0.0,
        loss_supplementary_mean=float(np.mean(supp_losses)) if supp_losses else 0.0,
        lr_last=lr_last,
        image_temperature=float(state.image_temperature),
        text_temperature=float(state.text_temperature),
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, config: TrainConfig, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "beta1": state.adam.beta1,
        "beta2": state.adam.beta2,
        "adam_eps": state.adam.eps,
        "image_temperature": float(state.image_temperature),
        "text_temperature": float(state.text_temperature),
        "image_hidden": state.image_head.hidden,
        "text_hidden": state.text_head.hidden,
        "config": config.to_json_dict(),
    }
    (directory / "state.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    for prefix, head in (("image", state.image_head), ("text", state.text_head)):
        for name, value in head.params.items():
            matrix = value if value.ndim == 2 else value[None, :]
            save_embeddings(EmbeddingSet(matrix, modality=prefix), directory / f"head_{prefix}.{name}.bin")
    adam_dir = directory / "adam"
    adam_dir.mkdir(exist_ok=True)
    for kind, store in (("m", state.adam.m), ("v", state.adam.v)):
        for name, value in store.items():
            np.save(adam_dir / f"{kind}_{name}.npy", value)


def load_checkpoint(directory) -> tuple[TrainState, TrainConfig]:
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text(encoding="utf-8"))
    config = TrainConfig.from_json_dict(meta["config"])

    heads = {}
    for prefix in ("image", "text"):
        params: dict[str, np.ndarray] = {}
        for path in sorted(directory.glob(f"head_{prefix}.*.bin")):
            name = path.name[len(f"head_{prefix}.") : -len(".bin")]
            matrix = load_embeddings(path).vectors.copy()
            matrix.setflags(write=True)
            params[name] = matrix[0] if name.startswith("b") else matrix
        heads[prefix] = ProjectionHead(params, hidden=meta[f"{prefix}_hidden"])

    adam = AdamState(beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["adam_eps"], step=meta["adam_step"])
    for path in sorted((directory / "adam").glob("*.npy")):
        kind, name = path.stem.split("_", 1)
        getattr(adam, kind)[name] = np.load(path)

    state = TrainState(
        image_head=heads["image"],
        text_head=heads["text"],
        adam=adam,
        image_temperature=np.array(meta["image_temperature"], dtype=np.float64),
        text_temperature=np.array(meta["text_temperature"], dtype=np.float64),
        epoch=meta["epoch"],
    )
    return state, config


def run_training(
    corpus: Corpus,
    config: TrainConfig,
    out_dir=None,
    resume=None,
    log=None,
) -> list[EpochReport]:
    """Run all epochs; optionally write report.jsonl and per-epoch checkpoints under out_dir."""
    if resume is not None:
        state, config = load_checkpoint(resume)
    else:
        state = TrainState.create(corpus, config)
    total_steps = nominal_total_steps(corpus, config)

    out_path = Path(out_dir) if out_dir is not None else None
    report_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        report_file = open(out_path / "report.jsonl", mode, encoding="utf-8")

    reports = []
    try:
        for _ in range(state.epoch, config.epochs):
            report = train_epoch(state, corpus, config, total_steps)
            reports.append(report)
            line = report.to_json()
            if report_file is not None:
                report_file.write(line + "\n")
                report_file.flush()
            if log is not None:
                log(line)
            if out_path is not None:
                save_checkpoint(state, config, out_path / "checkpoints" / f"epoch_{report.epoch:04d}")
    finally:
        if report_file is not None:
            report_file.close()
    return reports
