"""Command-line entry points: synth, cluster, mine, train, eval, loss-probe."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import affinity, clustering, corpus as corpus_io, mining
from .corpus import EmbeddingSet, SynthSpec, load_corpus, normalize, save_corpus, save_embeddings, synth_corpus
from .evaluation import evaluate
from .heads import ProjectionHead
from .losses import Batch, LossConfig, icpm, itc, pcm_cross, pcm_single
from .memory import PrototypeMemory, init_memory
from .training import TrainConfig, load_checkpoint, run_training


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="base RNG seed")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--out-dir", type=Path, default=None, help="output directory")


def _load_config(args) -> TrainConfig:
    if args.config is not None:
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = TrainConfig.from_json_dict(payload)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        n_identities=args.n_identities,
        images_per_id=args.images_per_id,
        texts_per_image=args.texts_per_image,
        dim=args.dim,
        intra_id_noise=args.noise,
        modality_offset_scale=args.offset,
        outlier_fraction=args.outlier_fraction,
        seed=args.seed,
    )
    built = synth_corpus(spec)
    out = args.out_dir or Path("corpus")
    save_corpus(built, out)
    _emit({
        "out_dir": str(out),
        "images": built.images.count,
        "texts": built.texts.count,
        "dim": built.images.dim,
        "pairs": len(built.pairs.pairs()),
    })
    return 0


def _cluster_corpus(data, config: TrainConfig):
    """Cluster normalized raw embeddings per modality; returns labelings and distances."""
    out = {}
    for modality, embedding_set in (("image", data.images), ("text", data.texts)):
        features = normalize(embedding_set).vectors.astype(np.float64)
        base = affinity.cosine_distance_matrix(features)
        if config.affinity_kind == "jaccard":
            k1 = min(config.k_reciprocal, features.shape[0] - 1)
            dist = affinity.jaccard_distance_matrix(
                base, k1=k1, k2=min(config.k_expansion, k1),
                expansion=config.jaccard_expansion,
                query_expansion=config.jaccard_query_expansion,
            )
        else:
            dist = base
        eps = config.eps_image if modality == "image" else config.eps_text
        min_pts = config.min_pts_image if modality == "image" else config.min_pts_text
        if config.cluster_backend == "kmeans":
            labeling = clustering.kmeans(features, min(config.kmeans_k, features.shape[0]),
                                         max_iters=config.kmeans_iters, seed=config.seed, modality=modality)
        else:
            labeling = clustering.dbscan(dist, eps=eps, min_pts=min_pts, modality=modality)
        out[modality] = (labeling, dist, features)
    return out


def _labeling_summary(labeling) -> dict:
    sizes = [int((labeling.labels == c).sum()) for c in range(labeling.n_clusters)]
    histogram: dict[str, int] = {}
    for s in sizes:
        histogram[str(s)] = histogram.get(str(s), 0) + 1
    return {
        "n_clusters": labeling.n_clusters,
        "outliers": labeling.outlier_count(),
        "cluster_size_histogram": dict(sorted(histogram.items(), key=lambda kv: int(kv[0]))),
    }


def _cmd_cluster(args) -> int:
    config = _load_config(args)
    data = load_corpus(args.corpus_dir)
    results = _cluster_corpus(data, config)
    report = {}
    for modality, (labeling, dist, features) in results.items():
        report[modality] = _labeling_summary(labeling)
        if args.dump_distances:
            args.dump_distances.mkdir(parents=True, exist_ok=True)
            np.savetxt(args.dump_distances / f"{modality}_distances.tsv", dist.values, delimiter="\t")
        if args.dump_prototypes and labeling.n_clusters:
            args.dump_prototypes.mkdir(parents=True, exist_ok=True)
            mem = init_memory(features, labeling, seed=config.seed)
            save_embeddings(
                EmbeddingSet(mem.prototypes.astype(np.float32), modality=modality),
                args.dump_prototypes / f"{modality}_prototypes.bin",
            )
    _emit(report)
    return 0


def _cmd_mine(args) -> int:
    if args.series_tsv is not None:
        return _mining_series(args)
    config = _load_config(args)
    data = load_corpus(args.corpus_dir)
    results = _cluster_corpus(data, config)
    labels_v, _, image_features = results["image"]
    labels_t, _, text_features = results["text"]
    before = {"image": labels_v.outlier_count(), "text": labels_t.outlier_count()}
    report = mining.run_refined_stage(
        image_features, text_features, data.pairs, labels_v, labels_t,
        neighbor_mode=config.oplm_neighbor_mode, knn_k=config.oplm_knn_k,
        deferred=config.oplm_deferred, image_first=config.oplm_image_first,
    )
    payload = report.to_json_dict()
    payload["outliers_before"] = before
    _emit(payload)
    return 0


def _mining_series(args) -> int:
    """Convert a training report.jsonl into a per-epoch outlier-count TSV."""
    lines = Path(args.series_tsv).read_text(encoding="utf-8").splitlines()
    rows = ["epoch\toutliers_image_pre\toutliers_image_post\toutliers_text_pre\toutliers_text_post"]
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        rows.append(
            f"{rec['epoch']}\t{rec['outliers_image_pre']}\t{rec['outliers_image_post']}"
            f"\t{rec['outliers_text_pre']}\t{rec['outliers_text_post']}"
        )
    text = "\n".join(rows) + "\n"
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "outliers.tsv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    data = load_corpus(args.corpus_dir)
    run_training(data, config, out_dir=args.out_dir, resume=args.resume, log=print)
    return 0


def _cmd_eval(args) -> int:
    data = load_corpus(args.corpus_dir)
    if args.checkpoint is not None:
        state, _ = load_checkpoint(args.checkpoint)
        image_head, text_head = state.image_head, state.text_head
    else:
        image_head = ProjectionHead.identity(data.images.dim)
        text_head = ProjectionHead.identity(data.texts.dim)
    report = evaluate(data, image_head, text_head, direction=args.direction)
    _emit(report.to_json_dict())
    return 0


def _cmd_loss_probe(args) -> int:
    blob = np.load(args.batch_file)
    batch = Batch(
        image_features=blob["image_features"],
        text_features=blob["text_features"],
        image_ids=blob["image_ids"],
        text_ids=blob["text_ids"],
        image_pos_cluster=blob["image_pos_cluster"],
        text_pos_cluster=blob["text_pos_cluster"],
    )

    def memory(prefix: str) -> PrototypeMemory:
        return PrototypeMemory(
            prototypes=np.asarray(blob[f"{prefix}_prototypes"], dtype=np.float64),
            momentum=0.9,
            temperature=float(blob[f"{prefix}_temperature"]),
            modality=prefix,
        )

    name = args.loss
    if name == "pcm-cross":
        out = pcm_cross(batch, memory("text"), memory("image"))
    elif name == "pcm-single":
        out = pcm_single(batch, memory("image"), memory("text"))
    elif name == "icpm":
        out = icpm(batch, blob["match"], tau=float(blob.get("icpm_temperature", 0.07)))
    elif name == "itc":
        out = itc(batch, tau=float(blob.get("itc_temperature", 0.07)))
    else:  # overall = pcm variant plus projection matching on the stored match
        cfg = LossConfig()
        out = pcm_cross(batch, memory("text"), memory("image")) if cfg.pcm_variant == "cross" else pcm_single(batch, memory("image"), memory("text"))
        out = out.add(icpm(batch, blob["match"], tau=cfg.icpm_temperature, eps=cfg.icpm_epsilon))
    _emit({
        "loss": name,
        "value": out.value,
        "grad_image_norm": float(np.linalg.norm(out.grad_image)),
        "grad_text_norm": float(np.linalg.norm(out.grad_text)),
        "grad_temps": {k: float(v) for k, v in out.grad_temps.items()},
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomatch",
        description="Weakly supervised cross-modal alignment over embedding corpora",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-identity synthetic corpus")
    _common_flags(p)
    p.add_argument("--n-identities", type=int, default=50)
    p.add_argument("--images-per-id", type=int, default=4)
    p.add_argument("--texts-per-image", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--offset", type=float, default=0.1)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cluster", help="pseudo-label a corpus and print a labeling report")
    _common_flags(p)
    p.add_argument("--corpus-dir", type=Path, required=True)
    p.add_argument("--dump-distances", type=Path, default=None, help="write distance matrices as TSV")
    p.add_argument("--dump-prototypes", type=Path, default=None, help="write average-init prototypes")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("mine", help="run refined-stage outlier mining and print the report")
    _common_flags(p)
    p.add_argument("--corpus-dir", type=Path, default=None)
    p.add_argument("--series-tsv", type=Path, default=None,
                   help="convert a training report.jsonl into an outlier-count TSV instead")
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("train", help="run the full training loop")
    _common_flags(p)
    p.add_argument("--corpus-dir", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a corpus, optionally through a checkpoint")
    _common_flags(p)
    p.add_argument("--corpus-dir", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--direction", choices=["text_to_image", "image_to_text"], default="text_to_image")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("loss-probe", help="evaluate a loss on a saved batch file (.npz)")
    _common_flags(p)
    p.add_argument("--batch-file", type=Path, required=True)
    p.add_argument("--loss", choices=["pcm-cross", "pcm-single", "icpm", "itc", "overall"], required=True)
    p.set_defaults(func=_cmd_loss_probe)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "mine" and args.corpus_dir is None and args.series_tsv is None:
        build_parser().error("mine requires --corpus-dir or --series-tsv")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
