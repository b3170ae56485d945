"""Weakly supervised cross-modal alignment over embedding corpora.

The pipeline: pseudo-label each modality by clustering (DBSCAN over a
k-reciprocal Jaccard distance, or k-means), keep a momentum-updated prototype
memory per modality, train small projection heads with a hybrid contrastive
objective (prototype matching plus instance projection matching), recover
outlier pseudo labels through the image-text pair graph, and give the leftover
pairs a supplementary InfoNCE stage. Evaluation reports Rank-k, mAP and mINP.
"""

from .affinity import COSINE, JACCARD, DistanceMatrix, cosine_distance_matrix, jaccard_distance_matrix, k_reciprocal_neighbors
from .clustering import OUTLIER, PseudoLabeling, dbscan, kmeans, kmeans_objective, relabel_dense
from .corpus import (
    Corpus,
    EmbeddingSet,
    GroundTruth,
    PairGraph,
    SynthSpec,
    load_corpus,
    load_embeddings,
    load_pairs,
    normalize,
    save_corpus,
    save_embeddings,
    save_pairs,
    synth_corpus,
)
from .evaluation import (
    MetricsReport,
    RankingResult,
    evaluate,
    mean_average_precision,
    mean_inverse_negative_penalty,
    rank_gallery,
    recall_at_k,
)
from .heads import ProjectionHead
from .losses import Batch, LossConfig, LossOutput, build_match_matrix, icpm, itc, overall_loss, pcm_cross, pcm_single
from .memory import AVERAGE, RANDOM, PrototypeMemory, init_memory, lookup_positive, momentum_update, update_from_batch
from .mining import MiningReport, mine_outliers_t2v, mine_outliers_v2t, partition_two_stage, run_refined_stage
from .optim import AdamState, adam_step, clip_gradients, lr_at
from .training import EpochReport, TrainConfig, TrainState, load_checkpoint, run_training, sample_batches, save_checkpoint, train_epoch

__version__ = "0.1.0"
