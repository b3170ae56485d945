import json

import numpy as np
import pytest

from protomatch.corpus import SynthSpec, synth_corpus
from protomatch.errors import DegenerateEpochError, ParameterError
from protomatch.evaluation import evaluate
from protomatch.training import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    nominal_total_steps,
    run_training,
    sample_batches,
    save_checkpoint,
    train_epoch,
)


def small_corpus(seed=0):
    return synth_corpus(SynthSpec(
        n_identities=6, images_per_id=3, texts_per_image=2, dim=16,
        intra_id_noise=0.06, modality_offset_scale=0.2, outlier_fraction=0.2, seed=seed,
    ))


def small_config(**overrides):
    base = dict(batch_size=8, epochs=3, warmup_epochs=1, lr=2e-3, seed=5,
                k_reciprocal=6, k_expansion=3, eval_every=1)
    base.update(overrides)
    return TrainConfig(**base)


class TestSampleBatches:
    def test_exact_split_covers_all_pairs(self):
        pairs = [(i, i) for i in range(256)]
        chunks = sample_batches(pairs, 128, seed=3)
        assert [len(c) for c in chunks] == [128, 128]
        flat = [p for c in chunks for p in c]
        assert sorted(flat) == pairs

    def test_same_seed_same_sequence(self):
        pairs = [(i, 2 * i) for i in range(50)]
        assert sample_batches(pairs, 16, seed=9) == sample_batches(pairs, 16, seed=9)

    def test_single_pair_remainder_dropped(self):
        pairs = [(i, i) for i in range(129)]
        chunks = sample_batches(pairs, 128, seed=1)
        assert [len(c) for c in chunks] == [128]

    def test_small_remainder_kept(self):
        pairs = [(i, i) for i in range(130)]
        chunks = sample_batches(pairs, 128, seed=1)
        assert [len(c) for c in chunks] == [128, 2]

    def test_batch_size_must_allow_negatives(self):
        with pytest.raises(ParameterError):
            sample_batches([(0, 0)], 1, seed=0)


class TestTrainEpochMechanics:
    def test_all_loss_toggles_off_leaves_parameters_bitwise(self):
        corpus = small_corpus()
        config = small_config(use_pcm=False, use_icpm=False, oplm_two_stage=False, eval_every=0)
        state = TrainState.create(corpus, config)
        before = {k: v.copy() for k, v in state.parameters(config).items()}
        train_epoch(state, corpus, config)
        after = state.parameters(config)
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])

    def test_degenerate_epoch_raises(self):
        corpus = small_corpus()
        # eps so small that every instance is an outlier; no supplementary stage
        config = small_config(eps_image=1e-9, eps_text=1e-9, oplm_two_stage=False, eval_every=0)
        state = TrainState.create(corpus, config)
        with pytest.raises(DegenerateEpochError):
            train_epoch(state, corpus, config)

    def test_outlier_counts_never_increase_within_epoch(self):
        corpus = small_corpus(seed=3)
        config = small_config(eval_every=0)
        state = TrainState.create(corpus, config)
        report = train_epoch(state, corpus, config)
        assert report.outliers_image_post <= report.outliers_image_pre
        assert report.outliers_text_post <= report.outliers_text_pre

    def test_kmeans_backend_runs(self):
        corpus = small_corpus(seed=4)
        config = small_config(cluster_backend="kmeans", kmeans_k=6, oplm_refined=False, eval_every=0)
        state = TrainState.create(corpus, config)
        report = train_epoch(state, corpus, config)
        assert report.outliers_image_pre == 0  # k-means never emits outliers
        assert report.n_clusters_image == 6

    def test_cosine_affinity_mode_runs(self):
        corpus = small_corpus(seed=5)
        config = small_config(affinity_kind="cosine", eps_image=0.2, eps_text=0.2, eval_every=0)
        state = TrainState.create(corpus, config)
        train_epoch(state, corpus, config)  # must not raise


class TestDeterminism:
    def test_identical_runs_identical_reports(self):
        corpus = small_corpus(seed=1)
        config = small_config()
        a = run_training(corpus, config)
        b = run_training(corpus, config)
        assert [r.to_json() for r in a] == [r.to_json() for r in b]

    def test_different_seeds_differ(self):
        corpus = small_corpus(seed=1)
        a = run_training(corpus, small_config(seed=5, eval_every=0))
        b = run_training(corpus, small_config(seed=6, eval_every=0))
        assert [r.to_json() for r in a] != [r.to_json() for r in b]


class TestCheckpointing:
    def test_round_trip_bit_exact(self, tmp_path):
        corpus = small_corpus(seed=2)
        config = small_config(epochs=2, eval_every=0)
        state = TrainState.create(corpus, config)
        train_epoch(state, corpus, config)
        save_checkpoint(state, config, tmp_path / "ck")
        restored, restored_config = load_checkpoint(tmp_path / "ck")
        assert restored.epoch == state.epoch
        assert restored.adam.step == state.adam.step
        assert restored_config == config
        for name, value in state.parameters(config).items():
            np.testing.assert_array_equal(value, restored.parameters(restored_config)[name])
        for name, value in state.adam.m.items():
            np.testing.assert_array_equal(value, restored.adam.m[name])

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        corpus = small_corpus(seed=6)
        config = small_config(epochs=4, eval_every=0)

        full = run_training(corpus, config, out_dir=tmp_path / "full")

        config_half = small_config(epochs=4, eval_every=0)
        half_state = TrainState.create(corpus, config_half)
        total = nominal_total_steps(corpus, config_half)
        train_epoch(half_state, corpus, config_half, total)
        train_epoch(half_state, corpus, config_half, total)
        save_checkpoint(half_state, config_half, tmp_path / "half")

        resumed = run_training(corpus, config_half, resume=tmp_path / "half")
        assert [r.to_json() for r in resumed] == [r.to_json() for r in full[2:]]

    def test_checkpoint_files_use_embedding_format(self, tmp_path):
        corpus = small_corpus(seed=7)
        config = small_config(epochs=1, eval_every=0)
        run_training(corpus, config, out_dir=tmp_path)
        ck = tmp_path / "checkpoints" / "epoch_0000"
        weights = ck / "head_image.w0.bin"
        assert weights.read_bytes()[:4] == b"CPCL"
        assert (ck / "state.json").exists()


class TestEndToEndLearning:
    def test_training_improves_retrieval_and_loss(self):
        corpus = synth_corpus(SynthSpec(
            n_identities=10, images_per_id=4, texts_per_image=2, dim=32,
            intra_id_noise=0.05, modality_offset_scale=0.25, outlier_fraction=0.1, seed=11,
        ))
        config = TrainConfig(batch_size=16, epochs=6, warmup_epochs=1, lr=3e-3, seed=2,
                             k_reciprocal=8, k_expansion=3, eval_every=0)
        state = TrainState.create(corpus, config)
        baseline = evaluate(corpus, state.image_head, state.text_head).r1
        reports = []
        total = nominal_total_steps(corpus, config)
        for _ in range(config.epochs):
            reports.append(train_epoch(state, corpus, config, total))
        final = evaluate(corpus, state.image_head, state.text_head).r1
        assert final > baseline
        assert final >= 0.8
        assert reports[-1].loss_mined_mean < reports[0].loss_mined_mean

    def test_report_json_round_trips(self):
        corpus = small_corpus(seed=8)
        config = small_config(epochs=1)
        reports = run_training(corpus, config)
        payload = json.loads(reports[0].to_json())
        assert payload["epoch"] == 0
        assert "r1" in payload["metrics"]
