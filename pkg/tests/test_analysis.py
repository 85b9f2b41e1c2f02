import numpy as np
import pytest

from ladiff.analysis import (
    REFERENCE_WALK_AVG_VEL,
    AttentionMap,
    SubspaceUsage,
    attention_map,
    chunking_score,
    export_attention_map,
    export_subspace_usage,
    latent_occupancy,
    length_sweep,
    sample_latent,
    subspace_ablation,
)
from ladiff.corpus import CorpusConfig, fit_normalizer, generate_corpus
from ladiff.diffusion import Denoiser, DenoiserConfig, build_schedule
from ladiff.errors import DomainError, ShapeError
from ladiff.lavae import LaVae, LaVaeConfig, LatentCode


@pytest.fixture(scope="module")
def models():
    vcfg = LaVaeConfig(d_model=32, layers=2, heads=2)
    vae = LaVae(vcfg, seed=4)
    dn = Denoiser(DenoiserConfig(d_model=32, layers=1, heads=2, max_subspaces=5), seed=5)
    sch = build_schedule(50, "linear", 5)
    return vae, dn, sch


class TestAttentionMap:
    def test_single_slot_all_ones(self, models):
        vae, _, _ = models
        z = LatentCode(np.random.default_rng(0).standard_normal((1, 32)))
        amap = attention_map(vae, z, 48)
        assert amap.weights.shape == (1, 48)
        assert np.allclose(amap.weights, 1.0)

    def test_five_slot_map_shape(self, models):
        vae, _, _ = models
        z = LatentCode(np.random.default_rng(1).standard_normal((5, 32)))
        amap = attention_map(vae, z, 200)
        assert amap.weights.shape == (5, 200)
        assert np.abs(amap.weights.sum(axis=0) - 1.0).max() < 1e-5
        assert (amap.weights >= 0).all()

    def test_capture_deterministic(self, models):
        vae, _, _ = models
        z = LatentCode(np.random.default_rng(2).standard_normal((2, 32)))
        a = attention_map(vae, z, 96)
        b = attention_map(vae, z, 96)
        assert np.array_equal(a.weights, b.weights)

    def test_k_mismatch_rejected(self, models):
        vae, _, _ = models
        z = LatentCode(np.zeros((2, 32)))
        with pytest.raises(ShapeError):
            attention_map(vae, z, 48)

    def test_column_normalization_validated(self):
        with pytest.raises(DomainError):
            AttentionMap(weights=np.full((2, 5), 0.4), r=48)
        with pytest.raises(DomainError):
            AttentionMap(weights=np.array([[1.5], [-0.5]]), r=48)


class TestChunkingScore:
    def test_block_diagonal_is_one(self):
        r, k, f = 10, 3, 30
        weights = np.zeros((k, f))
        for i in range(f):
            weights[min(i // r, k - 1), i] = 1.0
        amap = AttentionMap(weights=weights, r=r)
        assert chunking_score(amap, r) == 1.0

    def test_uniform_map_ties_to_lowest(self):
        # argmax of a uniform column is slot 0; expected slot is 0 only for
        # the first r frames, so the score is exactly 1/k.
        k, r = 4, 10
        f = k * r
        amap = AttentionMap(weights=np.full((k, f), 1.0 / k), r=r)
        assert chunking_score(amap, r) == pytest.approx(0.25)

    def test_requires_two_slots(self):
        amap = AttentionMap(weights=np.ones((1, 10)), r=10)
        with pytest.raises(DomainError):
            chunking_score(amap, 10)

    def test_bounded(self, models):
        vae, dn, sch = models
        z = sample_latent("a man walks forward", 200, vae, dn, sch, np.random.default_rng(3))
        amap = attention_map(vae, LatentCode(z), 200)
        score = chunking_score(amap, vae.config.r)
        assert 0.0 <= score <= 1.0


class TestSubspaceAblation:
    def test_full_set_is_noop(self, models):
        vae, dn, sch = models
        full = subspace_ablation(
            vae, dn, "a man walks forward", 200, {1, 2, 3, 4, 5},
            np.random.default_rng(7), sch,
        )
        z = sample_latent("a man walks forward", 200, vae, dn, sch, np.random.default_rng(7))
        unablated = vae.decode(LatentCode(z), 200)
        assert np.array_equal(full.data, unablated.data)

    def test_single_slot_differs(self, models):
        vae, dn, sch = models
        a = subspace_ablation(
            vae, dn, "a man walks forward", 200, {1}, np.random.default_rng(8), sch
        )
        b = subspace_ablation(
            vae, dn, "a man walks forward", 200, {1, 2, 3, 4, 5},
            np.random.default_rng(8), sch,
        )
        assert a.num_frames == 200
        assert float(np.abs(a.data - b.data).sum()) > 0.0

    def test_deterministic(self, models):
        vae, dn, sch = models
        a = subspace_ablation(vae, dn, "a man walks forward", 96, {1},
                              np.random.default_rng(9), sch)
        b = subspace_ablation(vae, dn, "a man walks forward", 96, {1},
                              np.random.default_rng(9), sch)
        assert np.array_equal(a.data, b.data)

    def test_empty_and_invalid_sets(self, models):
        vae, dn, sch = models
        with pytest.raises(DomainError):
            subspace_ablation(vae, dn, "a man walks forward", 96, set(),
                              np.random.default_rng(0), sch)
        with pytest.raises(DomainError):
            subspace_ablation(vae, dn, "a man walks forward", 96, {5},
                              np.random.default_rng(0), sch)


class TestLatentOccupancy:
    def test_histogram_matches_analytic(self, models):
        vae, _, _ = models
        corpus = generate_corpus(CorpusConfig(n_samples=40), seed=71)
        norm = fit_normalizer([s.motion for s in corpus])
        usage = latent_occupancy(vae, corpus, norm)
        expected = {}
        for s in corpus:
            k = vae.config.active_count(s.motion.num_frames)
            expected[k] = expected.get(k, 0) + 1
        assert usage.histogram == dict(sorted(expected.items()))

    def test_short_corpus_single_bin(self, models):
        vae, _, _ = models
        corpus = generate_corpus(CorpusConfig(n_samples=10, f_min=30, f_max=30), seed=72)
        norm = fit_normalizer([s.motion for s in corpus])
        usage = latent_occupancy(vae, corpus, norm)
        assert usage.histogram == {1: 10}

    def test_export_row_accounting(self, models):
        vae, _, _ = models
        corpus = generate_corpus(CorpusConfig(n_samples=15), seed=73)
        norm = fit_normalizer([s.motion for s in corpus])
        usage = latent_occupancy(vae, corpus, norm)
        total_k = sum(vae.config.active_count(s.motion.num_frames) for s in corpus)
        assert usage.export_rows == total_k
        assert usage.coordinates.shape == (total_k, vae.config.d_model)


class TestSampleLatent:
    def test_initial_noise_has_activation_shape(self, models):
        vae, dn, sch = models
        z48 = sample_latent("a man walks forward", 48, vae, dn, sch, np.random.default_rng(0))
        assert z48.shape == (1, vae.config.d_model)
        z200 = sample_latent("a man walks forward", 200, vae, dn, sch, np.random.default_rng(0))
        assert z200.shape == (5, vae.config.d_model)


class TestLengthSweep:
    def test_rows_per_length(self, models):
        vae, dn, sch = models
        norm = fit_normalizer(
            [s.motion for s in generate_corpus(CorpusConfig(n_samples=8), seed=74)]
        )
        rows = length_sweep(vae, dn, sch, norm, "a person walks forward", [48, 84, 170], seed=1)
        assert [f for f, _ in rows] == [48, 84, 170]
        for _, stats in rows:
            assert stats.avg_vel >= 0.0

    def test_single_length(self, models):
        vae, dn, sch = models
        norm = fit_normalizer(
            [s.motion for s in generate_corpus(CorpusConfig(n_samples=8), seed=74)]
        )
        rows = length_sweep(vae, dn, sch, norm, "a person sits down", [60], seed=2)
        assert len(rows) == 1

    def test_reference_trend_constants(self):
        # the stored benchmark velocities decrease with target length
        lengths = sorted(REFERENCE_WALK_AVG_VEL)
        assert lengths == [48, 84, 170]
        vels = [REFERENCE_WALK_AVG_VEL[f] for f in lengths]
        assert vels[0] > vels[1] > vels[2]


class TestExports:
    def test_attention_export(self, models, tmp_path):
        vae, _, _ = models
        z = LatentCode(np.random.default_rng(4).standard_normal((2, 32)))
        amap = attention_map(vae, z, 96)
        path = tmp_path / "att.txt"
        export_attention_map(path, amap)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "# k=2 f_star=96 r=48"
        grid = np.array([[float(x) for x in ln.split()] for ln in lines[1:]])
        assert grid.shape == (2, 96)
        assert np.allclose(grid.sum(axis=0), 1.0, atol=1e-5)

    def test_usage_export(self, models, tmp_path):
        vae, _, _ = models
        corpus = generate_corpus(CorpusConfig(n_samples=6), seed=75)
        norm = fit_normalizer([s.motion for s in corpus])
        usage = latent_occupancy(vae, corpus, norm)
        path = tmp_path / "usage.txt"
        export_subspace_usage(path, usage, vae.config.r)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("# rows=")
        assert lines[1].startswith("# histogram")
        assert len(lines) - 2 == usage.export_rows
