import numpy as np
import pytest
import torch

from ladiff.corpus import CorpusConfig, MotionSequence, fit_normalizer, generate_corpus
from ladiff.errors import DomainError, LengthError, ShapeError
from ladiff.lavae import (
    LaVae,
    LaVaeConfig,
    LatentCode,
    SubspacePosterior,
    TrainSettings,
    activation_count,
    kl_divergence,
    perturb_frames,
    reparameterize,
    train_vae,
    vae_loss,
    vae_training_step,
)
from ladiff.nnutil import parameter_checksum


class TestActivationCount:
    @pytest.mark.parametrize(
        "f,r,expected", [(48, 48, 1), (200, 48, 5), (49, 48, 2), (1, 48, 1), (96, 48, 2)]
    )
    def test_values(self, f, r, expected):
        assert activation_count(f, r) == expected

    def test_monotone_in_f(self):
        ks = [activation_count(f, 48, 5) for f in range(1, 201)]
        assert all(b >= a for a, b in zip(ks, ks[1:]))

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            activation_count(0, 48)
        with pytest.raises(DomainError):
            activation_count(10, 0)

    def test_clamped_to_bank(self):
        assert activation_count(500, 48, 5) == 5


class TestEncodeDecode:
    def test_encode_slot_counts(self, tiny_vae, small_normalizer, small_corpus):
        for f_star, k in ((48, 1), (200, 5), (96, 2)):
            data = np.zeros((f_star, 49))
            post = tiny_vae.encode(MotionSequence(data, 20))
            assert post.k == k
            assert post.mus.shape == (k, tiny_vae.config.d_model)

    def test_encode_deterministic(self, tiny_vae):
        m = MotionSequence(np.random.default_rng(0).standard_normal((60, 49)), 20)
        a = tiny_vae.encode(m)
        b = tiny_vae.encode(m)
        assert np.array_equal(a.mus, b.mus)
        assert np.array_equal(a.log_vars, b.log_vars)

    def test_encode_length_error(self, tiny_vae):
        with pytest.raises(LengthError):
            tiny_vae.encode(MotionSequence(np.zeros((201, 49)), 20))

    def test_decode_shapes(self, tiny_vae):
        d = tiny_vae.config.d_model
        for f_star, k in ((48, 1), (200, 5)):
            z = LatentCode(np.random.default_rng(1).standard_normal((k, d)))
            out = tiny_vae.decode(z, f_star)
            assert out.num_frames == f_star
            assert out.pose_dim == 49

    def test_decode_k_mismatch(self, tiny_vae):
        z = LatentCode(np.zeros((2, tiny_vae.config.d_model)))
        with pytest.raises(ShapeError):
            tiny_vae.decode(z, 48)

    def test_decode_bit_identical(self, tiny_vae):
        z = LatentCode(np.random.default_rng(2).standard_normal((3, tiny_vae.config.d_model)))
        a = tiny_vae.decode(z, 140)
        b = tiny_vae.decode(z, 140)
        assert np.array_equal(a.data, b.data)

    def test_round_trip_frame_counts(self, tiny_vae):
        rng = np.random.default_rng(3)
        for f in (30, 47, 48, 49, 95, 144, 199, 200):
            m = MotionSequence(rng.standard_normal((f, 49)), 20)
            post = tiny_vae.encode(m)
            z = reparameterize(post, np.random.default_rng(0))
            out = tiny_vae.decode(z, f)
            assert out.num_frames == f

    def test_without_length_awareness_full_bank(self):
        cfg = LaVaeConfig(d_model=32, layers=1, heads=2, length_aware=False)
        model = LaVae(cfg, seed=1)
        post = model.encode(MotionSequence(np.zeros((30, 49)), 20))
        assert post.k == cfg.max_subspaces


class TestReparameterize:
    def test_zero_variance_exact(self):
        post = SubspacePosterior(
            mus=np.arange(8, dtype=float).reshape(2, 4),
            log_vars=np.full((2, 4), -np.inf),
        )
        z = reparameterize(post, np.random.default_rng(0))
        assert np.array_equal(z.slots, post.mus)

    def test_monte_carlo_moments(self):
        post = SubspacePosterior(mus=np.zeros((1, 4)), log_vars=np.zeros((1, 4)))
        rng = np.random.default_rng(7)
        draws = np.stack([reparameterize(post, rng).slots for _ in range(100_000)])
        assert np.abs(draws.mean(axis=0)).max() < 0.02
        assert np.abs(draws.var(axis=0) - 1.0).max() < 0.05

    def test_rng_determinism(self):
        post = SubspacePosterior(mus=np.ones((2, 3)), log_vars=np.zeros((2, 3)))
        a = reparameterize(post, np.random.default_rng(5))
        b = reparameterize(post, np.random.default_rng(5))
        assert np.array_equal(a.slots, b.slots)

    def test_variance_scaling_literal_form(self):
        # variance (not std) multiplies the noise by default
        post = SubspacePosterior(mus=np.zeros((1, 1)), log_vars=np.log(np.full((1, 1), 4.0)))
        rng_a = np.random.default_rng(9)
        rho = np.random.default_rng(9).standard_normal((1, 1))
        z = reparameterize(post, rng_a)
        assert z.slots[0, 0] == pytest.approx(4.0 * rho[0, 0])
        z_std = reparameterize(post, np.random.default_rng(9), std_reparam=True)
        assert z_std.slots[0, 0] == pytest.approx(2.0 * rho[0, 0])

    def test_logvar_clamped(self):
        post = SubspacePosterior(mus=np.zeros((1, 1)), log_vars=np.array([[100.0]]))
        assert post.log_vars[0, 0] == 20.0


class TestPerturbFrames:
    def _motion(self, F=100):
        return MotionSequence(np.random.default_rng(1).standard_normal((F, 49)), 20)

    def test_fraction_zero_identity(self):
        m = self._motion()
        out = perturb_frames(m, 0.0, 0.1, np.random.default_rng(0))
        assert np.array_equal(out.data, m.data)

    def test_exact_frame_count(self):
        m = self._motion(100)
        out = perturb_frames(m, 0.33, 0.1, np.random.default_rng(3))
        changed = int((out.data != m.data).any(axis=1).sum())
        assert changed == 33

    def test_zero_std_identity(self):
        m = self._motion()
        out = perturb_frames(m, 1.0, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.data, m.data)

    def test_fraction_domain(self):
        with pytest.raises(DomainError):
            perturb_frames(self._motion(), 1.5, 0.1, np.random.default_rng(0))
        with pytest.raises(DomainError):
            perturb_frames(self._motion(), -0.1, 0.1, np.random.default_rng(0))

    def test_unchosen_frames_untouched(self):
        m = self._motion(50)
        out = perturb_frames(m, 0.2, 0.5, np.random.default_rng(4))
        changed = (out.data != m.data).any(axis=1)
        assert changed.sum() == 10
        assert np.array_equal(out.data[~changed], m.data[~changed])


class TestVaeLoss:
    def test_perfect_reconstruction(self):
        m = MotionSequence(np.random.default_rng(0).standard_normal((20, 49)), 20)
        post = SubspacePosterior(mus=np.zeros((1, 4)), log_vars=np.zeros((1, 4)))
        total, recon, kl = vae_loss(m, m, post, 1e-4)
        assert recon == 0.0
        assert kl == 0.0
        assert total == 0.0

    def test_closed_form_kl(self):
        post = SubspacePosterior(mus=np.array([[1.0]]), log_vars=np.array([[0.0]]))
        assert kl_divergence(post) == pytest.approx(0.5)

    def test_kl_nonnegative_property(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            post = SubspacePosterior(
                mus=rng.standard_normal((k, 8)) * 3,
                log_vars=rng.uniform(-5, 5, (k, 8)),
            )
            assert kl_divergence(post) >= -1e-9

    def test_shape_mismatch(self):
        a = MotionSequence(np.zeros((10, 49)), 20)
        b = MotionSequence(np.zeros((11, 49)), 20)
        post = SubspacePosterior(mus=np.zeros((1, 4)), log_vars=np.zeros((1, 4)))
        with pytest.raises(ShapeError):
            vae_loss(a, b, post, 1e-4)


def _tiny_train_corpus(n=10, f_min=30, f_max=40, seed=21):
    corpus = generate_corpus(CorpusConfig(n_samples=n, f_min=f_min, f_max=f_max), seed=seed)
    for s in corpus:
        s.split = "train"
    norm = fit_normalizer([s.motion for s in corpus])
    return corpus, norm


class TestTraining:
    def test_deterministic(self):
        corpus, norm = _tiny_train_corpus()
        cfg = LaVaeConfig(d_model=32, layers=1, heads=2)
        st = TrainSettings(epochs=1, batch_size=4)
        _, logs_a = train_vae(corpus, norm, cfg, st, seed=5)
        model_b, logs_b = train_vae(corpus, norm, cfg, st, seed=5)
        assert logs_a[-1].total == logs_b[-1].total
        model_c, _ = train_vae(corpus, norm, cfg, st, seed=5)
        assert parameter_checksum(model_b) == parameter_checksum(model_c)

    def test_kl_weight_zero_matches_recon_only_gradients(self):
        corpus, norm = _tiny_train_corpus(n=4)
        cfg = LaVaeConfig(d_model=16, layers=1, heads=2, kl_weight=0.0, dvae_fraction=0.0)
        model = LaVae(cfg, seed=3)
        data = [norm.normalize_array(s.motion.data).astype(np.float32) for s in corpus]
        from ladiff.nnutil import pad_stack

        x, lengths, mask = pad_stack(data)
        k = cfg.active_count(int(lengths.max()))
        gen = torch.Generator().manual_seed(0)
        total, recon, _ = vae_training_step(model, x, lengths, mask, k, gen)
        total.backward()
        grads_total = [p.grad.clone() for p in model.parameters() if p.grad is not None]

        model.zero_grad()
        gen = torch.Generator().manual_seed(0)
        total2, recon2, _ = vae_training_step(model, x, lengths, mask, k, gen)
        recon2.backward()
        grads_recon = [p.grad.clone() for p in model.parameters() if p.grad is not None]
        for ga, gb in zip(grads_total, grads_recon):
            assert torch.equal(ga, gb)

    def test_overfit_five_samples(self):
        corpus, norm = _tiny_train_corpus(n=5, f_min=30, f_max=40, seed=31)
        cfg = LaVaeConfig(d_model=64, layers=2, heads=4, kl_weight=0.0, dvae_fraction=0.0)
        st = TrainSettings(epochs=2000, batch_size=5, lr=1e-3, max_steps=2000)
        model, logs = train_vae(corpus, norm, cfg, st, seed=13)
        assert logs[-1].recon < 0.01


class TestGradientCheck:
    def test_vae_loss_gradients_match_finite_differences(self):
        cfg = LaVaeConfig(
            d_model=8, layers=1, heads=1, pose_dim=7, f_max=12, r=6, kl_weight=0.5,
            dvae_fraction=0.0,
        )
        model = LaVae(cfg, seed=17).double()
        F = 6
        rng = np.random.default_rng(23)
        clean = torch.tensor(rng.standard_normal((1, F, 7)), dtype=torch.float64)
        rho = torch.tensor(rng.standard_normal((1, 1, 8)), dtype=torch.float64)
        lengths = torch.tensor([F])
        k = cfg.active_count(F)

        def loss_fn():
            mu, logvar = model.encode_batch(clean, lengths, k)
            z = mu + logvar.exp() * rho
            recon = model.decode_batch(z, lengths)
            rl = ((recon - clean) ** 2).mean()
            kl = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum()
            return rl + cfg.kl_weight * kl

        model.zero_grad()
        loss_fn().backward()
        params = [p for p in model.parameters() if p.grad is not None]
        probe = np.random.default_rng(29)
        h = 1e-5
        checked = 0
        worst = 0.0
        for _ in range(100):
            p = params[int(probe.integers(len(params)))]
            idx = tuple(int(probe.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + h
                up = float(loss_fn())
                p[idx] = orig - h
                down = float(loss_fn())
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
            checked += 1
        assert checked == 100
        assert worst < 1e-4, f"worst relative error {worst:.2e}"


class TestMaskingIndependence:
    def test_same_slots_same_output(self, tiny_vae):
        d = tiny_vae.config.d_model
        z = np.random.default_rng(5).standard_normal((2, d))
        a = tiny_vae.decode(LatentCode(z.copy()), 96)
        b = tiny_vae.decode(LatentCode(z.copy()), 96)
        assert np.array_equal(a.data, b.data)

    def test_inactive_slots_unrepresentable(self, tiny_vae):
        # the API simply has no way to pass K slots for a short motion
        z = LatentCode(np.zeros((5, tiny_vae.config.d_model)))
        with pytest.raises(ShapeError):
            tiny_vae.decode(z, 48)

    def test_monotone_capacity(self, tiny_vae_config):
        caps = [
            tiny_vae_config.active_count(f) * tiny_vae_config.d_model
            for f in range(1, tiny_vae_config.f_max + 1)
        ]
        assert all(b >= a for a, b in zip(caps, caps[1:]))
