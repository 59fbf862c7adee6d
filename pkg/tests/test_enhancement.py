import numpy as np
import pytest
import torch

import duse
from duse.config import TrainConfig
from duse.checkpoint import ROLE_ND, ROLE_RVAE
from duse.enhancement import (
    EnhancementMode,
    JointParams,
    PosteriorEstimate,
    VARIANCE_FLOOR,
    enhance,
    enhancement_elbo_loss,
    fine_tune_nda,
    fit_na,
    joint_from_checkpoint,
    mixture_nll_term,
    train_nd,
    wiener_posterior,
)
from duse.errors import UsageError
from duse.noise_model import NoiseContext, init_noise_params, noise_variance
from duse.signal_pipeline import ComplexSpectrogram, StftConfig, istft, read_wav, stft
from duse.speech_prior import (
    decode,
    encode,
    init_rvae_params,
    is_div,
    kl_to_prior,
    make_generator,
)
from helpers import gradient_check

F, T, L, H = 9, 5, 2, 8


def rand_spec(rng, f=5, t=4):
    # f must be window_len/2 + 1 for a valid geometry
    data = rng.standard_normal((f, t)) + 1j * rng.standard_normal((f, t))
    cfg = StftConfig(window_len=(f - 1) * 2, hop=f - 1)
    return ComplexSpectrogram(data=data, config=cfg)


@pytest.fixture(scope="module")
def tiny_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("enh_corpus")
    duse.make_toy_corpus(root, n_utts=4, duration_s=0.8, seed=66)
    return root


@pytest.fixture(scope="module")
def tiny_pretrained(tiny_corpus_dir):
    manifest = duse.load_manifest(tiny_corpus_dir / "clean.tsv")
    cfg = TrainConfig(epochs=2, hidden_dim=8, latent_dim=2, seq_len=20, batch_size=4)
    ckpt, _ = duse.pretrain(manifest, cfg)
    return ckpt


@pytest.fixture(scope="module")
def tiny_nd(tiny_corpus_dir, tiny_pretrained):
    manifest = duse.load_manifest(tiny_corpus_dir / "noisy.tsv")
    cfg = TrainConfig(epochs=2, hidden_dim=8, latent_dim=2, seq_len=20, batch_size=4)
    ckpt, _ = train_nd(manifest, tiny_pretrained, "no", cfg)
    return ckpt


@pytest.fixture(scope="module")
def tiny_noisy_wave(tiny_corpus_dir):
    manifest = duse.load_manifest(tiny_corpus_dir / "noisy.tsv")
    return read_wav(manifest[0].path)


class TestWienerPosterior:
    def test_scalar_example(self):
        shape = (3, 1)
        spec = ComplexSpectrogram(
            data=np.full(shape, 4.0 + 0j), config=StftConfig(window_len=4, hop=2)
        )
        post = wiener_posterior(spec, np.full(shape, 3.0), np.full(shape, 1.0))
        np.testing.assert_allclose(post.mean, np.full(shape, 3.0 + 0j))
        np.testing.assert_allclose(post.var, np.full(shape, 0.75))

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        spec = rand_spec(rng)
        vs = rng.uniform(0.01, 5.0, spec.data.shape)
        vn = rng.uniform(0.01, 5.0, spec.data.shape)
        post = wiener_posterior(spec, vs, vn)
        for i in range(spec.data.shape[0]):
            for j in range(spec.data.shape[1]):
                g = vs[i, j] / (vs[i, j] + vn[i, j])
                assert abs(post.mean[i, j] - g * spec.data[i, j]) <= 1e-12 * abs(
                    spec.data[i, j]
                )
                assert abs(post.var[i, j] - g * vn[i, j]) <= 1e-12 * vn[i, j]

    def test_vanishing_noise_returns_observation(self):
        rng = np.random.default_rng(1)
        spec = rand_spec(rng)
        vs = rng.uniform(0.5, 2.0, spec.data.shape)
        post = wiener_posterior(spec, vs, 1e-12 * vs)
        np.testing.assert_allclose(post.mean, spec.data, rtol=1e-9)

    def test_equal_variances_halve_observation(self):
        rng = np.random.default_rng(2)
        spec = rand_spec(rng)
        v = rng.uniform(0.5, 2.0, spec.data.shape)
        post = wiener_posterior(spec, v, v)
        np.testing.assert_allclose(post.mean, spec.data / 2, rtol=1e-9)
        np.testing.assert_allclose(post.var, v / 2, rtol=1e-9)

    def test_variance_below_both_inputs(self):
        rng = np.random.default_rng(3)
        spec = rand_spec(rng)
        vs = rng.uniform(0.01, 5.0, spec.data.shape)
        vn = rng.uniform(0.01, 5.0, spec.data.shape)
        post = wiener_posterior(spec, vs, vn)
        assert np.all(post.var <= np.minimum(vs, vn))
        assert np.all(post.var > 0)

    def test_gain_shrinks_magnitude(self):
        rng = np.random.default_rng(4)
        spec = rand_spec(rng)
        vs = rng.uniform(0.01, 5.0, spec.data.shape)
        vn = rng.uniform(0.01, 5.0, spec.data.shape)
        post = wiener_posterior(spec, vs, vn)
        assert np.all(np.abs(post.mean) <= np.abs(spec.data) + 1e-15)

    def test_validation(self):
        rng = np.random.default_rng(5)
        spec = rand_spec(rng)
        good = np.ones(spec.data.shape)
        with pytest.raises(ValueError):
            wiener_posterior(spec, good[:, :-1], good)
        with pytest.raises(ValueError):
            wiener_posterior(spec, good, 0.0 * good)

    def test_posterior_estimate_validation(self):
        with pytest.raises(ValueError):
            PosteriorEstimate(mean=np.ones((2, 2)), var=np.ones((2, 3)))
        with pytest.raises(ValueError):
            PosteriorEstimate(mean=np.ones((2, 2)), var=-np.ones((2, 2)))


class TestMixtureNll:
    def test_matches_elementwise_formula(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0.05, 4.0, (5, 3))
        vs = rng.uniform(0.05, 4.0, (5, 3))
        vn = rng.uniform(0.05, 4.0, (5, 3))
        total = 0.0
        for i in range(5):
            for j in range(3):
                r = p[i, j] / (vs[i, j] + vn[i, j])
                total += r - np.log(r) - 1
        np.testing.assert_allclose(mixture_nll_term(p, vs, vn), total, rtol=1e-12)

    def test_zero_when_power_equals_mixture(self):
        rng = np.random.default_rng(7)
        vs = rng.uniform(0.1, 2.0, (4, 4))
        vn = rng.uniform(0.1, 2.0, (4, 4))
        assert mixture_nll_term(vs + vn, vs, vn) <= 1e-12

    def test_reduces_to_clean_reconstruction_as_noise_vanishes(self):
        # the enhancement objective must collapse to the pre-training one
        # when the noise variance goes to zero
        rng = np.random.default_rng(8)
        p = rng.uniform(0.1, 4.0, (6, 5))
        vs = rng.uniform(0.1, 4.0, (6, 5))
        a = mixture_nll_term(p, vs, 1e-12 * vs)
        b = is_div(p, vs)
        assert abs(a - b) <= 1e-6 * abs(b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mixture_nll_term(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))


@pytest.fixture(scope="module")
def nets():
    rvae = init_rvae_params(F, L, H, seed=0)
    noise = {v: init_noise_params(v, F, L, H, seed=1) for v in ("no", "lv", "nolv")}
    return rvae, noise


class TestElboLoss:
    @pytest.mark.parametrize("variant", ["no", "lv", "nolv"])
    def test_matches_composition_oracle(self, nets, variant):
        rvae, noise = nets
        rng = np.random.default_rng(9)
        p = rng.uniform(0.05, 3.0, (F, T))
        loss = enhancement_elbo_loss(p, rvae, noise[variant], variant, make_generator(7))
        q, z = encode(p, rvae, make_generator(7))
        vs = decode(z, rvae)
        vn = noise_variance(
            variant, NoiseContext(noisy_power=p, latents=z), noise[variant]
        )
        manual = mixture_nll_term(p, vs, vn) + float(np.sum(kl_to_prior(q)))
        np.testing.assert_allclose(loss, manual, rtol=1e-10)

    def test_deterministic_given_seed(self, nets):
        rvae, noise = nets
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 3.0, (F, T))
        a = enhancement_elbo_loss(p, rvae, noise["nolv"], "nolv", make_generator(3))
        b = enhancement_elbo_loss(p, rvae, noise["nolv"], "nolv", make_generator(3))
        assert a == b

    def test_mc_average_differs_from_single(self, nets):
        rvae, noise = nets
        rng = np.random.default_rng(11)
        p = rng.uniform(0.05, 3.0, (F, T))
        one = enhancement_elbo_loss(p, rvae, noise["lv"], "lv", make_generator(4))
        many = enhancement_elbo_loss(
            p, rvae, noise["lv"], "lv", make_generator(4), mc_samples=8
        )
        assert np.isfinite(many) and many != one

    def test_variant_mismatch(self, nets):
        rvae, noise = nets
        p = np.ones((F, T))
        with pytest.raises(UsageError):
            enhancement_elbo_loss(p, rvae, noise["no"], "lv", make_generator(0))

    @pytest.mark.parametrize("variant", ["no", "lv", "nolv"])
    def test_gradient_finite_differences(self, variant):
        rvae = init_rvae_params(F, L, H, seed=20)
        noise = init_noise_params(variant, F, L, H, seed=21)
        rng = np.random.default_rng(12)
        p = rng.uniform(0.05, 3.0, (F, T))

        def loss_fn():
            return enhancement_elbo_loss(
                p, rvae, noise, variant, make_generator(33), as_tensor=True
            )

        trainable = list(rvae.encoder.parameters()) + list(noise.net.parameters())
        gradient_check(loss_fn, trainable, rng, n_coords=8)


class TestMode:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            EnhancementMode(kind="offline")

    def test_rejects_negative_iters(self):
        with pytest.raises(ValueError):
            EnhancementMode(kind="na", na_iters=-1)

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            EnhancementMode(kind="nda", nda_lr=0.0)


def state_bytes(module):
    return {k: v.numpy().tobytes() for k, v in module.state_dict().items()}


class TestFitNa:
    def test_trace_and_determinism(self, tiny_pretrained, tiny_noisy_wave):
        mode = EnhancementMode(kind="na", na_iters=3)
        pa, ta = fit_na(tiny_noisy_wave, tiny_pretrained, "no", mode, make_generator(5))
        pb, tb = fit_na(tiny_noisy_wave, tiny_pretrained, "no", mode, make_generator(5))
        assert len(ta) == 4 and all(np.isfinite(v) for v in ta)
        assert ta == tb
        assert state_bytes(pa.noise.net) == state_bytes(pb.noise.net)

    def test_zero_iters_keeps_encoder(self, tiny_pretrained, tiny_noisy_wave):
        mode = EnhancementMode(kind="na", na_iters=0)
        params, trace = fit_na(
            tiny_noisy_wave, tiny_pretrained, "no", mode, make_generator(6)
        )
        assert len(trace) == 1
        ref = duse.rvae_from_checkpoint(tiny_pretrained)
        assert state_bytes(params.rvae.encoder) == state_bytes(ref.encoder)

    def test_decoder_frozen_encoder_updated(self, tiny_pretrained, tiny_noisy_wave):
        mode = EnhancementMode(kind="na", na_iters=2)
        params, _ = fit_na(
            tiny_noisy_wave, tiny_pretrained, "no", mode, make_generator(7)
        )
        ref = duse.rvae_from_checkpoint(tiny_pretrained)
        assert state_bytes(params.rvae.decoder) == state_bytes(ref.decoder)
        assert state_bytes(params.rvae.encoder) != state_bytes(ref.encoder)

    def test_initial_noise_level_tracks_input(self, tiny_pretrained, tiny_noisy_wave):
        mode = EnhancementMode(kind="na", na_iters=0)
        params, _ = fit_na(
            tiny_noisy_wave, tiny_pretrained, "no", mode, make_generator(8)
        )
        spec = stft(duse.rescale(tiny_noisy_wave), tiny_pretrained.stft)
        target = duse.power(spec).mean()
        vn = noise_variance(
            "no", NoiseContext(noisy_power=duse.power(spec)), params.noise
        )
        assert np.median(vn) < 10 * target and np.median(vn) > target / 10

    def test_requires_pretrained_role(self, tiny_nd, tiny_noisy_wave):
        with pytest.raises(UsageError):
            fit_na(
                tiny_noisy_wave,
                tiny_nd,
                "no",
                EnhancementMode(kind="na"),
                make_generator(0),
            )

    def test_requires_na_kind(self, tiny_pretrained, tiny_noisy_wave):
        with pytest.raises(UsageError):
            fit_na(
                tiny_noisy_wave,
                tiny_pretrained,
                "no",
                EnhancementMode(kind="nd"),
                make_generator(0),
            )


class TestTrainNd:
    def test_checkpoint_fields(self, tiny_nd):
        assert tiny_nd.role == ROLE_ND
        assert tiny_nd.variant == "no"
        assert set(tiny_nd.params) == {"encoder", "decoder", "noise"}

    def test_decoder_unchanged_from_pretraining(self, tiny_pretrained, tiny_nd):
        for name, arr in tiny_nd.params["decoder"].items():
            np.testing.assert_array_equal(arr, tiny_pretrained.params["decoder"][name])

    def test_hidden_dim_mismatch_rejected(self, tiny_corpus_dir, tiny_pretrained):
        manifest = duse.load_manifest(tiny_corpus_dir / "noisy.tsv")
        cfg = TrainConfig(epochs=1, hidden_dim=16, latent_dim=2, seq_len=20, batch_size=4)
        with pytest.raises(UsageError):
            train_nd(manifest, tiny_pretrained, "no", cfg)

    def test_requires_pretrained_role(self, tiny_corpus_dir, tiny_nd):
        manifest = duse.load_manifest(tiny_corpus_dir / "noisy.tsv")
        cfg = TrainConfig(epochs=1, hidden_dim=8, latent_dim=2, seq_len=20, batch_size=4)
        with pytest.raises(UsageError):
            train_nd(manifest, tiny_nd, "no", cfg)

    def test_joint_from_checkpoint_roundtrip(self, tiny_nd):
        joint = joint_from_checkpoint(tiny_nd)
        assert joint.noise.variant.value == "no"
        assert joint.stft.n_freq == 513

    def test_joint_from_checkpoint_wrong_role(self, tiny_pretrained):
        with pytest.raises(UsageError):
            joint_from_checkpoint(tiny_pretrained)


class TestFineTuneNda:
    def test_zero_iters_matches_nd_parameters(self, tiny_nd, tiny_noisy_wave):
        mode = EnhancementMode(kind="nda", nda_iters=0)
        params, trace = fine_tune_nda(tiny_nd, tiny_noisy_wave, mode, make_generator(9))
        assert len(trace) == 1
        ref = joint_from_checkpoint(tiny_nd)
        assert state_bytes(params.rvae.encoder) == state_bytes(ref.rvae.encoder)
        assert state_bytes(params.noise.net) == state_bytes(ref.noise.net)

    def test_adaptation_updates_noise_net(self, tiny_nd, tiny_noisy_wave):
        mode = EnhancementMode(kind="nda", nda_iters=2)
        params, trace = fine_tune_nda(tiny_nd, tiny_noisy_wave, mode, make_generator(10))
        assert len(trace) == 3
        ref = joint_from_checkpoint(tiny_nd)
        assert state_bytes(params.noise.net) != state_bytes(ref.noise.net)
        assert state_bytes(params.rvae.decoder) == state_bytes(ref.rvae.decoder)

    def test_requires_nda_kind(self, tiny_nd, tiny_noisy_wave):
        with pytest.raises(UsageError):
            fine_tune_nda(
                tiny_nd, tiny_noisy_wave, EnhancementMode(kind="na"), make_generator(0)
            )


class TestEnhance:
    def test_output_shape_and_rate(self, tiny_nd, tiny_noisy_wave):
        joint = joint_from_checkpoint(tiny_nd)
        out, post = enhance(
            tiny_noisy_wave, joint, EnhancementMode(kind="nd"), make_generator(11)
        )
        assert out.sample_rate == tiny_noisy_wave.sample_rate
        assert abs(len(out.samples) - len(tiny_noisy_wave.samples)) <= 1024
        assert post.mean.shape[0] == 513
        assert np.all(post.var > 0)

    def test_deterministic_given_seed(self, tiny_nd, tiny_noisy_wave):
        joint = joint_from_checkpoint(tiny_nd)
        mode = EnhancementMode(kind="nd")
        a, _ = enhance(tiny_noisy_wave, joint, mode, make_generator(12))
        b, _ = enhance(tiny_noisy_wave, joint, mode, make_generator(12))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_latent_mean_ignores_sampling_seed(self, tiny_nd, tiny_noisy_wave):
        joint = joint_from_checkpoint(tiny_nd)
        mode = EnhancementMode(kind="nd", use_latent_mean=True)
        a, _ = enhance(tiny_noisy_wave, joint, mode, make_generator(13))
        b, _ = enhance(tiny_noisy_wave, joint, mode, make_generator(14))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_variant_mismatch(self, tiny_nd, tiny_noisy_wave):
        joint = joint_from_checkpoint(tiny_nd)
        with pytest.raises(UsageError):
            enhance(
                tiny_noisy_wave,
                joint,
                EnhancementMode(kind="nd"),
                make_generator(0),
                variant="lv",
            )

    def test_passthrough_when_speech_dominates(self, tiny_noisy_wave):
        # constant huge speech variance and unit noise variance make the
        # Wiener gain uniformly 1 - eps, so the output is the plain STFT
        # round-trip up to that scalar
        rvae = init_rvae_params(513, 2, 8, seed=0)
        with torch.no_grad():
            rvae.decoder.logvar_head.weight.zero_()
            rvae.decoder.logvar_head.bias.fill_(14.0)
        noise = init_noise_params("no", 513, 2, 8, seed=0, init_variance=1.0)
        with torch.no_grad():
            noise.net.head.output_layer.weight.zero_()
        joint = JointParams(rvae=rvae, noise=noise, stft=StftConfig())
        out, _ = enhance(
            tiny_noisy_wave, joint, EnhancementMode(kind="nd"), make_generator(15)
        )
        roundtrip = istft(stft(tiny_noisy_wave, StftConfig()))
        np.testing.assert_allclose(
            out.samples, roundtrip.samples, rtol=1e-5, atol=1e-7
        )
