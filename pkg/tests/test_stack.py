import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixflowlm import autodiff as ad
from mixflowlm.bridge import DataError, encode, reconstruction_term
from mixflowlm.conditioners import ConfigError, bound_log_std_np
from mixflowlm.model import LN2, LatentFlowLM
from mixflowlm.numerics import HALF_LOG_2PI, NumericError
from mixflowlm.stack import (
    FlowStackConfig,
    LayerSpec,
    channel_mix,
    channel_unmix,
    log_normal,
    mix_permutation,
    patch,
    progressive_schedule,
    unpatch,
)
from mixflowlm.verify import small_model


class TestPermutations:
    def test_patch_example(self):
        z = np.arange(12.0).reshape(1, 6, 2)
        h = patch(z, 3)
        np.testing.assert_array_equal(h, [[[0, 1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11]]])
        np.testing.assert_array_equal(unpatch(h, 3), z)

    def test_patch_not_divisible(self):
        with pytest.raises(DataError, match="not divisible"):
            patch(np.zeros((2, 5, 3)), 2)

    def test_mix_example(self):
        np.testing.assert_array_equal(channel_mix(np.array(["a0", "a1", "a2", "a3"])),
                                      ["a0", "a2", "a1", "a3"])

    def test_permutation(self):
        np.testing.assert_array_equal(mix_permutation(6), [0, 2, 4, 1, 3, 5])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 16), st.integers(0, 2 ** 32 - 1))
    def test_bitwise_round_trip(self, half, seed):
        x = np.random.default_rng(seed).normal(size=(3, 2 * half))
        assert np.array_equal(channel_unmix(channel_mix(x)), x)
        assert np.array_equal(channel_mix(channel_unmix(x)), x)

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            channel_unmix(np.zeros((2, 3)))

    def test_tensor_and_array_agree(self, rng):
        x = rng.normal(size=(2, 8))
        np.testing.assert_array_equal(channel_mix(ad.Tensor(x)).data, channel_mix(x))


class TestConfig:
    def spec(self, **kw):
        return LayerSpec(**{**dict(d_model=8, n_heads=2, V=3), **kw})

    @pytest.mark.parametrize("kw", [dict(kind="coupling"), dict(direction="both"), dict(V=0),
                                    dict(n_heads=3)])
    def test_bad_layer(self, kw):
        with pytest.raises(ConfigError):
            FlowStackConfig([self.spec(**kw)]).validate()

    def test_tie_only_first(self):
        with pytest.raises(ConfigError, match="tying"):
            FlowStackConfig([self.spec(), self.spec(tie_codebook=True)]).validate()

    def test_tie_vocab_mismatch(self):
        with pytest.raises(ConfigError, match="vocab"):
            FlowStackConfig([self.spec(tie_codebook=True)]).validate(vocab_size=4)

    def test_odd_width_mix(self):
        with pytest.raises(ConfigError, match="even"):
            FlowStackConfig([self.spec(channel_mix_after=True)], latent_dim=3).validate()

    def test_blocks_must_partition(self):
        cfg = FlowStackConfig([self.spec()] * 3, progressive_blocks=[[1], [3]],
                              progressive_steps=[10])
        with pytest.raises(ConfigError, match="partition"):
            cfg.validate()

    def test_thresholds(self):
        cfg = FlowStackConfig([self.spec()] * 3, progressive_blocks=[[1], [2], [3]],
                              progressive_steps=[10])
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg.progressive_steps = [10, 5]
        with pytest.raises(ConfigError, match="increase"):
            cfg.validate()


class TestProgressiveSchedule:
    def test_single_block(self):
        cfg = FlowStackConfig([LayerSpec()] * 3)
        assert progressive_schedule(cfg, 0) == ({1, 2, 3}, 0)
        assert progressive_schedule(cfg, 10 ** 6) == ({1, 2, 3}, 0)

    def test_blocks(self):
        cfg = FlowStackConfig([LayerSpec()] * 4, progressive_blocks=[[1, 2], [3], [4]],
                              progressive_steps=[100, 250])
        assert progressive_schedule(cfg, 0) == ({1, 2}, 0)
        assert progressive_schedule(cfg, 99) == ({1, 2}, 0)
        assert progressive_schedule(cfg, 100) == ({3}, 1)
        assert progressive_schedule(cfg, 249) == ({3}, 1)
        assert progressive_schedule(cfg, 250) == ({4}, 2)
        assert progressive_schedule(cfg, 10 ** 9) == ({4}, 2)


class TestStack:
    def test_zero_layers(self, rng):
        cfg = FlowStackConfig([], latent_dim=3, max_tokens=8)
        model = LatentFlowLM(5, cfg, rng)
        toks = rng.integers(0, 5, size=(2, 8))
        noise = rng.standard_normal((2, 8, 3))
        loss, info = model.objective(toks, noise)
        z = encode(toks, model.codebook, noise).data
        cb = model.codebook
        want = -(reconstruction_term(z, cb.means.data, cb.log_stds.data).sum()
                 + log_normal(z).sum()) / 16
        assert loss.item() == pytest.approx(want, rel=1e-14)
        assert info.logdet.shape == (2, 8, 0)
        np.testing.assert_array_equal(model.stack.inverse(z), z)

    def test_single_component_untied_is_affine(self, rng):
        cfg = FlowStackConfig([LayerSpec(kind="mixd", V=1, d_model=8, n_heads=2)],
                              latent_dim=2, max_tokens=5)
        model = LatentFlowLM(3, cfg, rng)
        layer = model.stack.layers[0]
        layer.means.data[:] = [[0.5, -1.0]]
        layer.raw_log_stds.data[:] = 0.7
        sigma = np.exp(bound_log_std_np(0.7))
        h = rng.normal(size=(2, 5, 2))
        u, ld, _ = model.stack.forward(ad.Tensor(h))
        np.testing.assert_allclose(u.data, (h - [0.5, -1.0]) / sigma, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(ld.data, -2 * np.log(sigma), rtol=1e-12)

    def test_one_tied_layer_objective(self, rng):
        model = small_model(0, kinds=("mixd",), T=6, d=3)
        toks = rng.integers(0, 5, size=(3, 6))
        noise = rng.standard_normal((3, 6, 3))
        _, info = model.objective(toks, noise, trace=True)
        z = encode(toks, model.codebook, noise).data
        cb = model.codebook
        logmix = model.stack.layers[0].log_mix(z)
        want = -(reconstruction_term(z, cb.means.data, cb.log_stds.data) + logmix).mean() / LN2
        assert info.nelbo_bits == pytest.approx(want, rel=1e-10)

    @pytest.mark.parametrize("kinds,mix", [(("mixd", "mix1", "affine"), True),
                                           (("mix1", "mixd"), False),
                                           (("affine", "affine", "mixd"), True)])
    def test_per_layer_identity(self, rng, kinds, mix):
        model = small_model(1, kinds=kinds, d=2, mix=mix)
        toks = rng.integers(0, 5, size=(3, 8))
        tr = model.forward_trace(toks, rng.standard_normal((3, 8, 2)))
        L = len(kinds)
        assert tr.per_layer_logdet.shape == (3, 8, L)
        for l in range(L):
            hn = tr.h_seq[l + 1]
            if mix and l < L - 1:
                hn = channel_unmix(hn)
            np.testing.assert_allclose(tr.per_layer_logmix[..., l],
                                       log_normal(hn) + tr.per_layer_logdet[..., l],
                                       rtol=0, atol=1e-10)

    def test_total_logdet_is_layer_sum(self, rng):
        model = small_model(2, kinds=("mixd", "mixd", "mix1"), d=2, mix=True)
        h = rng.normal(size=(2, 8, 2))
        _, ld, tr = model.stack.forward(ad.Tensor(h), trace=True)
        np.testing.assert_allclose(ld.data, tr.per_layer_logdet.sum(-1), rtol=1e-13, atol=1e-13)

    def test_round_trip_deep(self, rng):
        model = small_model(3, kinds=("mixd", "mix1", "mixd"), T=32, d=4, mix=True)
        toks = rng.integers(0, 5, size=(2, 32))
        noise = rng.standard_normal((2, 32, 4))
        tr = model.forward_trace(toks, noise)
        back = model.stack.inverse(tr.h_seq[-1], intermediates=True)
        assert np.abs(back[0] - tr.h_seq[0]).max() <= 1e-5
        for a, b in zip(back, tr.h_seq):
            assert np.abs(a - b).max() <= 1e-5

    def test_patched_round_trip(self, rng):
        model = small_model(4, kinds=("mixd", "mix1"), T=8, d=2, K=2, mix=True)
        toks = rng.integers(0, 5, size=(2, 8))
        noise = rng.standard_normal((2, 8, 2))
        h0 = model.encode_latents(toks, noise)
        assert h0.shape == (2, 4, 4)
        u = model.base_latents(toks, noise)
        np.testing.assert_allclose(model.stack.inverse(u), h0, atol=1e-7)

    def test_patched_tied_slots(self, rng):
        model = small_model(5, kinds=("mixd",), T=8, d=2, K=2)
        assert model.stack.layers[0].slots == 2
        toks = rng.integers(0, 5, size=(1, 8))
        _, info = model.objective(toks, rng.standard_normal((1, 8, 2)), trace=True)
        assert info.base.shape == (1, 4)
        assert info.reconstruction.shape == (1, 8)

    def test_autoregressive_jacobian(self, rng):
        model = small_model(6, kinds=("mixd", "mixd"), T=4, d=2)
        x = rng.normal(size=(4, 2))

        def f(v):
            with ad.no_grad():
                return model.stack.forward(ad.Tensor(v[None]))[0].data[0]

        h = 1e-6
        J = np.zeros((4, 2, 4, 2))
        for idx in np.ndindex(4, 2):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            J[(...,) + idx] = (f(xp) - f(xm)) / (2 * h)
        # l2r then r2l: every output depends on every input, yet the Jacobian
        # determinant must still equal the reported log-det
        M = J.reshape(8, 8)
        with ad.no_grad():
            ld = model.stack.forward(ad.Tensor(x[None]))[1].data.sum()
        assert np.linalg.slogdet(M)[1] == pytest.approx(ld, rel=1e-5)

    def test_error_coordinates(self, rng, monkeypatch):
        model = small_model(7, kinds=("mixd", "mixd"), T=4, d=2)
        layer = model.stack.layers[1]

        def boom(ctx, h, lead):
            raise NumericError("bad", row=6, dim=1)

        monkeypatch.setattr(layer, "_transform", boom)
        with pytest.raises(NumericError, match=r"layer 2, sequence 1, position 2, dim 1"):
            model.stack.forward(ad.Tensor(rng.normal(size=(2, 4, 2))))

    def test_layer_parameters_exclude_codebook(self, rng):
        model = small_model(8, kinds=("mixd", "mix1"))
        p1 = model.stack.layer_parameters(1)
        assert all(k.startswith("layer1.") for k in p1)
        assert not any(p is model.codebook.means for p in p1.values())
        assert set(p1).isdisjoint(model.stack.layer_parameters(2))

    def test_log_normal(self, rng):
        u = rng.normal(size=(3, 4))
        want = -0.5 * (u ** 2).sum(-1) - 4 * HALF_LOG_2PI
        np.testing.assert_allclose(log_normal(u), want, rtol=1e-15)

