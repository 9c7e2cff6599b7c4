import numpy as np
import pytest

from dne import dsp, enhance
from dne.nncore import Tensor, grad_check, mse_loss, no_grad


def tiny_unet(in_channels=1, bins=8, channels=(4, 8), dtype=np.float64, seed=0):
    return enhance.UNet(
        in_channels=in_channels,
        channels=channels,
        bins=bins,
        rng=np.random.default_rng(seed),
        dtype=dtype,
    )


class TestBackboneConfig:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            enhance.BackboneConfig("resnet")

    def test_embedding_width_per_backbone(self):
        assert enhance.BackboneConfig("unet", use_dne=True).dne_dim == 257
        assert enhance.BackboneConfig("ddae", use_dne=True).dne_dim == 128
        assert enhance.BackboneConfig("blstm", use_dne=True).dne_dim == 128

    def test_factory_dispatch(self):
        rng = np.random.default_rng(0)
        assert isinstance(enhance.make_backbone(enhance.BackboneConfig("unet"), rng), enhance.UNet)
        assert isinstance(enhance.make_backbone(enhance.BackboneConfig("ddae"), rng), enhance.Ddae)
        assert isinstance(enhance.make_backbone(enhance.BackboneConfig("blstm"), rng), enhance.Blstm)


class TestDimensionAccounting:
    def test_unet_input_channels(self):
        plain = enhance.UNet(in_channels=1)
        cond = enhance.UNet(in_channels=2)
        assert plain.encoder[0].conv.weight.shape == (16, 1, 4, 4)
        assert cond.encoder[0].conv.weight.shape == (16, 2, 4, 4)

    def test_unet_channel_ladder(self):
        model = enhance.UNet(in_channels=1)
        enc = [b.conv.weight.shape for b in model.encoder]
        assert enc == [(16, 1, 4, 4), (32, 16, 4, 4), (64, 32, 4, 4), (64, 64, 4, 4)]
        dec = [b.conv.weight.shape for b in model.decoder]
        # transpose weights are (c_in, c_out, kh, kw); inputs grow by the skip width
        assert dec == [(64, 64, 4, 4), (128, 32, 4, 4), (64, 16, 4, 4), (32, 16, 4, 4)]
        assert model.final.weight.shape == (1, 16, 1, 1)

    def test_ddae_input_dims(self):
        plain = enhance.Ddae(use_dne=False)
        cond = enhance.Ddae(use_dne=True)
        assert plain.blocks[0].lin.weight.shape[0] == 1285
        assert cond.blocks[0].lin.weight.shape[0] == 1925
        widths = [b.lin.weight.shape[1] for b in plain.blocks]
        assert widths == [1024, 512, 256, 128, 256, 512, 1024]
        assert plain.head.weight.shape == (1024, 257)

    def test_blstm_input_dims(self):
        plain = enhance.Blstm(use_dne=False)
        cond = enhance.Blstm(use_dne=True)
        assert plain.stack.fwd.layers[0].wx.shape == (257, 4 * 512)
        assert cond.stack.bwd.layers[0].wx.shape == (385, 4 * 512)
        assert plain.head.weight.shape == (512, 300)
        assert plain.out.weight.shape == (300, 257)


class TestUNetForward:
    def test_mask_shape_and_range(self):
        model = tiny_unet(bins=8)
        x = np.random.default_rng(1).normal(size=(2, 1, 16, 8))
        mask = model(x)
        assert mask.shape == (2, 16, 8)
        assert np.all(mask.data > 0) and np.all(mask.data < 1)

    def test_full_size_shapes(self):
        model = enhance.UNet(in_channels=2, dtype=np.float32)
        x = np.random.default_rng(2).normal(size=(1, 2, 64, 257)).astype(np.float32)
        mask = model(x)
        assert mask.shape == (1, 64, 257)
        assert np.all((mask.data > 0) & (mask.data < 1))

    def test_input_validation(self):
        model = tiny_unet(bins=8)
        with pytest.raises(ValueError):
            model(np.zeros((2, 16, 8)))
        with pytest.raises(ValueError):
            model(np.zeros((1, 2, 16, 8)))
        with pytest.raises(ValueError):
            model(np.zeros((1, 1, 16, 12)))

    def test_stack_channels(self):
        mag = np.arange(12.0).reshape(3, 4)
        vol = enhance.unet_stack_channels(Tensor(mag))
        assert vol.shape == (1, 1, 3, 4)
        emb = -mag
        vol2 = enhance.unet_stack_channels(Tensor(mag), Tensor(emb))
        assert vol2.shape == (1, 2, 3, 4)
        np.testing.assert_allclose(vol2.data[0, 1], emb)
        with pytest.raises(ValueError):
            enhance.unet_stack_channels(Tensor(mag), Tensor(mag[:2]))

    def test_gradients_match_finite_differences(self):
        model = tiny_unet(bins=8, dtype=np.float64)
        model.train()
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 1, 16, 8)))
        target = Tensor(rng.random((1, 16, 8)))

        def loss():
            return mse_loss(model(x), target)

        params = dict(model.named_parameters())
        report = grad_check(loss, params, sample=6, rng=np.random.default_rng(0))
        assert report.passed(1e-4), str(report)


class TestChunkedInference:
    def setup_method(self):
        self.model = enhance.UNet(
            in_channels=1, channels=(2, 2, 2, 2), rng=np.random.default_rng(7)
        )
        self.model.eval()

    def test_exact_chunk_matches_direct(self):
        mag = np.random.default_rng(4).random((64, 257)).astype(np.float32)
        out = enhance.unet_forward(self.model, mag)
        with no_grad():
            direct = self.model(enhance.unet_stack_channels(mag)).data[0]
        np.testing.assert_allclose(out, direct, rtol=0, atol=1e-6)

    def test_short_input_pads_and_crops(self):
        mag = np.random.default_rng(5).random((20, 257)).astype(np.float32)
        out = enhance.unet_forward(self.model, mag)
        assert out.shape == (20, 257)

    def test_overlap_averages_chunk_outputs(self):
        t_len = 96
        mag = np.random.default_rng(6).random((t_len, 257)).astype(np.float32)
        out = enhance.unet_forward(self.model, mag)

        vol = enhance.unet_stack_channels(mag)
        with no_grad():
            chunks = {}
            for s in (0, 32):
                key = (slice(None), slice(None), slice(s, s + 64), slice(None))
                chunks[s] = self.model(vol[key]).data[0]
        want = np.zeros((t_len, 257))
        count = np.zeros((t_len, 1))
        for s, chunk in chunks.items():
            want[s : s + 64] += chunk
            count[s : s + 64] += 1
        np.testing.assert_allclose(out, want / count, rtol=0, atol=1e-6)


class TestDdae:
    def test_context_replicates_single_frame(self):
        feats = Tensor(np.arange(5.0).reshape(1, 5))
        ctx = enhance._context_window(feats)
        assert ctx.shape == (1, 25)
        np.testing.assert_allclose(ctx.data, np.tile(np.arange(5.0), 5)[None, :])

    def test_context_interior_is_sliding_window(self):
        t_len, d = 9, 3
        feats = np.arange(t_len * d, dtype=np.float64).reshape(t_len, d)
        ctx = enhance._context_window(Tensor(feats)).data
        for t in range(2, t_len - 2):
            want = feats[t - 2 : t + 3].reshape(-1)
            np.testing.assert_allclose(ctx[t], want)

    def test_context_edges_clip(self):
        t_len, d = 6, 2
        feats = np.arange(t_len * d, dtype=np.float64).reshape(t_len, d)
        ctx = enhance._context_window(Tensor(feats)).data
        want_first = np.concatenate([feats[0], feats[0], feats[0], feats[1], feats[2]])
        want_last = np.concatenate([feats[3], feats[4], feats[5], feats[5], feats[5]])
        np.testing.assert_allclose(ctx[0], want_first)
        np.testing.assert_allclose(ctx[-1], want_last)

    def test_mask_shape_and_range(self):
        model = enhance.Ddae(use_dne=False, hidden=(16, 8), rng=np.random.default_rng(0))
        model.eval()
        mag = np.random.default_rng(1).random((7, 257))
        mask = model(mag)
        assert mask.shape == (7, 257)
        assert np.all((mask.data > 0) & (mask.data < 1))

    def test_batched_equals_stacked(self):
        model = enhance.Ddae(use_dne=False, hidden=(16, 8), rng=np.random.default_rng(0))
        model.eval()
        rng = np.random.default_rng(2)
        a, b = rng.random((6, 257)), rng.random((6, 257))
        single = np.stack([model(a).data, model(b).data])
        batched = model(np.stack([a, b])).data
        np.testing.assert_allclose(batched, single, rtol=0, atol=1e-6)

    def test_embedding_wiring(self):
        model = enhance.Ddae(use_dne=True, hidden=(16, 8), rng=np.random.default_rng(0))
        model.eval()
        rng = np.random.default_rng(3)
        mag, dne = rng.random((5, 257)), rng.random((5, 128))
        assert model(mag, dne).shape == (5, 257)
        with pytest.raises(ValueError):
            model(mag)  # embedding required
        with pytest.raises(ValueError):
            model(mag, rng.random((5, 64)))
        plain = enhance.Ddae(use_dne=False, hidden=(16,), rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            plain(mag, dne)


class TestBlstm:
    def test_mask_shape_and_range(self):
        model = enhance.Blstm(
            use_dne=False, hidden=6, layers=1, head_hidden=5, rng=np.random.default_rng(0)
        )
        mag = np.random.default_rng(1).random((4, 257))
        mask = model(mag)
        assert mask.shape == (4, 257)
        assert np.all((mask.data > 0) & (mask.data < 1))

    def test_gradients_match_finite_differences(self):
        model = enhance.Blstm(
            use_dne=False,
            hidden=4,
            layers=1,
            head_hidden=3,
            rng=np.random.default_rng(2),
            dtype=np.float64,
        )
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 257)))
        target = Tensor(rng.random((3, 257)))

        def loss():
            return mse_loss(model(x), target)

        report = grad_check(loss, dict(model.named_parameters()), sample=5, rng=np.random.default_rng(0))
        assert report.passed(1e-4), str(report)

    def test_last_frame_sees_only_itself_backward(self):
        # the mask comes off the reversed-time stream, so frame T-1 is a
        # function of input frame T-1 alone
        model = enhance.Blstm(
            use_dne=False, hidden=6, layers=1, head_hidden=5, rng=np.random.default_rng(4)
        )
        rng = np.random.default_rng(5)
        x = rng.random((5, 257))
        base = model(x).data[-1].copy()
        x2 = x.copy()
        x2[:-1] += rng.random((4, 257))
        np.testing.assert_allclose(model(x2).data[-1], base, rtol=0, atol=1e-7)


class TestMaskAndReconstruct:
    def test_apply_mask_product(self):
        rng = np.random.default_rng(0)
        mag, mask = rng.random((4, 257)), rng.random((4, 257))
        np.testing.assert_allclose(enhance.apply_mask(mag, mask).data, mag * mask)

    def test_apply_mask_shape_mismatch(self):
        with pytest.raises(ValueError):
            enhance.apply_mask(np.zeros((4, 257)), np.zeros((3, 257)))

    def test_identity_mask_round_trips(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=16256) * 0.1
        spec = dsp.stft(x)
        mag, phase = dsp.split_mag_phase(spec)
        y = enhance.reconstruct(enhance.apply_mask(mag, np.ones_like(mag)), phase, length=len(x))
        np.testing.assert_allclose(y, x, rtol=0, atol=1e-6)

    def test_zero_mask_silences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=8192) * 0.1
        mag, phase = dsp.split_mag_phase(dsp.stft(x))
        y = enhance.reconstruct(enhance.apply_mask(mag, np.zeros_like(mag)), phase, length=len(x))
        assert np.abs(y).max() == 0.0

    def test_uniform_mask_scales_linearly(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=8192) * 0.1
        mag, phase = dsp.split_mag_phase(dsp.stft(x))
        full = enhance.reconstruct(mag, phase, length=len(x))
        half = enhance.reconstruct(enhance.apply_mask(mag, np.full_like(mag, 0.5)), phase, length=len(x))
        np.testing.assert_allclose(half, 0.5 * full, rtol=0, atol=1e-9)
