import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import casc.nn.autodiff as F
from casc.codec import CodecConfig, SemanticAutoencoder, autoencoder_loss, vq_quantize
from casc.errors import ArgumentError, ConfigurationError
from casc.features import PerceptualFeatureNet, perceptual_distance
from casc.nn import Tensor, no_grad

from util import numeric_grad, ref_conv2d, rel_err

TINY = CodecConfig(base_channels=16, num_res_blocks=1, codebook_size=16, lambda_perceptual=0.0)


@pytest.fixture(scope="module")
def tiny_codec():
    return SemanticAutoencoder(TINY, np.random.default_rng(0))


class TestShapes:
    def test_encode_shape(self, tiny_codec):
        x = np.random.default_rng(1).uniform(-1, 1, size=(4, 32, 32, 3)).astype(np.float32)
        z = tiny_codec.encode(x)
        assert z.shape == (4, 8, 8, TINY.c_lat)

    def test_encode_zero_image_finite(self, tiny_codec):
        z = tiny_codec.encode(np.zeros((1, 32, 32, 3), dtype=np.float32))
        assert np.isfinite(z).all()

    def test_decode_shape(self, tiny_codec):
        z = np.random.default_rng(2).normal(size=(4, 8, 8, TINY.c_lat)).astype(np.float32)
        x = tiny_codec.decode(z)
        assert x.shape == (4, 32, 32, 3)

    def test_decode_clamped(self, tiny_codec):
        z = np.random.default_rng(3).normal(size=(2, 8, 8, TINY.c_lat)).astype(np.float32) * 50
        x = tiny_codec.decode(z)
        assert np.all(x >= -1.0) and np.all(x <= 1.0)

    def test_roundtrip_untrained_valid(self, tiny_codec):
        x = np.random.default_rng(4).uniform(-1, 1, size=(2, 32, 32, 3)).astype(np.float32)
        out = tiny_codec.decode(tiny_codec.encode(x))
        assert out.shape == x.shape
        assert np.isfinite(out).all()
        assert np.all(np.abs(out) <= 1.0)

    @pytest.mark.parametrize("hw", [16, 32, 48])
    def test_shape_roundtrip_property(self, tiny_codec, hw):
        x = np.random.default_rng(hw).uniform(-1, 1, size=(1, hw, hw, 3)).astype(np.float32)
        assert tiny_codec.decode(tiny_codec.encode(x)).shape == x.shape

    def test_encode_rejects_bad_shapes(self, tiny_codec):
        with pytest.raises(ConfigurationError):
            tiny_codec.encode(np.zeros((1, 30, 30, 3), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            tiny_codec.encode(np.zeros((1, 32, 32, 4), dtype=np.float32))

    def test_decode_rejects_bad_channels(self, tiny_codec):
        with pytest.raises(ConfigurationError):
            tiny_codec.decode(np.zeros((1, 8, 8, TINY.c_lat + 1), dtype=np.float32))


class TestVectorQuantizer:
    def test_exact_match_zero_loss(self):
        cb = np.array([[0.0, 0.0], [1.0, 1.0]])
        z = np.array([[[[1.0, 1.0]]]])
        zq, loss, idx = vq_quantize(z, cb)
        np.testing.assert_array_equal(np.asarray(zq), z)
        assert float(loss if not hasattr(loss, "item") else loss.item()) == 0.0
        assert idx.ravel()[0] == 1

    def test_nearest_by_inspection(self):
        cb = np.array([[0.0, 0.0], [1.0, 1.0]])
        z = np.array([[[[0.9, 0.8]]]])
        zq, _, idx = vq_quantize(z, cb)
        np.testing.assert_array_equal(np.asarray(zq), np.array([[[[1.0, 1.0]]]]))
        assert idx.ravel()[0] == 1

    def test_bruteforce_oracle_100_vectors(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(100, 1, 1, 4))
        cb = rng.normal(size=(16, 4))
        _, _, idx = vq_quantize(z, cb)
        flat = z.reshape(-1, 4)
        brute = np.array([min(range(16), key=lambda k: float(np.sum((v - cb[k]) ** 2))) for v in flat])
        np.testing.assert_array_equal(idx.ravel(), brute)

    def test_empty_codebook_rejected(self):
        with pytest.raises(ConfigurationError):
            vq_quantize(np.zeros((1, 1, 1, 4)), np.zeros((0, 4)))

    def test_straight_through_gradient_is_identity(self):
        rng = np.random.default_rng(6)
        cb = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        z = Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
        zq, _, _ = vq_quantize(z, cb)
        upstream = rng.normal(size=zq.shape)
        F.sum_(F.mul(zq, upstream)).backward()
        np.testing.assert_allclose(z.grad, upstream)

    @settings(deadline=None, max_examples=25)
    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=1, max_value=12),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    def test_property_quantized_vectors_are_codebook_rows(self, n, k, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, 1, 1, 3))
        cb = rng.normal(size=(k, 3))
        zq, _, idx = vq_quantize(z, cb)
        np.testing.assert_array_equal(np.asarray(zq).reshape(-1, 3), cb[idx.ravel()])

    def test_codebook_receives_gradient_from_loss(self):
        rng = np.random.default_rng(7)
        cb = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        z = Tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
        _, vq_loss, _ = vq_quantize(z, cb)
        vq_loss.backward()
        assert cb.grad is not None and np.any(cb.grad != 0)
        assert z.grad is not None and np.any(z.grad != 0)


def ref_perceptual(x, x_hat, net: PerceptualFeatureNet) -> float:
    """Independent recomputation of the perceptual term via scipy convolutions."""

    def taps(img):
        h = img.astype(np.float64)
        out = []
        for conv in net.stages:
            h = ref_conv2d(h, conv.weight.data, conv.bias.data, stride=conv.stride, padding=conv.padding)
            h = np.maximum(h, 0)
            out.append(h)
        return out

    total = 0.0
    for a, b in zip(taps(x), taps(x_hat)):
        na = a / np.sqrt(np.sum(a**2, axis=-1, keepdims=True) + 1e-10)
        nb = b / np.sqrt(np.sum(b**2, axis=-1, keepdims=True) + 1e-10)
        total += np.mean(np.sum((na - nb) ** 2, axis=-1), axis=(1, 2))
    return float(np.mean(total))


class TestAutoencoderLoss:
    def test_identity_is_zero(self):
        x = np.random.default_rng(8).uniform(-1, 1, size=(2, 8, 8, 3)).astype(np.float32)
        cfg = CodecConfig(base_channels=16, lambda_perceptual=1.0)
        loss = autoencoder_loss(x, x.copy(), 0.0, cfg)
        assert float(np.asarray(loss)) == 0.0

    def test_constant_difference_mae(self):
        x = np.ones((2, 4, 4, 3), dtype=np.float32)
        cfg = CodecConfig(base_channels=16, lambda_perceptual=0.0)
        loss = autoencoder_loss(x, -x, 0.0, cfg)
        assert float(np.asarray(loss)) == pytest.approx(2.0, abs=1e-7)

    def test_random_pair_matches_reference_terms(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, size=(2, 16, 16, 3))
        x_hat = rng.uniform(-1, 1, size=(2, 16, 16, 3))
        net = PerceptualFeatureNet(np.random.default_rng(1), widths=(4, 8), dtype=np.float64)
        cfg = CodecConfig(base_channels=16, lambda_perceptual=0.7, lambda_vq=1.3)
        commitment = 0.42
        loss = float(np.asarray(autoencoder_loss(x, x_hat, commitment, cfg, feature_net=net)))
        expected = float(np.mean(np.abs(x - x_hat))) + 0.7 * ref_perceptual(x, x_hat, net) + 1.3 * commitment
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, size=(1, 8, 8, 3))
        y = rng.uniform(-1, 1, size=(1, 8, 8, 3))
        assert float(np.asarray(autoencoder_loss(x, y, 0.1, CodecConfig(base_channels=16)))) >= 0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ArgumentError):
            autoencoder_loss(np.zeros((1, 8, 8, 3)), np.zeros((1, 4, 4, 3)), 0.0, CodecConfig(base_channels=16))

    def test_adversarial_flag_rejected(self):
        cfg = CodecConfig(base_channels=16, use_adversarial_term=True)
        with pytest.raises(ConfigurationError):
            autoencoder_loss(np.zeros((1, 8, 8, 3)), np.zeros((1, 8, 8, 3)), 0.0, cfg)

    def test_perceptual_symmetry(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, size=(2, 8, 8, 3))
        y = rng.uniform(-1, 1, size=(2, 8, 8, 3))
        net = PerceptualFeatureNet(np.random.default_rng(2), widths=(4, 8))
        assert float(np.asarray(perceptual_distance(x, y, net))) == pytest.approx(
            float(np.asarray(perceptual_distance(y, x, net))), abs=1e-9
        )


class TestGradients:
    def test_reconstruction_gradient_wrt_latent_straight_through(self):
        # Quantization is piecewise constant, so the check differentiates the
        # straight-through surrogate: decoder(z + frozen_offset), whose analytic
        # gradient equals the one our backward pass reports through vq_quantize.
        cfg = CodecConfig(base_channels=8, num_res_blocks=1, codebook_size=4, lambda_perceptual=0.0)
        model = SemanticAutoencoder(cfg, np.random.default_rng(3), dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=(1, 8, 8, 3))
        z0 = np.asarray(model.encode(x))

        zt = Tensor(z0.copy(), requires_grad=True)
        zq, _, _ = vq_quantize(zt, model.codebook)
        recon = F.mean(F.absolute(F.sub(model.decoder(zq), x)))
        recon.backward()

        flat = z0.reshape(-1, cfg.c_lat)
        from casc import kernels

        idx = kernels.nearest_code(flat, model.codebook.data)
        offset = (model.codebook.data[idx] - flat).reshape(z0.shape)

        def f():
            with no_grad():
                out = model.decoder(Tensor(z0 + offset))
                return float(np.mean(np.abs(out.data - x)))

        probe = list(rng.choice(z0.size, size=12, replace=False))
        num = numeric_grad(f, z0, indices=probe, eps=1e-6)
        ana = np.zeros_like(num)
        ana.reshape(-1)[probe] = zt.grad.reshape(-1)[probe]
        assert rel_err(ana.reshape(-1)[probe], num.reshape(-1)[probe]) < 1e-3

    def test_reconstruction_gradient_wrt_weights(self):
        cfg = CodecConfig(base_channels=8, num_res_blocks=1, codebook_size=4, lambda_perceptual=0.0)
        model = SemanticAutoencoder(cfg, np.random.default_rng(5), dtype=np.float64)
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, size=(1, 8, 8, 3))

        def loss_tensor():
            z = model.encoder(Tensor(x))
            return F.mean(F.absolute(F.sub(model.decoder(z), x)))

        loss = loss_tensor()
        loss.backward()

        def f():
            with no_grad():
                return float(loss_tensor().data)

        params = dict(model.named_parameters())
        for name in ("encoder.conv_in.weight", "decoder.conv_out.weight", "decoder.mid.0.conv1.bias"):
            p = params[name]
            probe = list(np.random.default_rng(7).choice(p.data.size, size=min(4, p.data.size), replace=False))
            num = numeric_grad(f, p.data, indices=probe, eps=1e-6)
            assert rel_err(p.grad.reshape(-1)[probe], num.reshape(-1)[probe]) < 1e-3
