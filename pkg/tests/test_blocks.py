import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mamba_st.blocks import (CNNDecoderParams, EncoderLayerParams, MSTDLayerParams, PatchEmbedParams,
                             VSSMBlockParams, base_vssm, cnn_decode, depatchify, encoder_layer,
                             map_to_tokens, mstd_layer, patch_embed, shuffle_style, st_vssm,
                             tokens_to_map)
from mamba_st.functional import ConfigurationError
from mamba_st.gradcheck import grad_check_fd
from mamba_st.scan2d import PatchSeq
from mamba_st.tensor import ShapeError, Tensor

D_MODEL = 6


@pytest.fixture
def block(rng):
    return VSSMBlockParams(D_MODEL, 3, 2, 4, rng)


@pytest.fixture
def seq(rng):
    return PatchSeq(Tensor(rng.normal(size=(9, D_MODEL))), (3, 3))


def zero_skip(block):
    for p in block.ssm:
        p.D_skip.data = np.zeros_like(p.D_skip.data)


class TestLayout:
    def test_tokens_map_round_trip(self, rng):
        tokens = rng.normal(size=(2, 6, 4))
        fmap = tokens_to_map(Tensor(tokens), (2, 3))
        assert fmap.shape == (2, 4, 2, 3)
        np.testing.assert_array_equal(fmap.data[1, :, 1, 2], tokens[1, 5])
        np.testing.assert_array_equal(map_to_tokens(fmap).data, tokens)


class TestBaseVSSM:
    def test_shape_preserved(self, block, seq):
        assert base_vssm(seq, block).tokens.shape == (9, D_MODEL)

    def test_zero_input_zero_output(self, block):
        out = base_vssm(PatchSeq(Tensor(np.zeros((9, D_MODEL))), (3, 3)), block)
        assert not out.tokens.data.any()

    def test_width_checked(self, block):
        with pytest.raises(ShapeError):
            base_vssm(PatchSeq(Tensor(np.ones((4, D_MODEL + 1))), (2, 2)), block)

    def test_grads(self, rng):
        block = VSSMBlockParams(3, 2, 2, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = rng.normal(size=(4, 3))
        f = lambda: (base_vssm(PatchSeq(x, (2, 2)), block).tokens * w).sum()
        params = [x] + [p for _, p in block.named_parameters()]
        assert grad_check_fd(f, params) <= 1e-6


class TestSTVSSM:
    def test_equals_base_on_self_without_skip(self, block, seq):
        zero_skip(block)
        diff = st_vssm(seq, seq, block).tokens.data - base_vssm(seq, block).tokens.data
        assert np.abs(diff).max() <= 1e-12

    def test_differs_from_base_with_skip(self, block, seq):
        diff = st_vssm(seq, seq, block).tokens.data - base_vssm(seq, block).tokens.data
        assert np.abs(diff).max() > 1e-8

    def test_zero_content_zero_output(self, block, seq):
        zero = PatchSeq(Tensor(np.zeros((9, D_MODEL))), (3, 3))
        assert not st_vssm(zero, seq, block).tokens.data.any()

    def test_zero_style_zero_output(self, block, seq):
        zero = PatchSeq(Tensor(np.zeros((9, D_MODEL))), (3, 3))
        assert not st_vssm(seq, zero, block).tokens.data.any()

    def test_grid_mismatch(self, block, rng):
        a = PatchSeq(Tensor(rng.normal(size=(6, D_MODEL))), (2, 3))
        b = PatchSeq(Tensor(rng.normal(size=(6, D_MODEL))), (3, 2))
        with pytest.raises(ShapeError):
            st_vssm(a, b, block)

    def test_grads_both_streams(self, rng):
        block = VSSMBlockParams(3, 2, 2, 4, rng)
        c = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        s = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = rng.normal(size=(4, 3))
        f = lambda: (st_vssm(PatchSeq(c, (2, 2)), PatchSeq(s, (2, 2)), block).tokens * w).sum()
        assert grad_check_fd(f, [c, s, block.in_x_w, block.conv, block.ssm[2].W_delta]) <= 1e-6


class TestShuffle:
    @given(st.integers(1, 40), st.integers(0, 2**31 - 1))
    def test_multiset_and_inverse(self, n, seed):
        tokens = np.random.default_rng(n).normal(size=(n, 3))
        shuffled, plan = shuffle_style(PatchSeq(Tensor(tokens), (1, n)), seed)
        s = shuffled.tokens.data
        np.testing.assert_array_equal(np.sort(s, axis=0), np.sort(tokens, axis=0))
        np.testing.assert_array_equal(s[plan.inverse()], tokens)

    def test_same_seed_same_permutation(self, seq):
        _, a = shuffle_style(seq, 11)
        _, b = shuffle_style(seq, 11)
        np.testing.assert_array_equal(a.permutation, b.permutation)

    def test_batch_shares_permutation(self, rng):
        tokens = rng.normal(size=(2, 6, 3))
        shuffled, plan = shuffle_style(PatchSeq(Tensor(tokens), (2, 3)), 5)
        np.testing.assert_array_equal(shuffled.tokens.data, tokens[:, plan.permutation])


class TestLayers:
    def test_encoder_identity_when_branch_is_zero(self, rng, seq):
        params = EncoderLayerParams(D_MODEL, 3, 2, 4, rng)
        params.block.in_z_w.data = np.zeros_like(params.block.in_z_w.data)   # gate SiLU(0) = 0
        np.testing.assert_array_equal(encoder_layer(seq, params).tokens.data, seq.tokens.data)

    def test_three_encoder_layers_keep_shape(self, rng, seq):
        out = seq
        for _ in range(3):
            out = encoder_layer(out, EncoderLayerParams(D_MODEL, 3, 2, 4, rng))
        assert out.tokens.shape == seq.tokens.shape and out.grid == seq.grid

    def test_mstd_zero_style_passes_content(self, rng, seq):
        params = MSTDLayerParams(D_MODEL, 3, 2, 4, rng)
        zero = PatchSeq(Tensor(np.zeros((9, D_MODEL))), (3, 3))
        np.testing.assert_array_equal(mstd_layer(seq, zero, params, seed=3).tokens.data, seq.tokens.data)

    def test_mstd_deterministic(self, rng, seq):
        params = MSTDLayerParams(D_MODEL, 3, 2, 4, rng)
        style = PatchSeq(Tensor(rng.normal(size=(9, D_MODEL))), (3, 3))
        a = mstd_layer(seq, style, params, seed=9).tokens.data
        b = mstd_layer(seq, style, params, seed=9).tokens.data
        np.testing.assert_array_equal(a, b)

    def test_mstd_equals_encoder_on_self(self, rng, seq):
        params = MSTDLayerParams(D_MODEL, 3, 2, 4, rng)
        zero_skip(params.block)
        a = mstd_layer(seq, seq, params, shuffle=False).tokens.data
        b = encoder_layer(seq, params).tokens.data
        assert np.abs(a - b).max() <= 1e-12

    def test_mstd_skip_is_frozen(self, rng):
        params = MSTDLayerParams(D_MODEL, 3, 2, 4, rng)
        names = [n for n, _ in params.named_parameters()]
        assert not any("D_skip" in n for n in names)
        assert any("D_skip" in n for n, _ in params.named_tensors(frozen=True))

    def test_mstd_shuffle_needs_seed(self, rng, seq):
        with pytest.raises(ValueError, match="seed"):
            mstd_layer(seq, seq, MSTDLayerParams(D_MODEL, 3, 2, 4, rng))


class TestPatchEmbed:
    def test_grid_arithmetic(self, rng):
        out = patch_embed(Tensor(rng.uniform(size=(3, 16, 16))), PatchEmbedParams(8, 5, rng))
        assert out.grid == (2, 2) and out.tokens.shape == (4, 5)

    def test_zero_image_zero_tokens(self, rng):
        out = patch_embed(Tensor(np.zeros((3, 8, 8))), PatchEmbedParams(4, 5, rng))
        assert not out.tokens.data.any()

    def test_identity_projection_exposes_raw_patches(self, rng):
        p = 2
        proj = PatchEmbedParams(p, 3 * p * p, rng)
        proj.weight.data = np.eye(3 * p * p)
        img = rng.uniform(size=(3, 4, 6))
        out = patch_embed(Tensor(img), proj)
        assert out.grid == (2, 3)
        # token 4 is row 1, column 1 in raster order
        np.testing.assert_array_equal(out.tokens.data[4], img[:, 2:4, 2:4].reshape(-1))

    def test_non_divisible_rejected_with_crop_hint(self, rng):
        with pytest.raises(ShapeError, match="center-crop to 16x8"):
            patch_embed(Tensor(np.zeros((3, 17, 12))), PatchEmbedParams(8, 4, rng))

    def test_batched(self, rng):
        proj = PatchEmbedParams(4, 5, rng)
        imgs = rng.uniform(size=(2, 3, 8, 12))
        batched = patch_embed(Tensor(imgs), proj).tokens.data
        np.testing.assert_allclose(batched[1], patch_embed(Tensor(imgs[1]), proj).tokens.data)


class TestDepatchify:
    def test_shape_and_round_trip(self, rng):
        tokens = rng.normal(size=(4, 5))
        fmap = depatchify(PatchSeq(Tensor(tokens), (2, 2)))
        assert fmap.shape == (5, 2, 2)
        np.testing.assert_array_equal(map_to_tokens(fmap).data, tokens)

    def test_constant_tokens_constant_map(self):
        fmap = depatchify(PatchSeq(Tensor(np.tile([1.0, 2.0], (6, 1))), (2, 3))).data
        np.testing.assert_array_equal(fmap[0], 1.0)
        np.testing.assert_array_equal(fmap[1], 2.0)


class TestCNNDecoder:
    def test_upsamples_by_patch_size(self, rng):
        params = CNNDecoderParams(16, 8, rng)
        out = cnn_decode(Tensor(rng.normal(size=(16, 2, 3))), params)
        assert out.shape == (3, 16, 24)
        assert params.stages == 3

    def test_zero_weights_give_black(self, rng):
        params = CNNDecoderParams(8, 4, rng)
        for t in params.weights + params.biases:
            t.data = np.zeros_like(t.data)
        assert not cnn_decode(Tensor(rng.normal(size=(8, 2, 2))), params).data.any()

    @given(st.floats(0.1, 100.0))
    def test_output_in_unit_range(self, scale):
        rng = np.random.default_rng(0)
        params = CNNDecoderParams(8, 4, rng)
        out = cnn_decode(Tensor(scale * rng.normal(size=(8, 2, 2))), params).data
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_config_errors(self, rng):
        with pytest.raises(ConfigurationError):
            CNNDecoderParams(16, 6, rng)
        with pytest.raises(ConfigurationError):
            CNNDecoderParams(4, 8, rng)

    def test_channel_check(self, rng):
        with pytest.raises(ShapeError):
            cnn_decode(Tensor(np.ones((4, 2, 2))), CNNDecoderParams(8, 2, rng))
