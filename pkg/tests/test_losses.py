import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mamba_st.losses import (FeatureExtractor, IdentityExtractor, LossComponents, LossWeights,
                             channel_moments, content_loss, identity_losses, identity_terms, style_loss,
                             total_loss)
from mamba_st.tensor import Tensor

images = hnp.arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1))


@pytest.fixture(scope="module")
def fx():
    return FeatureExtractor.seeded(0, channels=(4, 8, 8, 8))


def components(*values):
    return LossComponents(*(Tensor(float(v)) for v in values))


class TestExtractor:
    def test_taps_and_shapes(self, fx):
        taps = fx(Tensor(np.zeros((3, 16, 16))))
        assert fx.n_taps == 4
        assert [t.shape for t in taps] == [(4, 16, 16), (8, 8, 8), (8, 4, 4), (8, 2, 2)]

    def test_frozen(self, fx):
        assert fx.num_parameters() == 0

    def test_seeded_is_deterministic(self):
        a, b = FeatureExtractor.seeded(3), FeatureExtractor.seeded(3)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a.weights, b.weights))
        assert a.provenance == "seeded-random"

    def test_external_weights_round_trip(self, tmp_path, fx):
        fx.save(tmp_path / "fx.ckpt")
        loaded = FeatureExtractor.from_checkpoint(tmp_path / "fx.ckpt")
        assert loaded.provenance == "external-weights"
        img = Tensor(np.random.default_rng(0).uniform(size=(3, 8, 8)))
        for a, b in zip(fx(img), loaded(img)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_needs_a_tap(self):
        with pytest.raises(ValueError):
            FeatureExtractor([], [])


class TestContentLoss:
    def test_zero_on_equal(self, fx):
        x = np.random.default_rng(0).uniform(size=(3, 8, 8))
        assert content_loss(x, x, fx).item() == 0.0

    @given(images, images)
    def test_symmetric_and_nonnegative(self, a, b):
        ident = IdentityExtractor()
        ab, ba = content_loss(a, b, ident).item(), content_loss(b, a, ident).item()
        assert ab == ba >= 0.0

    def test_constant_offset_two(self):
        a = np.full((3, 4, 4), 2.5)
        assert content_loss(a, a - 2.0, IdentityExtractor()).item() == pytest.approx(4.0)


class TestStyleLoss:
    def test_zero_on_equal(self, fx):
        x = np.random.default_rng(1).uniform(size=(3, 8, 8))
        assert style_loss(x, x, fx).item() == 0.0

    @given(images, st.randoms(use_true_random=False))
    def test_spatial_permutation_invariant(self, img, random):
        perm = list(range(16))
        random.shuffle(perm)
        shuffled = img.reshape(3, 16)[:, perm].reshape(3, 4, 4)
        assert style_loss(img, shuffled, IdentityExtractor()).item() == pytest.approx(0.0, abs=1e-14)

    def test_constant_maps(self):
        loss = style_loss(np.ones((3, 4, 4)), np.full((3, 4, 4), 3.0), IdentityExtractor())
        assert loss.item() == pytest.approx(4.0)

    def test_moments_use_population_std(self):
        mu, sd = channel_moments(Tensor(np.array([[[0.0, 2.0]]])))
        assert mu.item() == 1.0
        assert sd.item() == pytest.approx(np.sqrt(1.0 + 1e-6))

    def test_grad_through_moments(self, fx):
        from mamba_st.gradcheck import grad_check_fd
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(size=(3, 8, 8)), requires_grad=True)
        s = rng.uniform(size=(3, 8, 8))
        assert grad_check_fd(lambda: style_loss(x, s, fx), [x], max_coords=40) < 1e-6


class TestIdentityLosses:
    def test_perfect_identity_model(self, fx):
        rng = np.random.default_rng(3)
        x_c, x_s = rng.uniform(size=(2, 3, 8, 8))
        perfect = lambda content, style, seed, shuffle: Tensor(content)
        id1, id2 = identity_losses(perfect, x_c, x_s, fx)
        assert id1.item() == 0.0 and id2.item() == 0.0

    @given(images, images)
    def test_nonnegative(self, a, b):
        id1, id2 = identity_terms(Tensor(b), a, Tensor(a), b, IdentityExtractor())
        assert id1.item() >= 0.0 and id2.item() >= 0.0

    def test_uses_both_reconstructions(self):
        x_c, x_s = np.zeros((3, 2, 2)), np.ones((3, 2, 2))
        id1, _ = identity_terms(Tensor(x_c + 1.0), x_c, Tensor(x_s), x_s, IdentityExtractor())
        assert id1.item() == 1.0


class TestTotalLoss:
    def test_default_weights_sum(self):
        assert total_loss(components(1, 1, 1, 1)).item() == 88.0

    def test_zero_weights(self):
        assert total_loss(components(3, 4, 5, 6), LossWeights(0, 0, 0, 0)).item() == 0.0

    @given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
    def test_linear(self, values):
        once = total_loss(components(*values)).item()
        twice = total_loss(components(*(2 * v for v in values))).item()
        assert twice == pytest.approx(2 * once)

    def test_nan_component_named(self):
        with pytest.raises(ValueError, match="style"):
            total_loss(components(1, float("nan"), 1, 1))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="id2"):
            LossWeights(id2=-1.0)
