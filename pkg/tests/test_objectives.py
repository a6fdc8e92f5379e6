"""Tests for hinge losses, confidence weighting, Adam, orthogonal init,
spectral normalization, and the frozen feature extractor."""

import numpy as np
import pytest

from layoutgan import autodiff as ad
from layoutgan import objectives as obj


def scalar(v):
    return ad.tensor(np.array(v, dtype=np.float64))


class TestHinge:
    def test_real_beyond_margin(self):
        assert obj.hinge_term(scalar(2.0), is_real=True).item() == 0.0

    def test_real_inside_margin(self):
        assert obj.hinge_term(scalar(0.5), is_real=True).item() == 0.5

    def test_fake_beyond_margin(self):
        assert obj.hinge_term(scalar(-3.0), is_real=False).item() == 0.0

    def test_fake_inside_margin(self):
        assert obj.hinge_term(scalar(0.5), is_real=False).item() == 1.5

    def test_nonnegative_on_random_scores(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = scalar(rng.normal(scale=3))
            assert obj.hinge_term(p, True).item() >= 0.0
            assert obj.hinge_term(p, False).item() >= 0.0

    def test_subgradient_zero_at_kink(self):
        p = ad.tensor(np.array(1.0), requires_grad=True)
        with ad.Tape():
            loss = obj.hinge_term(p, is_real=True)
            ad.backward(loss)
        assert p.grad == 0.0


class TestCombined:
    def test_hand_arithmetic(self):
        # image hinge 1 (p=0, real), object hinges 0.4 and 0.6
        loss = obj.combined_adv(scalar(0.0), [scalar(0.6), scalar(0.4)],
                                lam=0.1, is_real=True)
        np.testing.assert_allclose(loss.item(), 0.6, rtol=1e-12)

    def test_no_objects_keeps_image_term_only(self):
        loss = obj.combined_adv(scalar(0.0), [], lam=0.1, is_real=True)
        np.testing.assert_allclose(loss.item(), 0.1, rtol=1e-12)

    def test_all_beyond_margin_is_zero(self):
        loss = obj.combined_adv(scalar(5.0), [scalar(2.0), scalar(3.0)],
                                lam=0.1, is_real=True)
        assert loss.item() == 0.0


class TestSemiWeighted:
    def test_unit_confidences_bit_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            m = int(rng.integers(0, 5))
            p_img = scalar(rng.normal())
            p_obj = [scalar(rng.normal()) for _ in range(m)]
            a = obj.combined_adv(p_img, p_obj, lam=0.1, is_real=True)
            b = obj.semi_weighted_adv(p_img, p_obj, [1.0] * m,
                                      lam=0.1, is_real=True)
            assert a.item() == b.item()  # bitwise, not approximate

    def test_half_confidence_weighting(self):
        # object hinges both 1 (scores 0, real); weights 0.5 and 1
        loss = obj.semi_weighted_adv(scalar(1.0), [scalar(0.0), scalar(0.0)],
                                     [0.5, 1.0], lam=0.1, is_real=True)
        np.testing.assert_allclose(loss.item(), 0.75, rtol=1e-12)

    def test_below_threshold_rejected(self):
        with pytest.raises(ad.ContractError, match="0.4"):
            obj.semi_weighted_adv(scalar(0.0), [scalar(0.0)], [0.4],
                                  lam=0.1, is_real=True, tau=0.5)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ad.DimensionError):
            obj.semi_weighted_adv(scalar(0.0), [scalar(0.0)], [1.0, 1.0],
                                  lam=0.1, is_real=True)


class TestGeneratorScore:
    def test_hand_arithmetic(self):
        s = obj.generator_adv_score(scalar(2.0), [scalar(3.0)], lam=0.1)
        np.testing.assert_allclose(s.item(), 3.2, rtol=1e-12)
        np.testing.assert_allclose(ad.neg(s).item(), -3.2, rtol=1e-12)

    def test_empty_objects(self):
        s = obj.generator_adv_score(scalar(2.0), [], lam=0.1)
        np.testing.assert_allclose(s.item(), 0.2, rtol=1e-12)


class TestL1Mean:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(4)
        a = ad.tensor(rng.standard_normal((2, 3, 4, 4)))
        assert obj.l1_mean(a, a).item() == 0.0

    def test_known_value(self):
        a = ad.tensor(np.zeros(4))
        b = ad.tensor(np.array([1.0, -1.0, 2.0, 0.0]))
        np.testing.assert_allclose(obj.l1_mean(a, b).item(), 1.0)


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = ad.tensor(np.ones(3), requires_grad=True)
        state = obj.AdamState()
        obj.adam_step({"p": p}, state, lr=1e-2)
        np.testing.assert_array_equal(p.data, np.ones(3))
        assert state.t == 1

    def test_first_step_magnitude(self):
        # beta1=0: first update is -lr * g / (sqrt(ghat^2) + eps) ~ -lr
        p = ad.tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = obj.AdamState()
        obj.adam_step({"p": p}, state, lr=1e-4)
        np.testing.assert_allclose(p.data[0], -1e-4 / (1 + 1e-8), rtol=1e-12)

    def test_descends_quadratic(self):
        p = ad.tensor(np.array([3.0]), requires_grad=True)
        state = obj.AdamState()
        losses = []
        for _ in range(200):
            p.grad = 2.0 * p.data  # d/dp of p^2
            obj.adam_step({"p": p}, state, lr=1e-2)
            losses.append(float(p.data[0] ** 2))
        assert losses[-1] < losses[0] * 0.5
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_update_opposes_gradient(self):
        rng = np.random.default_rng(6)
        p = ad.tensor(rng.standard_normal(16), requires_grad=True)
        g = rng.standard_normal(16)
        g[g == 0] = 1.0
        before = p.data.copy()
        p.grad = g.copy()
        obj.adam_step({"p": p}, obj.AdamState(), lr=1e-3)
        delta = p.data - before
        assert np.all(np.sign(delta) == -np.sign(g))

    def test_shape_mismatch_rejected(self):
        p = ad.tensor(np.ones(3), requires_grad=True)
        p.grad = np.ones(4)
        with pytest.raises(ad.DimensionError):
            obj.adam_step({"p": p}, obj.AdamState())

    def test_negative_weight_rejected(self):
        with pytest.raises(ad.ContractError):
            obj.LossConfig(lam=-0.1)


class TestOrthogonalInit:
    def test_square_orthonormal(self):
        q = obj.orthogonal_init((6, 6), np.random.default_rng(1))
        np.testing.assert_allclose(q.T @ q, np.eye(6), atol=1e-10)

    def test_wide_rows_orthonormal(self):
        q = obj.orthogonal_init((3, 8), np.random.default_rng(2))
        assert q.shape == (3, 8)
        np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-10)

    def test_tall_columns_orthonormal(self):
        q = obj.orthogonal_init((8, 3), np.random.default_rng(3))
        assert q.shape == (8, 3)
        np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-10)

    def test_same_seed_identical(self):
        a = obj.orthogonal_init((5, 7), np.random.default_rng(42))
        b = obj.orthogonal_init((5, 7), np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_conv_kernel_flat_orthogonal(self):
        k = obj.conv_orthogonal((4, 3, 3, 3), np.random.default_rng(4))
        flat = k.reshape(4, -1)
        np.testing.assert_allclose(flat @ flat.T, np.eye(4), atol=1e-10)


class TestSpectralNorm:
    def test_diagonal_matrix_normalized(self):
        w = ad.tensor(np.diag([3.0, 1.0]), requires_grad=True)
        u = np.array([0.8, 0.6])
        for _ in range(25):
            wbar, u = obj.spectral_normalize(w, u)
        np.testing.assert_allclose(wbar.data, np.diag([1.0, 1.0 / 3.0]),
                                   rtol=1e-6)
        assert abs(obj.estimate_sigma_max(wbar.data) - 1.0) < 1e-6

    def test_orthogonal_unchanged(self):
        q = obj.orthogonal_init((5, 5), np.random.default_rng(7))
        w = ad.tensor(q)
        u = np.random.default_rng(8).standard_normal(5)
        for _ in range(30):
            wbar, u = obj.spectral_normalize(w, u)
        np.testing.assert_allclose(wbar.data, q, atol=1e-4)

    def test_zero_matrix_guarded(self):
        w = ad.tensor(np.zeros((3, 3)))
        wbar, _ = obj.spectral_normalize(w, np.ones(3))
        np.testing.assert_array_equal(wbar.data, np.zeros((3, 3)))

    def test_conv_kernel_normalized(self):
        rng = np.random.default_rng(9)
        w = ad.tensor(2.5 * obj.conv_orthogonal((4, 2, 3, 3), rng))
        u = rng.standard_normal(4)
        for _ in range(30):
            wbar, u = obj.spectral_normalize(w, u)
        assert abs(obj.estimate_sigma_max(wbar.data) - 1.0) < 1e-3

    def test_no_update_keeps_state(self):
        rng = np.random.default_rng(10)
        w = ad.tensor(rng.standard_normal((4, 4)))
        u = rng.standard_normal(4)
        _, u2 = obj.spectral_normalize(w, u, update=False)
        np.testing.assert_array_equal(u, u2)

    def test_gradient_through_division(self):
        # With update=False the normalized weight is a pure function of w.
        rng = np.random.default_rng(11)
        w = ad.tensor(rng.standard_normal((3, 4)), requires_grad=True)
        u = obj._l2_normalize(rng.standard_normal(3))

        def f(t):
            wbar, _ = obj.spectral_normalize(t, u, update=False)
            return ad.sum_(ad.mul(wbar, wbar))

        assert ad.grad_check(f, w) < 1e-5

    def test_estimate_matches_numpy_svd(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            w = rng.standard_normal((6, 9))
            est = obj.estimate_sigma_max(w, n_iters=100)
            true = np.linalg.svd(w, compute_uv=False)[0]
            np.testing.assert_allclose(est, true, rtol=1e-6)


class TestFrozenExtractor:
    def test_deterministic_across_instances(self):
        rng = np.random.default_rng(13)
        x = ad.tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
        a = obj.FrozenExtractor().flat_features(x)
        b = obj.FrozenExtractor().flat_features(x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_feature_width(self):
        x = ad.tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        feats = obj.FrozenExtractor().flat_features(x)
        # 8*16*16 + 16*8*8 + 32*4*4 = 3584
        assert feats.shape == (1, 3584)

    def test_perceptual_zero_on_identical(self):
        rng = np.random.default_rng(14)
        x = ad.tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        assert obj.FrozenExtractor().perceptual_l1(x, x).item() == 0.0

    def test_perceptual_positive_on_different(self):
        rng = np.random.default_rng(15)
        a = ad.tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        b = ad.tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        assert obj.FrozenExtractor().perceptual_l1(a, b).item() > 0.0
