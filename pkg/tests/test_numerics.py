"""数值基础测试：矩阵运算、层归一化、随机数流"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from loralab.errors import ShapeError
from loralab.numerics import (RngStream, as_matrix, layer_norm, layer_norm_backward, layer_norm_row,
                              log_softmax_rows, matmul, rng_gaussian, rng_uniform, softmax_rows, splitmix64)


class TestMatrixOps:
    def test_matmul_matches_hand_product(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0], [6.0]]
        assert_array_equal(matmul(a, b), [[17.0], [39.0]])

    def test_identity_and_zero(self):
        m = RngStream(1).normal((2, 2))
        assert_array_equal(matmul(np.eye(2), m), m)
        assert_array_equal(matmul(np.zeros((3, 2)), m), np.zeros((3, 2)))

    def test_associativity(self):
        rng = RngStream(2)
        a, b, c = rng.normal((3, 4)), rng.normal((4, 5)), rng.normal((5, 2))
        assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-9, atol=1e-12)

    def test_matmul_rejects_mismatched_inner_dims(self):
        with pytest.raises(ShapeError) as exc:
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        assert exc.value.left == (2, 3)
        assert exc.value.right == (2, 3)

    def test_as_matrix_promotes_vector_to_row(self):
        m = as_matrix([1, 2, 3])
        assert m.shape == (1, 3)
        assert m.dtype == np.float64
        assert m.flags["C_CONTIGUOUS"]

    def test_as_matrix_rejects_rank_three(self):
        with pytest.raises(ShapeError):
            as_matrix(np.zeros((2, 2, 2)))


class TestSoftmax:
    def test_rows_sum_to_one(self):
        m = RngStream(3).normal((5, 7), 4.0)
        assert_allclose(softmax_rows(m).sum(axis=1), np.ones(5), rtol=0, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        p = softmax_rows([[1000.0, 1001.0]])
        assert np.all(np.isfinite(p))
        assert_allclose(p, [[1 / (1 + math.e), math.e / (1 + math.e)]], rtol=1e-14)

    def test_shift_invariance(self):
        m = RngStream(4).normal((3, 4))
        assert_allclose(softmax_rows(m + 123.0), softmax_rows(m), rtol=1e-12)

    def test_log_softmax_consistent(self):
        m = RngStream(5).normal((4, 6), 3.0)
        assert_allclose(np.exp(log_softmax_rows(m)), softmax_rows(m), rtol=1e-12)

    def test_thousand_rows_with_large_magnitudes(self):
        m = (RngStream(6).uniform_array(1000 * 8).reshape(1000, 8) - 0.5) * 100.0
        m[0] = [50.0, -50.0, 50.0, -50.0, 0.0, 0.0, 50.0, -50.0]
        p = softmax_rows(m)
        assert np.all(np.isfinite(p))
        assert_allclose(p.sum(axis=1), np.ones(1000), rtol=0, atol=1e-12)


class TestLayerNorm:
    def test_row_normalizes_to_zero_mean_unit_variance(self):
        y = layer_norm_row([1.0, 2.0, 3.0, 4.0], np.ones(4), np.zeros(4))
        # 总体方差 1.25
        expected = (np.array([1.0, 2.0, 3.0, 4.0]) - 2.5) / math.sqrt(1.25 + 1e-5)
        assert_allclose(y, expected, rtol=1e-14)

    def test_gamma_beta_applied(self):
        y = layer_norm_row([0.0, 2.0], np.array([2.0, 3.0]), np.array([1.0, -1.0]), eps=0.0)
        assert_allclose(y, [-1.0, 2.0], rtol=1e-14)

    def test_two_values_map_to_minus_one_and_one(self):
        assert_allclose(layer_norm_row([1.0, 3.0], np.ones(2), np.zeros(2), eps=0.0), [-1.0, 1.0], rtol=1e-15)
        assert_allclose(layer_norm_row([1.0, 3.0], np.ones(2), np.zeros(2)), [-1.0, 1.0], rtol=1e-5)

    def test_constant_row_collapses_to_zero(self):
        assert_array_equal(layer_norm_row([2.5, 2.5, 2.5], np.ones(3), np.zeros(3)), np.zeros(3))

    def test_zero_gamma_returns_beta(self):
        beta = np.array([0.25, -1.0, 3.0])
        assert_array_equal(layer_norm_row([4.0, -7.0, 1.5], np.zeros(3), beta), beta)

    def test_row_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm_row([1.0, 2.0, 3.0], np.ones(2), np.zeros(3))

    def test_backward_matches_central_differences(self):
        rng = RngStream(9)
        x = rng.normal((2, 3, 5))
        gamma = 1.0 + rng.normal((5,), 0.1)
        beta = rng.normal((5,), 0.1)
        w = rng.normal((2, 3, 5))

        def f(xv):
            return float((layer_norm(xv, gamma, beta)[0] * w).sum())

        _, cache = layer_norm(x, gamma, beta)
        dx, dgamma, dbeta = layer_norm_backward(w, gamma, cache)
        h = 1e-6
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            numeric[idx] = (f(xp) - f(xm)) / (2 * h)
        assert_allclose(dx, numeric, rtol=1e-6, atol=1e-8)
        assert_allclose(dbeta, w.sum(axis=(0, 1)), rtol=1e-12)
        assert dgamma.shape == (5,)


class TestSplitMix64:
    def test_reference_outputs_for_seed_zero(self):
        s = RngStream(0)
        assert_array_equal(s.next_u64(2), np.array([0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4], dtype=np.uint64))

    def test_single_mix_equals_first_stream_output(self):
        for seed in (0, 1, 42, 2 ** 63 + 5):
            assert int(RngStream(seed).next_u64(1)[0]) == splitmix64(seed)

    def test_vectorized_draws_match_one_at_a_time(self):
        bulk = RngStream(77).next_u64(10)
        s = RngStream(77)
        single = np.concatenate([s.next_u64(1) for _ in range(10)])
        assert_array_equal(bulk, single)

    def test_state_wraps_modulo_two_pow_64(self):
        s = RngStream(2 ** 64 - 1)
        s.next_u64(3)
        assert 0 <= s.state < 2 ** 64


class TestRngStream:
    def test_same_seed_same_sequence(self):
        assert_array_equal(RngStream(11).gaussian_array(50), RngStream(11).gaussian_array(50))

    def test_uniform_in_half_open_unit_interval(self):
        u = RngStream(2).uniform_array(10000)
        assert u.min() > 0.0
        assert u.max() <= 1.0

    def test_scalar_helpers_follow_stream(self):
        a, b = RngStream(8), RngStream(8)
        assert rng_uniform(a) == b.uniform_array(1)[0]
        assert rng_gaussian(RngStream(8)) == RngStream(8).gaussian_array(1)[0]

    def test_odd_draw_caches_second_gaussian(self):
        fresh = RngStream(21).gaussian_array(4)
        s = RngStream(21)
        first = s.gaussian_array(3)
        assert s.cached_gaussian is not None
        second = s.gaussian_array(1)
        assert s.cached_gaussian is None
        assert_array_equal(np.concatenate([first, second]), fresh)

    def test_gaussian_moments(self):
        z = RngStream(5).gaussian_array(20000)
        assert abs(z.mean()) < 0.03
        assert abs(z.std() - 1.0) < 0.03

    def test_normal_shape_and_scale(self):
        t = RngStream(6).normal((100, 50), 0.02)
        assert t.shape == (100, 50)
        assert abs(t.std() - 0.02) < 0.002

    def test_permutation_is_a_permutation(self):
        p = RngStream(3).permutation(37)
        assert sorted(p.tolist()) == list(range(37))
        assert_array_equal(p, RngStream(3).permutation(37))

    def test_permutation_trivial_sizes(self):
        assert RngStream(0).permutation(0).size == 0
        assert_array_equal(RngStream(0).permutation(1), [0])

    def test_randint_range(self):
        r = RngStream(4).randint(1000, 3)
        assert set(r.tolist()) == {0, 1, 2}
