"""Numeric primitives against direct-evaluation oracles."""

import json
import math

import numpy as np
import pytest

from dgattn.tensors import (
    conv3x3,
    depthwise_conv3x3,
    gelu,
    gelu_grad,
    l2_normalize,
    l2_normalize_rows,
    layer_norm,
    make_rng,
    matmul,
    softmax_rows,
    tensor,
    tensor_from_json,
    tensor_to_json,
)


class TestMatmul:
    def test_identity_left(self, rng):
        a = rng.standard_normal((2, 2))
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_identity_right(self):
        a = tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, np.eye(2)), a)

    def test_triple_loop_oracle(self, rng):
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        want = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                acc = 0.0
                for t in range(7):
                    acc += a[i, t] * b[t, j]
                want[i, j] = acc
        assert np.max(np.abs(matmul(a, b) - want)) <= 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            matmul(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))

    def test_bit_identical_across_runs(self, rng):
        a = rng.standard_normal((9, 11))
        b = rng.standard_normal((11, 6))
        first = matmul(a, b)
        assert all(np.array_equal(first, matmul(a, b)) for _ in range(3))

    def test_rows_independent_of_position(self, rng):
        # Each output row depends only on its input row, bit for bit, so
        # permuting rows commutes with the product exactly.
        a = rng.standard_normal((13, 8))
        b = rng.standard_normal((8, 5))
        perm = rng.permutation(13)
        assert np.array_equal(matmul(a[perm], b), matmul(a, b)[perm])


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = softmax_rows(np.zeros((1, 3)))
        assert np.max(np.abs(out - 1 / 3)) <= 1e-15

    @pytest.mark.parametrize("c,s", [(0.0, 1.0), (5.0, 2.0), (-3.0, 0.5)])
    def test_log_two_gap(self, c, s):
        out = softmax_rows(np.array([[c, c + s * math.log(2)]]), scale=s)
        assert np.max(np.abs(out - [1 / 3, 2 / 3])) <= 1e-12

    def test_direct_oracle(self, rng):
        p = rng.standard_normal((4, 6))
        scale = math.sqrt(8)
        want = np.exp(p / scale)
        want /= want.sum(axis=1, keepdims=True)
        assert np.max(np.abs(softmax_rows(p, scale) - want)) <= 1e-12

    def test_rows_sum_to_one_and_positive(self, rng):
        out = softmax_rows(rng.standard_normal((20, 9)) * 30)
        assert np.max(np.abs(out.sum(axis=1) - 1)) <= 1e-12
        assert np.all(out > 0) and np.all(out <= 1)

    def test_row_shift_invariance(self, rng):
        p = rng.standard_normal((5, 4))
        shift = rng.standard_normal((5, 1))
        assert np.max(np.abs(softmax_rows(p + shift) - softmax_rows(p))) \
            <= 1e-12

    def test_extreme_inputs_stable(self):
        out = softmax_rows(np.array([[1e4, 0.0, -1e4]]))
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1) <= 1e-12

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            softmax_rows(np.zeros((1, 2)), scale=0.0)


class TestLayerNorm:
    def test_constant_row_zeroed(self):
        x = np.full((1, 5), 3.7)
        out = layer_norm(x, np.ones(5), np.zeros(5))
        assert np.max(np.abs(out)) <= 1e-6

    def test_unit_variance_row_fixed(self):
        x = np.array([[-1.0, 1.0]])
        out = layer_norm(x, np.ones(2), np.zeros(2), eps=1e-14)
        assert np.max(np.abs(out - x)) <= 1e-7

    def test_moments(self, rng):
        x = rng.standard_normal((10, 16)) * 3 + 1
        out = layer_norm(x, np.ones(16), np.zeros(16))
        assert np.max(np.abs(out.mean(axis=1))) < 1e-10
        assert np.max(np.abs(out.var(axis=1) - 1)) < 1e-6

    def test_affine_applied(self, rng):
        x = rng.standard_normal((4, 8))
        gamma = rng.standard_normal(8)
        beta = rng.standard_normal(8)
        base = layer_norm(x, np.ones(8), np.zeros(8))
        out = layer_norm(x, gamma, beta)
        assert np.max(np.abs(out - (base * gamma + beta))) <= 1e-12


class TestL2Normalize:
    def test_three_four_five(self):
        assert np.max(np.abs(l2_normalize(np.array([3.0, 4.0]))
                             - [0.6, 0.8])) <= 1e-15

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0])
        assert np.array_equal(l2_normalize(v), v)

    def test_zero_vector_guard(self):
        v = np.zeros(4)
        assert np.array_equal(l2_normalize(v), v)

    def test_idempotent(self, rng):
        v = rng.standard_normal(9) * 50
        once = l2_normalize(v)
        assert np.max(np.abs(l2_normalize(once) - once)) <= 1e-14

    def test_rows_variant(self, rng):
        x = rng.standard_normal((6, 5))
        x[2] = 0.0
        want = np.stack([l2_normalize(r) for r in x])
        assert np.max(np.abs(l2_normalize_rows(x) - want)) <= 1e-15


class TestGelu:
    def test_erf_formula(self, rng):
        x = rng.standard_normal(40) * 3
        want = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
        assert np.max(np.abs(gelu(x) - want)) <= 1e-12

    def test_grad_matches_finite_differences(self, rng):
        x = rng.standard_normal(25)
        h = 1e-6
        fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
        assert np.max(np.abs(gelu_grad(x) - fd)) <= 1e-8


def _conv_loop(x, w, stride, depthwise):
    hh, ww, cin = x.shape
    out_h = -(-hh // stride)
    out_w = -(-ww // stride)
    cout = cin if depthwise else w.shape[3]
    out = np.zeros((out_h, out_w, cout))
    for oy in range(out_h):
        for ox in range(out_w):
            for dy in range(3):
                for dx in range(3):
                    iy = oy * stride + dy - 1
                    ix = ox * stride + dx - 1
                    if not (0 <= iy < hh and 0 <= ix < ww):
                        continue
                    if depthwise:
                        out[oy, ox] += x[iy, ix] * w[dy, dx]
                    else:
                        for ci in range(cin):
                            out[oy, ox] += x[iy, ix, ci] * w[dy, dx, ci]
    return out


class TestConv3x3:
    def test_zero_weights(self, rng):
        x = rng.standard_normal((4, 4, 3))
        assert np.all(depthwise_conv3x3(x, np.zeros((3, 3, 3))) == 0)

    def test_delta_kernel_identity(self, rng):
        x = rng.standard_normal((5, 6, 2))
        w = np.zeros((3, 3, 2))
        w[1, 1] = 1.0
        assert np.array_equal(depthwise_conv3x3(x, w), x)

    def test_depthwise_loop_oracle(self, rng):
        x = rng.standard_normal((5, 5, 2))
        w = rng.standard_normal((3, 3, 2))
        got = depthwise_conv3x3(x, w)
        assert np.max(np.abs(got - _conv_loop(x, w, 1, True))) <= 1e-12

    def test_depthwise_stride2_shape_and_values(self, rng):
        x = rng.standard_normal((7, 5, 3))
        w = rng.standard_normal((3, 3, 3))
        got = depthwise_conv3x3(x, w, stride=2)
        assert got.shape == (4, 3, 3)
        assert np.max(np.abs(got - _conv_loop(x, w, 2, True))) <= 1e-12

    def test_dense_loop_oracle(self, rng):
        x = rng.standard_normal((6, 4, 3))
        w = rng.standard_normal((3, 3, 3, 5))
        got = conv3x3(x, w)
        want = np.zeros((6, 4, 5))
        for co in range(5):
            want[:, :, co] = _conv_loop(x, w[:, :, :, co], 1, True).sum(axis=2)
        assert got.shape == (6, 4, 5)
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_dense_stride2_shape(self, rng):
        x = rng.standard_normal((9, 9, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        assert conv3x3(x, w, stride=2).shape == (5, 5, 4)


class TestSerialization:
    def test_round_trip(self, rng):
        arr = rng.standard_normal((3, 4, 2))
        back = tensor_from_json(tensor_to_json(arr))
        assert np.array_equal(back, arr)

    def test_wire_format(self):
        obj = json.loads(tensor_to_json(np.array([[1.0, 2.0]])))
        assert obj == {"shape": [1, 2], "data": [1.0, 2.0]}

    def test_rng_deterministic(self):
        a = make_rng(7).standard_normal(5)
        b = make_rng(7).standard_normal(5)
        assert np.array_equal(a, b)
