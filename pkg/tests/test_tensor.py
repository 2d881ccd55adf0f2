import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccvqa import tensor as T
from ccvqa.errors import ConfigError, ContractError, ShapeError
from ccvqa.nn import attention
from ccvqa.tensor import Parameter, Tensor

finite = st.floats(-50, 50, allow_nan=False, width=64)


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self, f64):
        a = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(T.matmul(a, np.eye(3)).data, a)

    def test_annihilating_product(self, f64):
        a = np.array([[1.0, 1.0]])
        b = np.array([[1.0], [-1.0]])
        assert T.matmul(a, b).data.item() == 0.0

    def test_against_loops(self, f64, rng):
        for _ in range(10):
            n, k, m = rng.integers(1, 6, size=3)
            a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
            np.testing.assert_allclose(T.matmul(a, b).data, loop_matmul(a, b), atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(np.ones((2, 3)), np.ones((4, 5)))

    def test_batched_broadcast(self, f64, rng):
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(a, b).data, np.einsum("bij,jk->bik", a, b), atol=1e-12)

    @given(st.integers(0, 10_000))
    def test_associative(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=(2, 5))
        with T.default_dtype(np.float64):
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
        np.testing.assert_allclose(left, right, atol=1e-8)


class TestSoftmax:
    def test_equal_logits(self, f64):
        np.testing.assert_allclose(T.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_log_ratio(self, f64):
        np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_against_exp_sum(self, f64, rng):
        x = rng.normal(size=(5, 7))
        e = np.exp(x)
        np.testing.assert_allclose(T.softmax(x).data, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_axis_zero(self, f64, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(T.softmax(x, axis=0).data, T.softmax(x.T).data.T, atol=1e-15)

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one_64(self, x):
        with T.default_dtype(np.float64):
            y = T.softmax(x).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-1e4, 1e4, width=32)))
    def test_rows_sum_to_one_32(self, x):
        y = T.softmax(x).data
        assert y.dtype == np.float32
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    @given(st.lists(finite, min_size=2, max_size=6), st.floats(-100, 100))
    def test_shift_invariant(self, xs, c):
        x = np.array(xs)
        with T.default_dtype(np.float64):
            np.testing.assert_allclose(T.softmax(x + c).data, T.softmax(x).data, atol=1e-12)


def two_pass_layer_norm(x, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) for v in row]
    return out


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self, f64):
        out = T.layer_norm(np.full((1, 4), 3.5), np.ones(4), np.zeros(4)).data
        assert np.array_equal(out, np.zeros((1, 4)))

    def test_symmetric_pair(self, f64):
        out = T.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=0.0).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-15)

    def test_against_two_pass(self, f64, rng):
        x = rng.normal(3.0, 2.0, size=(6, 5))
        out = T.layer_norm(x, np.ones(5), np.zeros(5)).data
        np.testing.assert_allclose(out, two_pass_layer_norm(x), atol=1e-10)

    def test_gain_and_shift(self, f64, rng):
        x, g, b = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
        out = T.layer_norm(x, g, b).data
        np.testing.assert_allclose(out, two_pass_layer_norm(x) * g + b, atol=1e-10)

    def test_width_one_rejected(self):
        with pytest.raises(ShapeError):
            T.layer_norm(np.ones((2, 1)), np.ones(1), np.zeros(1))

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 12)), elements=st.floats(-1e3, 1e3)))
    def test_zero_mean_unit_variance(self, x):
        spread = x.std(axis=-1)
        x = x[spread > 1e-3]
        if not len(x):
            return
        with T.default_dtype(np.float64):
            y = T.layer_norm(x, np.ones(x.shape[1]), np.zeros(x.shape[1])).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
        var = y.var(axis=-1)
        expect = x.var(axis=-1) / (x.var(axis=-1) + 1e-5)
        np.testing.assert_allclose(var, expect, atol=1e-9)


def mp_gelu(x):
    x = mpmath.mpf(x)
    c = mpmath.sqrt(2 / mpmath.pi)
    return float(x / 2 * (1 + mpmath.tanh(c * (x + mpmath.mpf("0.044715") * x**3))))


class TestGelu:
    def test_zero(self, f64):
        assert T.gelu(np.array([0.0])).data[0] == 0.0

    def test_large_positive_is_identity(self, f64):
        assert abs(T.gelu(np.array([10.0])).data[0] - 10.0) < 1e-6

    def test_large_negative_vanishes(self, f64):
        assert abs(T.gelu(np.array([-10.0])).data[0]) < 1e-6

    @pytest.mark.parametrize("x", [-3.0, -1.0, -0.25, 0.5, 1.0, 2.5])
    def test_high_precision_oracle(self, f64, x):
        assert abs(T.gelu(np.array([x])).data[0] - mp_gelu(x)) < 1e-13


class TestAttention:
    def test_single_key_returns_value(self, f64, rng):
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        out = attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data
        np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), atol=1e-14)

    def test_identical_keys_average_values(self, f64, rng):
        q, v = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
        k = np.tile(rng.normal(size=(1, 4)), (5, 1))
        out = attention(Tensor(q), Tensor(k), Tensor(v), heads=1).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-14)

    def test_against_unfused(self, f64, rng):
        heads, d = 2, 6
        q, k, v = rng.normal(size=(3, d)), rng.normal(size=(4, d)), rng.normal(size=(4, d))
        mask = np.array([True, True, False, True])
        dh = d // heads
        expect = np.zeros((3, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(3):
                s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) if mask[j] else -np.inf for j in range(4)])
                w = np.exp(s - s.max())
                w /= w.sum()
                expect[i, sl] = w @ v[:, sl]
        out = attention(Tensor(q), Tensor(k), Tensor(v), heads, mask=mask).data
        np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_indivisible_heads(self):
        x = Tensor(np.ones((2, 6)))
        with pytest.raises(ConfigError):
            attention(x, x, x, heads=4)


class TestBackward:
    def test_sum_gives_ones(self, f64):
        p = Parameter(np.arange(6.0).reshape(2, 3))
        T.backward(p.sum())
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_quadratic(self, f64):
        p = Parameter(np.array([1.0, -2.0, 3.0]))
        T.backward((p * p).sum())
        assert np.array_equal(p.grad, 2 * p.data)

    def test_reused_node_accumulates(self, f64):
        p = Parameter(np.array([2.0]))
        y = p * 3.0
        T.backward((y + y * y).sum())
        assert p.grad[0] == pytest.approx(3.0 + 2 * 6.0 * 3.0)

    def test_non_scalar_rejected(self):
        p = Parameter(np.ones(3))
        with pytest.raises(ContractError):
            T.backward(p * 2.0)

    def test_no_grad_records_nothing(self):
        p = Parameter(np.ones(3))
        with T.no_grad():
            y = (p * 2.0).sum()
        assert not y.requires_grad

    def test_cross_entropy_gradient(self, f64, rng):
        z = Parameter(rng.normal(size=(4, 3)))
        t = np.array([0, 2, 1, 1])
        T.backward(T.cross_entropy(z, t))
        p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
        p[np.arange(4), t] -= 1
        np.testing.assert_allclose(z.grad, p / 4, atol=1e-12)


class TestFiniteDiff:
    def test_linear(self, f64, rng):
        w = Parameter(rng.normal(size=(3, 2)))
        x = rng.normal(size=(4, 3))
        # the difference quotient is exact for any step on a linear map; a wider
        # step only shrinks the eps*|L|/h round-off term
        assert T.finite_diff_check(lambda: T.matmul(x, w).sum(), [w], h=1e-3, coords_per_param=6) < 1e-10

    def test_softmax_cross_entropy_toy(self, f64, rng):
        w = Parameter(rng.normal(size=(5, 3)))
        b = Parameter(rng.normal(size=3))
        x = rng.normal(size=(6, 5))
        t = rng.integers(0, 3, size=6)
        err = T.finite_diff_check(lambda: T.cross_entropy(T.matmul(x, w) + b, t), [w, b], coords_per_param=15)
        assert err < 1e-7

    def test_layer_norm_and_gelu(self, f64, rng):
        g, b = Parameter(rng.normal(size=4)), Parameter(rng.normal(size=4))
        x = Parameter(rng.normal(size=(3, 4)))

        def loss():
            y = T.gelu(T.layer_norm(x, g, b))
            return (T.softmax(y) * np.arange(4.0)).sum()

        assert T.finite_diff_check(loss, [x, g, b], coords_per_param=12) < 1e-7

    def test_requires_64_bit(self):
        w = Parameter(np.ones(3, dtype=np.float32))
        with pytest.raises(ContractError):
            T.finite_diff_check(lambda: w.sum(), [w])


class TestDebugMode:
    def test_non_finite_raises_when_enabled(self):
        T.set_debug(True)
        try:
            with pytest.raises(FloatingPointError):
                T.log(Tensor(np.array([0.0])))
        finally:
            T.set_debug(False)

    def test_silent_when_disabled(self):
        T.set_debug(False)
        with np.errstate(divide="ignore"):
            assert np.isinf(T.log(Tensor(np.array([0.0]))).data[0])


def test_default_precision_is_32_bit():
    assert T.get_default_dtype() is np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() is np.float32


def test_unsupported_precision():
    with pytest.raises(ValueError):
        T.set_default_dtype(np.float16)
