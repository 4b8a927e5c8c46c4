import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clickscale import tensor as T


def naive_conv(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def naive_maxpool(x, k, stride):
    c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.empty((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ch, i, j] = x[ch, i * stride : i * stride + k, j * stride : j * stride + k].max()
    return out


class TestConv2d:
    def test_zero_input(self):
        rng = np.random.default_rng(0)
        out = T.conv2d(np.zeros((1, 3, 3)), rng.normal(size=(2, 1, 2, 2)), np.zeros(2))
        assert np.all(out == 0)

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 4, 5))
        out = T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), stride=1, pad=0)
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        np.testing.assert_allclose(T.conv2d(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-12, rtol=0)

    def test_output_size(self):
        out = T.conv2d(np.ones((1, 7, 9)), np.ones((1, 1, 3, 2)), stride=2, pad=1)
        assert out.shape == (1, (7 + 2 - 3) // 2 + 1, (9 + 2 - 2) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))

    def test_kernel_too_large(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))

    def test_linearity(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        a, b = 1.7, -0.4
        lhs = T.conv2d(a * x + b * y, w, stride=1, pad=1)
        rhs = a * T.conv2d(x, w, stride=1, pad=1) + b * T.conv2d(y, w, stride=1, pad=1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)

    def test_batch_equals_per_sample(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 2, 6, 6))
        w = rng.normal(size=(4, 2, 3, 3))
        batched = T.conv2d(x, w, stride=1, pad=1)
        for i in range(3):
            np.testing.assert_allclose(batched[i], T.conv2d(x[i], w, stride=1, pad=1), atol=1e-13)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_backward_finite_differences(self, stride, pad):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        up = rng.normal(size=T.conv2d(x, w, b, stride, pad).shape)

        def f(x_, w_, b_):
            return float((T.conv2d(x_, w_, b_, stride, pad) * up).sum())

        dx, dw, db = T.conv2d_backward(up, x, w, stride, pad)
        h = 1e-6
        for arr, grad, pos in ((x, dx, 0), (w, dw, 1), (b, db, 2)):
            for _ in range(10):
                i = tuple(rng.integers(0, s) for s in arr.shape)
                plus, minus = arr.copy(), arr.copy()
                plus[i] += h
                minus[i] -= h
                args_p = [x, w, b]
                args_m = [x, w, b]
                args_p[pos], args_m[pos] = plus, minus
                fd = (f(*args_p) - f(*args_m)) / (2 * h)
                assert fd == pytest.approx(grad[i], rel=1e-6, abs=1e-8)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_all_negative(self):
        assert np.all(T.relu(-np.abs(np.random.default_rng(0).normal(size=20)) - 1e-3) == 0)

    def test_elementwise_oracle(self):
        x = np.random.default_rng(2).normal(size=(3, 4, 5))
        out = T.relu(x)
        assert out.min() >= 0
        np.testing.assert_array_equal(out[x > 0], x[x > 0])

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
    def test_idempotent(self, x):
        np.testing.assert_array_equal(T.relu(T.relu(x)), T.relu(x))


class TestGlobalAveragePool:
    def test_constant(self):
        np.testing.assert_array_equal(T.global_average_pool(np.full((2, 3, 4), 5.0)), [5.0, 5.0])

    def test_small(self):
        assert T.global_average_pool(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0] == 2.5

    def test_summation_oracle(self):
        x = np.random.default_rng(3).normal(size=(4, 7, 7))
        expect = [sum(float(v) for v in x[k].ravel()) / 49 for k in range(4)]
        np.testing.assert_allclose(T.global_average_pool(x), expect, atol=1e-12, rtol=0)

    @given(st.floats(0.01, 100), st.integers(0, 2**31))
    def test_scaling(self, s, seed):
        x = np.random.default_rng(seed).normal(size=(3, 4, 5))
        np.testing.assert_allclose(T.global_average_pool(s * x), s * T.global_average_pool(x), rtol=1e-12, atol=1e-12)

    def test_rank_check(self):
        with pytest.raises(T.ShapeError):
            T.global_average_pool(np.ones((3, 3)))


class TestBilinear:
    def test_constant(self):
        out = T.bilinear_upsample(np.full((3, 4), 0.1), 7, 11)
        assert out.shape == (7, 11)
        assert np.all(out == 0.1)

    def test_single_pixel(self):
        assert np.all(T.bilinear_upsample(np.array([[2.5]]), 4, 3) == 2.5)

    def test_align_corners_midpoint(self):
        out = T.bilinear_upsample(np.array([[0.0, 1.0], [0.0, 1.0]]), 3, 3)
        np.testing.assert_array_equal(out[:, 1], [0.5, 0.5, 0.5])
        np.testing.assert_array_equal(out[:, 0], [0, 0, 0])
        np.testing.assert_array_equal(out[:, 2], [1, 1, 1])

    def test_corners_preserved(self):
        x = np.random.default_rng(4).normal(size=(4, 5))
        out = T.bilinear_upsample(x, 9, 13)
        for (i, j), (p, q) in zip([(0, 0), (0, -1), (-1, 0), (-1, -1)], [(0, 0), (0, -1), (-1, 0), (-1, -1)]):
            assert out[i, j] == x[p, q]

    def test_identity_size(self):
        x = np.random.default_rng(4).normal(size=(4, 5))
        np.testing.assert_array_equal(T.bilinear_upsample(x, 4, 5), x)

    def test_carries_leading_axes(self):
        x = np.random.default_rng(5).normal(size=(3, 4, 5))
        out = T.bilinear_upsample(x, 6, 8)
        for c in range(3):
            np.testing.assert_array_equal(out[c], T.bilinear_upsample(x[c], 6, 8))

    @settings(max_examples=60)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)),
        st.integers(1, 20),
        st.integers(1, 20),
    )
    def test_range_preserved(self, x, oh, ow):
        out = T.bilinear_upsample(x, oh, ow)
        assert out.min() >= x.min() and out.max() <= x.max()

    def test_bad_size(self):
        with pytest.raises(ValueError):
            T.bilinear_upsample(np.ones((2, 2)), 0, 3)


class TestMaxpool:
    def test_constant(self):
        out, _ = T.maxpool2d(np.full((2, 4, 4), 3.0), 2, 2)
        assert np.all(out == 3.0) and out.shape == (2, 2, 2)

    def test_small(self):
        out, arg = T.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
        assert out.ravel().tolist() == [4.0]
        assert arg.ravel().tolist() == [3]

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
    def test_loop_oracle(self, k, stride):
        x = np.random.default_rng(k + stride).normal(size=(3, 7, 8))
        out, _ = T.maxpool2d(x, k, stride)
        np.testing.assert_array_equal(out, naive_maxpool(x, k, stride))

    def test_backward_routes_to_argmax(self):
        x = np.random.default_rng(9).normal(size=(2, 4, 4))
        out, arg = T.maxpool2d(x, 2, 2)
        dx = T.maxpool2d_backward(np.ones_like(out), arg, x.shape, 2, 2)
        assert dx.sum() == out.size
        np.testing.assert_array_equal(np.sort(x[dx == 1]), np.sort(out.ravel()))


class TestTensorFile:
    @pytest.mark.parametrize("shape", [(5,), (2, 3), (2, 3, 4), (1, 2, 3, 4)])
    def test_round_trip_bit_exact(self, shape, tmp_path):
        x = np.random.default_rng(0).normal(size=shape)
        x.flat[0] = -0.0
        x.flat[-1] = np.nextafter(1.0, 2.0)
        path = tmp_path / "t.tnsr"
        T.save_tensor(path, x)
        y = T.load_tensor(path)
        assert y.shape == shape
        assert y.tobytes() == x.tobytes()

    def test_layout(self):
        buf = T.tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
        assert buf[:5] == b"TNSR\x01"
        assert buf[5:9] == (2).to_bytes(4, "little")
        assert buf[9:17] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(buf[17:], "<f8").tolist() == [1.0, 2.0, 3.0]

    def test_rejects_bad_magic(self):
        with pytest.raises(ValueError):
            T.read_tensor(io.BytesIO(b"NOPE\x01\x01\x00\x00\x00"))

    def test_rank_limits(self):
        with pytest.raises(T.ShapeError):
            T.tensor_to_bytes(np.zeros((1, 1, 1, 1, 1)))
