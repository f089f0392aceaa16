"""Tensor core: forward values, error contracts and gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adamatting import nn
from adamatting import tensor as T
from adamatting.errors import ContractError, DimensionError, NonFiniteError
from adamatting.gradcheck import check_gradients

OP_TOL = 1e-4


def leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        i2 = T.Tensor(np.eye(2))
        np.testing.assert_array_equal(T.matmul(i2, i2).data, np.eye(2))

    def test_hand_checkable(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.zeros((3, 4)), T.zeros((3, 2)))

    def test_gradient(self, rng, f64):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert check_gradients(lambda: T.sum_(T.matmul(a, b)), [a, b]) < OP_TOL

    def test_batched_gradient(self, rng, f64):
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 5)))
        w = rng.normal(size=(2, 3, 5))
        assert check_gradients(lambda: T.sum_(T.matmul(a, b) * w), [a, b]) < OP_TOL


class TestConv2d:
    def test_ones_times_two(self):
        out = T.conv2d(T.ones((1, 3, 3)), T.Tensor(np.full((1, 1, 1, 1), 2.0, np.float32)))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_impulse_response_is_the_kernel(self, rng):
        x = np.zeros((1, 7, 7), np.float32)
        x[0, 3, 3] = 1.0
        k = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), pad=1).data[0]
        # cross-correlation: the response is the kernel flipped about its centre
        np.testing.assert_allclose(out[2:5, 2:5], k[0, 0, ::-1, ::-1], atol=1e-7)
        assert np.count_nonzero(out) == np.count_nonzero(k)

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 6, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, pad=2, dilation=2).data
        xp = np.pad(x, ((0, 0), (2, 2), (2, 2)))
        ref = np.zeros_like(out)
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    patch = xp[:, 2 * i:2 * i + 5:2, 2 * j:2 * j + 5:2]
                    ref[o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_output_shape_formula(self):
        out = T.conv2d(T.zeros((1, 9, 8)), T.zeros((2, 1, 3, 3)), stride=2, pad=1)
        assert out.shape == (2, 5, 4)

    def test_non_positive_extent(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.zeros((1, 2, 2)), T.zeros((1, 1, 3, 3)), dilation=2)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.zeros((1, 4, 4)), T.zeros((1, 1, 2, 2)))

    def test_gradient(self, rng, f64):
        x, w = leaf(rng.normal(size=(2, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3)))
        b = leaf(rng.normal(size=3))
        proj = rng.normal(size=(3, 5, 5))
        assert check_gradients(lambda: T.sum_(T.conv2d(x, w, b, pad=1) * proj), [x, w, b]) < OP_TOL

    @pytest.mark.parametrize("stride,pad,dilation", [(2, 1, 1), (1, 2, 2), (2, 0, 1)])
    def test_gradient_strided_dilated(self, rng, f64, stride, pad, dilation):
        x, w = leaf(rng.normal(size=(2, 7, 6))), leaf(rng.normal(size=(2, 2, 3, 3)))

        def f():
            y = T.conv2d(x, w, stride=stride, pad=pad, dilation=dilation)
            return T.sum_(T.square(y))
        assert check_gradients(f, [x, w]) < OP_TOL


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(T.Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            T.softmax(T.zeros((2, 3)), axis=2)

    def test_gradient(self, rng, f64):
        x = leaf(rng.normal(size=4))
        w = rng.normal(size=4)
        assert check_gradients(lambda: T.sum_(T.softmax(x) * w), [x]) < OP_TOL

    def test_masked_entries_get_zero_weight(self, rng):
        x = T.Tensor(rng.normal(size=(3, 5)))
        mask = np.array([[1, 1, 0, 0, 1]] * 3, dtype=bool)
        out = T.softmax(x, axis=1, mask=mask).data
        assert np.all(out[:, 2:4] == 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_normalised(self, values):
        out = T.softmax(T.Tensor(np.array(values, dtype=np.float32))).data
        assert np.all((out >= 0) & (out <= 1))
        assert abs(out.sum() - 1.0) < 1e-6


class TestBilinearResize:
    def test_same_size_is_bitwise_copy(self, rng):
        x = rng.normal(size=(2, 5, 7)).astype(np.float32)
        out = T.bilinear_resize(T.Tensor(x), 5, 7).data
        assert out.tobytes() == x.tobytes()

    def test_constant_preserved(self):
        out = T.bilinear_resize(T.Tensor(np.full((1, 1, 1), 0.3, np.float32)), 4, 4).data
        np.testing.assert_allclose(out, 0.3, atol=1e-7)

    def test_checkerboard_table(self):
        # half-pixel centres: output pixel d samples source coordinate (d + 0.5)/2 - 0.5,
        # i.e. -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]; the 1-D weights for the
        # second source pixel are therefore 0, 0.25, 0.75, 1
        w1 = np.array([0.0, 0.25, 0.75, 1.0])
        w0 = 1.0 - w1
        src = np.array([[0.0, 1.0], [1.0, 0.0]])
        table = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                ry, rx = (w0[i], w1[i]), (w0[j], w1[j])
                table[i, j] = sum(ry[a] * rx[b] * src[a, b] for a in range(2) for b in range(2))
        # spot-check two entries by hand: corner = src[0,0]; (1,1) = .75²·0 + 2·.75·.25·1 + .25²·0
        assert table[0, 0] == 0.0 and table[1, 1] == pytest.approx(0.375)
        out = T.bilinear_resize(T.Tensor(src[None]), 4, 4).data[0]
        np.testing.assert_allclose(out, table, atol=1e-6)

    def test_gradient(self, rng, f64):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(2, 6, 8))
        assert check_gradients(lambda: T.sum_(T.bilinear_resize(x, 6, 8) * w), [x]) < OP_TOL

    def test_rejects_empty_target(self):
        with pytest.raises(DimensionError):
            T.bilinear_resize(T.zeros((1, 2, 2)), 0, 2)


class TestNormLayers:
    def test_layer_norm_constant_input(self):
        ln = nn.LayerNorm(4)
        ln.bias.data[:] = [0.1, 0.2, 0.3, 0.4]
        out = T.norm_layer(T.Tensor(np.full((3, 4), 5.0, np.float32)), "layer", ln).data
        np.testing.assert_allclose(out, np.tile([0.1, 0.2, 0.3, 0.4], (3, 1)), atol=1e-7)

    def test_layer_norm_zero_mean(self, rng):
        out = T.norm_layer(T.Tensor(rng.normal(3, 2, size=(6, 16))), "layer", nn.LayerNorm(16)).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6

    def test_layer_norm_gradient(self, rng, f64):
        x, g, b = leaf(rng.normal(size=(5, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
        w = rng.normal(size=(5, 6))
        assert check_gradients(lambda: T.sum_(T.layer_norm(x, g, b) * w), [x, g, b]) < OP_TOL

    def test_batch_norm_training_gradient(self, rng, f64):
        x, g, b = leaf(rng.normal(size=(3, 4, 5))), leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
        w = rng.normal(size=(3, 4, 5))

        def f():
            rm, rv = np.zeros(3), np.ones(3)
            return T.sum_(T.batch_norm(x, g, b, rm, rv, training=True) * w)
        assert check_gradients(f, [x, g, b]) < OP_TOL

    def test_batch_norm_eval_gradient(self, rng, f64):
        x, g, b = leaf(rng.normal(size=(3, 4, 5))), leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        w = rng.normal(size=(3, 4, 5))
        f = lambda: T.sum_(T.batch_norm(x, g, b, rm, rv, training=False) * w)  # noqa: E731
        assert check_gradients(f, [x, g, b]) < OP_TOL

    def test_batch_norm_running_stats(self, rng):
        bn = nn.BatchNorm2d(2)
        x = rng.normal(2.0, 3.0, size=(2, 8, 8)).astype(np.float32)
        bn(T.Tensor(x))
        mu = x.mean(axis=(1, 2))
        var = x.var(axis=(1, 2), ddof=1)
        np.testing.assert_allclose(bn.running_mean, 0.1 * mu, rtol=1e-5)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var, rtol=1e-5)

    def test_batch_norm_frozen_in_eval(self, rng):
        bn = nn.BatchNorm2d(2).eval()
        before = bn.running_mean.copy(), bn.running_var.copy()
        bn(T.Tensor(rng.normal(size=(2, 4, 4)).astype(np.float32)))
        np.testing.assert_array_equal(bn.running_mean, before[0])
        np.testing.assert_array_equal(bn.running_var, before[1])

    def test_zero_variance_uses_epsilon(self):
        out = T.norm_layer(T.Tensor(np.full((2, 3), 1.0, np.float32)), "layer", nn.LayerNorm(3)).data
        assert np.all(np.isfinite(out))

    def test_feature_width_mismatch(self):
        with pytest.raises(DimensionError):
            T.norm_layer(T.zeros((2, 3)), "layer", nn.LayerNorm(4))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        T.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_half_square_gives_identity(self, rng):
        x = T.Tensor(rng.normal(size=5), requires_grad=True)
        (T.sum_(x * x) * 0.5).backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_second_call_accumulates(self, rng):
        x = T.Tensor(rng.normal(size=4), requires_grad=True)
        T.sum_(x * 3.0).backward()
        T.sum_(x * 3.0).backward()
        np.testing.assert_allclose(x.grad, 6.0)

    def test_non_scalar_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_off_tape_rejected(self):
        with pytest.raises(ContractError):
            T.sum_(T.Tensor(np.ones(3))).backward()

    def test_shared_subexpression(self, rng, f64):
        x = leaf(rng.normal(size=3))

        def f():
            y = T.sigmoid(x)
            return T.sum_(y * y + y)
        assert check_gradients(f, [x]) < OP_TOL

    def test_no_grad_records_nothing(self):
        x = T.Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()


class TestElementwiseAndShape:
    @pytest.mark.parametrize("name,fn", [
        ("add", lambda a, b: T.add(a, b)),
        ("sub", lambda a, b: T.sub(a, b)),
        ("mul", lambda a, b: T.mul(a, b)),
        ("div", lambda a, b: T.div(a, T.add(T.square(b), 1.0))),
    ])
    def test_binary_gradients(self, rng, f64, name, fn):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(1, 4)))
        w = rng.normal(size=(3, 4))
        assert check_gradients(lambda: T.sum_(fn(a, b) * w), [a, b]) < OP_TOL

    @pytest.mark.parametrize("fn", [T.relu, T.gelu, T.sigmoid, T.exp, T.square,
                                    lambda x: T.log(T.add(T.square(x), 1.0)),
                                    lambda x: T.clip(x, -0.5, 0.5)])
    def test_unary_gradients(self, rng, f64, fn):
        # keep samples away from kinks so central differences stay exact
        x = leaf(rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.6, 1.5, size=(4, 3)))
        w = rng.normal(size=(4, 3))
        assert check_gradients(lambda: T.sum_(fn(x) * w), [x]) < OP_TOL

    def test_abs_gradient(self, rng, f64):
        x = leaf(rng.choice([-1, 1], size=5) * rng.uniform(0.5, 1.0, size=5))
        assert check_gradients(lambda: T.sum_(T.abs_(x)), [x]) < OP_TOL

    def test_gelu_values(self):
        from scipy.special import erf
        x = np.linspace(-3, 3, 13)
        np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-12)

    @pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
    def test_reduction_gradients(self, rng, f64, axis):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=np.sum(np.zeros((2, 3, 4)), axis=axis, keepdims=False).shape or ())

        def f():
            return T.sum_(T.mean(x, axis=axis) * w) + T.sum_(T.sum_(x, axis=axis) * w)
        assert check_gradients(f, [x]) < OP_TOL

    def test_transpose_reshape_index_gradients(self, rng, f64):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(3, 2, 2))

        def f():
            y = T.reshape(T.transpose(x, (1, 0, 2)), (3, 8))
            return T.sum_(T.reshape(y[:, ::2], (3, 2, 2)) * w)
        assert check_gradients(f, [x]) < OP_TOL

    def test_fancy_index_gradient(self, rng, f64):
        x = leaf(rng.normal(size=(5, 3)))
        idx = np.array([0, 2, 2, 4])
        w = rng.normal(size=(4, 3))
        assert check_gradients(lambda: T.sum_(T.index(x, idx) * w), [x]) < OP_TOL

    def test_concat_split_roundtrip(self, rng):
        parts = [T.Tensor(rng.normal(size=(n, 3, 3))) for n in (1, 2, 4)]
        back = T.split(T.concat(parts, axis=0), [1, 2, 4], axis=0)
        for a, b in zip(parts, back):
            np.testing.assert_array_equal(a.data, b.data)

    def test_concat_stack_gradients(self, rng, f64):
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(1, 3)))
        w1, w2 = rng.normal(size=(3, 3)), rng.normal(size=(2, 2, 3))

        def f():
            return T.sum_(T.concat([a, b], axis=0) * w1) + T.sum_(T.stack([a, a * 2.0], axis=0) * w2)
        assert check_gradients(f, [a, b]) < OP_TOL

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([T.zeros((1, 2, 2)), T.zeros((1, 3, 2))], axis=0)

    def test_window_gather_gradient(self, rng, f64):
        x = leaf(rng.normal(size=(2, 4, 3)))
        g, _ = T.window_gather(T.Tensor(np.zeros((2, 4, 3))), 3)
        w = rng.normal(size=g.shape)
        assert check_gradients(lambda: T.sum_(T.window_gather(x, 3)[0] * w), [x]) < OP_TOL

    def test_window_gather_layout(self):
        x = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
        g, valid = T.window_gather(T.Tensor(x), 3)
        # centre position (1, 1) sees the full 3×3 block around it
        np.testing.assert_array_equal(g.data[1 * 4 + 1, :, 0], x[0, 0:3, 0:3].ravel())
        assert valid[0].sum() == 4 and valid[5].sum() == 9

    def test_area_downsample(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        out = T.area_downsample(T.Tensor(x), 2, 2).data[0]
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])


class TestFiniteness:
    def test_log_of_zero_raises(self):
        with pytest.raises(NonFiniteError):
            T.log(T.Tensor(np.zeros(2)))

    def test_nan_input_raises(self):
        with pytest.raises(NonFiniteError):
            T.exp(T.Tensor(np.array([np.nan])))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    def test_finite_in_finite_out(self, values):
        x = T.Tensor(np.array(values))
        for fn in (T.relu, T.gelu, T.sigmoid, T.exp, T.square):
            assert np.all(np.isfinite(fn(x).data))


class TestDtypes:
    def test_default_is_float32(self):
        assert T.zeros((2,)).dtype == np.float32

    def test_shadow_mode(self):
        with T.default_dtype(np.float64):
            assert T.zeros((2,)).dtype == np.float64
            assert nn.Linear(2, 3, np.random.default_rng(0)).weight.dtype == np.float64
        assert T.zeros((2,)).dtype == np.float32

    def test_parameter_names_unique(self, small_model):
        names = [n for n, _ in small_model.named_parameters()]
        assert len(names) == len(set(names))
        assert all(p.requires_grad for p in small_model.parameters())
