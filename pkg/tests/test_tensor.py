import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nfcnn.tensor as T
from nfcnn.tensor import Tensor, backward

from oracles import conv2d_oracle, replicate_pad_oracle


def t(data, grad=True, dtype=np.float64):
    return Tensor(np.asarray(data), requires_grad=grad, dtype=dtype)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestElementwise:
    def test_add_identity(self, rng):
        a = t(rng.normal(size=(3, 4)))
        out = T.add(a, t(np.zeros((3, 4))))
        np.testing.assert_array_equal(out.data, a.data)

    def test_sub_self_cancels(self, rng):
        a = t(rng.normal(size=(2, 5)))
        np.testing.assert_array_equal(T.sub(a, a).data, np.zeros((2, 5)))

    def test_add_sub_round_trip(self, rng):
        a = rng.normal(size=(4, 4)).astype(np.float32)
        b = rng.normal(size=(4, 4)).astype(np.float32)
        out = T.sub(T.add(t(a, dtype=np.float32), t(b, dtype=np.float32)),
                    t(b, dtype=np.float32))
        assert rel_err(out.data, a) < 1e-6

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            T.add(t(np.zeros((2, 2))), t(np.zeros((2, 3))))

    def test_gradients(self, rng):
        a = t(rng.normal(size=(3,)))
        b = t(rng.normal(size=(3,)))
        backward(T.mean_of_squares(T.sub(a, b)))
        expected = 2.0 / 3.0 * (a.data - b.data)
        np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
        np.testing.assert_allclose(b.grad, -expected, rtol=1e-12)


class TestReduce:
    def test_zeros(self):
        z = t(np.zeros(5))
        assert T.mean_of_squares(z).item() == 0.0
        assert T.mean_of_abs(z).item() == 0.0

    def test_hand_values(self):
        x = t([3.0, -4.0])
        assert T.mean_of_squares(x).item() == pytest.approx(12.5)
        assert T.mean_of_abs(x).item() == pytest.approx(3.5)

    def test_mean_of_squares_gradient(self):
        x = t([3.0, -4.0])
        backward(T.mean_of_squares(x))
        np.testing.assert_allclose(x.grad, [3.0, -4.0])

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            T.mean_of_squares(t(np.zeros((0,))))


class TestLeakyRelu:
    def test_positive_passthrough(self):
        assert T.leaky_relu(t([1.0]), 0.25).item() == 1.0

    def test_negative_scaled(self):
        assert T.leaky_relu(t([-4.0]), 0.25).item() == -1.0

    def test_zero_gradient_is_one(self):
        x = t([0.0])
        out = T.leaky_relu(x, 0.25)
        assert out.item() == 0.0
        backward(out)
        assert x.grad[0] == 1.0

    def test_slope_validation(self):
        with pytest.raises(ValueError):
            T.leaky_relu(t([1.0]), 1.0)


class TestReplicationPad:
    def test_zero_pad_identity(self, rng):
        x = t(rng.normal(size=(1, 1, 3, 3)))
        assert T.replication_pad2d(x, 0) is x

    def test_row_replication(self):
        x = t(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
        out = T.replication_pad2d(x, 1)
        np.testing.assert_array_equal(out.data[0, 0, 1], [1, 1, 2, 3, 3])

    def test_2x2_corners_and_gradient(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        x = t(np.array([[a, b], [c, d]]).reshape(1, 1, 2, 2))
        out = T.replication_pad2d(x, 1)
        expected = np.array([
            [a, a, b, b],
            [a, a, b, b],
            [c, c, d, d],
            [c, c, d, d],
        ])
        np.testing.assert_array_equal(out.data[0, 0], expected)
        # gradient of the (0, 0) corner output flows to a
        up = np.zeros((1, 1, 4, 4))
        up[0, 0, 0, 0] = 1.0
        (grad,) = out._grad_fn(up)
        np.testing.assert_array_equal(grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    @pytest.mark.parametrize("h", [1, 2, 3])
    @pytest.mark.parametrize("w", [1, 2, 3])
    @pytest.mark.parametrize("pad", [0, 1, 2])
    def test_exhaustive_vs_oracle(self, h, w, pad):
        x = np.arange(h * w, dtype=np.float64).reshape(1, 1, h, w) + 1.0
        out = T.replication_pad2d(t(x), pad)
        np.testing.assert_array_equal(out.data, replicate_pad_oracle(x, pad))

    def test_gradient_mass_is_conserved(self, rng):
        x = t(rng.normal(size=(1, 2, 3, 4)))
        out = T.replication_pad2d(x, 2)
        up = rng.normal(size=out.shape)
        (grad,) = out._grad_fn(up)
        assert grad.sum() == pytest.approx(up.sum(), rel=1e-12)


class TestConv2d:
    def test_1x1_scalar_affine(self):
        v, w, b = 2.5, -1.5, 0.25
        out = T.conv2d(t([[[[v]]]]), t([[[[w]]]]), t([b]), pad=0)
        assert out.item() == pytest.approx(v * w + b)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 6))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = T.conv2d(t(x), t(w), t(np.zeros(3)), pad=1)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = T.conv2d(t(x), t(w), t(b))
        assert rel_err(out.data, conv2d_oracle(x, w, b, 1)) < 1e-5

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 2, 2))))

    def test_wrong_pad_rejected(self):
        with pytest.raises(ValueError, match="pad"):
            T.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 3, 3))), pad=2)

    def test_linearity(self, rng):
        a = rng.normal(size=(1, 2, 5, 5))
        b = rng.normal(size=(1, 2, 5, 5))
        w = t(rng.normal(size=(4, 2, 3, 3)))
        bias = t(rng.normal(size=4))
        zero = t(np.zeros(4))
        lhs = T.conv2d(t(a + b), w, bias).data
        rhs = T.conv2d(t(a), w, zero).data + T.conv2d(t(b), w, bias).data
        assert rel_err(lhs, rhs) < 1e-5

    def test_spatial_size_preserved(self, rng):
        x = t(rng.normal(size=(2, 3, 7, 11)))
        out = T.conv2d(x, t(rng.normal(size=(5, 3, 3, 3))), t(np.zeros(5)))
        assert out.shape == (2, 5, 7, 11)

    def test_bias_optional(self, rng):
        x = t(rng.normal(size=(1, 1, 4, 4)))
        w = t(rng.normal(size=(2, 1, 3, 3)))
        with_zero = T.conv2d(x, w, t(np.zeros(2)))
        without = T.conv2d(x, w)
        np.testing.assert_allclose(without.data, with_zero.data, atol=1e-12)


class TestBatchNorm:
    def test_eval_identity(self, rng):
        x = t(rng.normal(size=(2, 3, 4, 4)))
        out = T.batch_norm2d(
            x, t(np.ones(3)), t(np.zeros(3)),
            run_mean=np.zeros(3), run_var=np.ones(3),
            training=False, eps=1e-12)
        np.testing.assert_allclose(out.data, x.data, atol=1e-9)

    def test_constant_input_maps_to_beta(self):
        x = t(np.full((2, 2, 3, 3), 7.0))
        gamma = t(np.full(2, 2.0))
        beta = t(np.full(2, 0.5))
        out = T.batch_norm2d(x, gamma, beta, training=True)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-4)

    def test_train_moments(self, rng):
        x = t(rng.normal(2.0, 3.0, size=(4, 3, 5, 5)))
        out = T.batch_norm2d(x, t(np.ones(3)), t(np.zeros(3)), training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(var, 1.0, atol=1e-3)

    def test_running_state_update_and_eval(self, rng):
        x = rng.normal(1.0, 2.0, size=(4, 2, 4, 4))
        rm = np.zeros(2)
        rv = np.ones(2)
        T.batch_norm2d(t(x), t(np.ones(2)), t(np.zeros(2)),
                       run_mean=rm, run_var=rv, training=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-10)
        np.testing.assert_allclose(
            rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-10)

    def test_eval_without_state_raises(self, rng):
        x = t(rng.normal(size=(1, 2, 3, 3)))
        with pytest.raises(RuntimeError, match="initialized"):
            T.batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), training=False)

    def test_tiny_batch_rejected(self):
        x = t(np.zeros((1, 2, 1, 1)))
        with pytest.raises(ValueError, match=">= 2"):
            T.batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), training=True)


class TestDropout:
    def test_p_zero_identity(self, rng):
        x = t(rng.normal(size=(2, 3, 4, 4)))
        assert T.dropout(x, 0.0, training=True,
                         rng=np.random.default_rng(0)) is x

    def test_eval_identity(self, rng):
        x = t(rng.normal(size=(2, 3, 4, 4)))
        assert T.dropout(x, 0.7, training=False) is x

    def test_surviving_fraction_and_scaling(self):
        x = Tensor(np.ones((1, 1, 100, 100), np.float32))
        out = T.dropout(x, 0.5, "elementwise", training=True,
                        rng=np.random.default_rng(77))
        survivors = out.data != 0.0
        frac = survivors.mean()
        # 3 standard errors of a fair coin over 10^4 draws
        assert abs(frac - 0.5) < 3 * 0.5 / 100.0
        np.testing.assert_allclose(out.data[survivors], 2.0)

    def test_channelwise_zeroes_whole_maps(self, rng):
        x = Tensor(np.ones((4, 8, 5, 5), np.float32))
        out = T.dropout(x, 0.5, "channelwise", training=True,
                        rng=np.random.default_rng(3))
        per_map = out.data.reshape(4, 8, -1)
        for n in range(4):
            for c in range(8):
                vals = np.unique(per_map[n, c])
                assert vals.shape[0] == 1 and vals[0] in (0.0, 2.0)

    def test_deterministic_under_seed(self, rng):
        x = t(rng.normal(size=(2, 2, 6, 6)))
        a = T.dropout(x, 0.3, training=True, rng=np.random.default_rng(5))
        b = T.dropout(x, 0.3, training=True, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a.data, b.data)

    def test_needs_rng_when_training(self, rng):
        with pytest.raises(ValueError, match="rng"):
            T.dropout(t(np.ones((1, 1, 2, 2))), 0.5, training=True)

    def test_gradient_only_through_survivors(self):
        x = t(np.ones((1, 1, 10, 10)))
        out = T.dropout(x, 0.4, training=True, rng=np.random.default_rng(11))
        backward(T.mean_of_squares(out))
        dead = out.data == 0.0
        assert dead.any()
        assert np.all(x.grad[dead] == 0.0)
        assert np.all(x.grad[~dead] != 0.0)


class TestConcat:
    def test_single_input_identity(self, rng):
        x = t(rng.normal(size=(1, 3, 4, 4)))
        assert T.concat_channels([x]) is x

    def test_shapes(self, rng):
        parts = [t(rng.normal(size=(1, 3, 8, 8))) for _ in range(3)]
        assert T.concat_channels(parts).shape == (1, 9, 8, 8)

    def test_round_trip_and_gradient_split(self, rng):
        a = t(rng.normal(size=(2, 2, 3, 3)))
        b = t(rng.normal(size=(2, 3, 3, 3)))
        out = T.concat_channels([a, b])
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)
        up = rng.normal(size=out.shape)
        ga, gb = out._grad_fn(up)
        np.testing.assert_array_equal(ga, up[:, :2])
        np.testing.assert_array_equal(gb, up[:, 2:])

    def test_mismatch_raises(self, rng):
        with pytest.raises(ValueError, match="N/H/W"):
            T.concat_channels([t(np.zeros((1, 1, 4, 4))),
                               t(np.zeros((1, 1, 4, 5)))])


class TestBackward:
    def test_identity_chain(self):
        p = t([2.0])
        backward(T.mean_of_squares(p))  # grad 2p/1 = 4
        np.testing.assert_allclose(p.grad, [4.0])
        p.zero_grad()
        loss = T.scale(p, 1.0)
        backward(loss)
        np.testing.assert_allclose(p.grad, [1.0])

    def test_analytic_example(self):
        p = t([3.0, -4.0])
        backward(T.mean_of_squares(p))
        np.testing.assert_allclose(p.grad, [3.0, -4.0])

    def test_non_scalar_rejected(self, rng):
        x = t(rng.normal(size=(2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            backward(T.add(x, x))

    def test_detached_rejected(self, rng):
        x = Tensor(np.ones(()), requires_grad=False)
        with pytest.raises(ValueError, match="detached"):
            backward(x)

    def test_repeated_backward_accumulates(self):
        p = t([3.0, -4.0])
        loss1 = T.mean_of_squares(p)
        backward(loss1)
        backward(T.mean_of_squares(p))
        np.testing.assert_allclose(p.grad, [6.0, -8.0])

    def test_fanout_accumulates(self, rng):
        x = t(rng.normal(size=(3,)))
        y = T.add(x, x)  # dy/dx = 2
        backward(T.mean_of_squares(y))
        np.testing.assert_allclose(x.grad, 2.0 * 2.0 * y.data / 3.0, rtol=1e-12)


class TestDeterminismAndDtype:
    def test_float32_default(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_preserved(self):
        assert Tensor(np.zeros(3, np.float64)).dtype == np.float64

    def test_conv_bit_identical_across_runs(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        one = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        two = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_array_equal(one, two)

    def test_dtype_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4), np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3), np.float64))
        with pytest.raises(ValueError, match="dtype"):
            T.conv2d(x, w)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3),
    h=st.integers(1, 5), w=st.integers(1, 5),
    pad=st.integers(0, 2), seed=st.integers(0, 10_000),
)
def test_pad_matches_oracle_property(n, c, h, w, pad, seed):
    x = np.random.default_rng(seed).normal(size=(n, c, h, w))
    out = T.replication_pad2d(Tensor(x, dtype=np.float64), pad)
    np.testing.assert_array_equal(out.data, replicate_pad_oracle(x, pad))


@settings(max_examples=20, deadline=None)
@given(
    widths=st.lists(st.integers(1, 4), min_size=1, max_size=4),
    seed=st.integers(0, 10_000),
)
def test_concat_slice_round_trip_property(widths, seed):
    g = np.random.default_rng(seed)
    parts = [Tensor(g.normal(size=(1, c, 3, 3)), dtype=np.float64)
             for c in widths]
    out = T.concat_channels(parts)
    offset = 0
    for part in parts:
        c = part.shape[1]
        np.testing.assert_array_equal(out.data[:, offset:offset + c], part.data)
        offset += c
