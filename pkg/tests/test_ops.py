import numpy as np
import pytest
from conftest import gradcheck
from hypothesis import given, settings
from hypothesis import strategies as st

from rbp import ops
from rbp.autodiff import ShapeError, Tensor, tsum


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        k = np.ones((1, 1, 1, 1))
        out = ops.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_array_equal(out, x)

    def test_hand_convolution_sum(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        k = np.ones((1, 1, 2, 2))
        out = ops.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(out, [[[[10.0]]]])

    def test_matches_naive_oracle_random(self):
        gen = np.random.default_rng(3)
        x = gen.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = gen.standard_normal((4, 3, 3, 3)).astype(np.float32)
        fast = ops.conv2d(Tensor(x), Tensor(w)).data
        slow = ops.naive_conv2d(x, w)
        assert np.abs(fast - slow).max() <= 1e-5

    @pytest.mark.parametrize("n,c,hw,o,k,s,p", [
        (1, 1, 5, 1, 1, 1, 0), (2, 2, 6, 3, 2, 1, 1), (4, 4, 8, 2, 3, 2, 1),
        (3, 1, 7, 4, 3, 3, 0), (2, 3, 8, 5, 3, 1, 2), (4, 4, 8, 8, 3, 2, 0),
    ])
    def test_oracle_shape_grid(self, n, c, hw, o, k, s, p):
        gen = np.random.default_rng(n * 100 + c * 10 + k)
        x = gen.standard_normal((n, c, hw, hw)).astype(np.float32)
        w = gen.standard_normal((o, c, k, k)).astype(np.float32)
        fast = ops.conv2d(Tensor(x), Tensor(w), stride=s, padding=p).data
        slow = ops.naive_conv2d(x, w, stride=s, padding=p)
        assert fast.shape == slow.shape
        assert np.abs(fast - slow).max() <= 1e-5

    def test_output_spatial_size(self):
        x = Tensor(np.zeros((1, 1, 11, 11)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        assert ops.conv2d(x, w, stride=2, padding=1).shape == (1, 1, 6, 6)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 5, 5)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ShapeError) as err:
            ops.conv2d(x, w)
        assert "3" in str(err.value) and "(2, 4, 3, 3)" in str(err.value)

    def test_gradients(self):
        gen = np.random.default_rng(5)
        x = gen.standard_normal((2, 2, 6, 6))
        w = gen.standard_normal((3, 2, 3, 3))
        b = gen.standard_normal(3)
        gradcheck(lambda a, ww, bb: tsum(
            ops.conv2d(a, ww, stride=2, padding=1, bias=bb) *
            ops.conv2d(a, ww, stride=2, padding=1, bias=bb)), [x, w, b])

    def test_bias_defaults_off(self):
        x = np.ones((1, 1, 2, 2))
        w = np.ones((1, 1, 2, 2))
        assert ops.conv2d(Tensor(x), Tensor(w)).data.item() == 4.0


class TestChannelScale:
    def test_all_ones_identity(self):
        gen = np.random.default_rng(0)
        x = gen.standard_normal((2, 3, 4, 4))
        out = ops.channel_scale(Tensor(x), Tensor(np.ones(3))).data
        np.testing.assert_array_equal(out, x)

    def test_all_zeros(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
        out = ops.channel_scale(Tensor(x), Tensor(np.zeros(3))).data
        assert np.all(out == 0)

    def test_elementwise_example(self):
        x = np.array([3.0, 5.0]).reshape(1, 2, 1, 1)
        out = ops.channel_scale(Tensor(x), Tensor(np.array([0.5, 2.0]))).data
        np.testing.assert_allclose(out.ravel(), [1.5, 10.0])

    def test_block_semantics_for_flat_input(self):
        x = np.arange(12, dtype=np.float64).reshape(2, 6)
        out = ops.channel_scale(Tensor(x), Tensor(np.array([1.0, 0.0, 2.0]))).data
        expected = x * np.array([1, 1, 0, 0, 2, 2], dtype=np.float64)
        np.testing.assert_array_equal(out, expected)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ops.channel_scale(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            ops.channel_scale(Tensor(np.zeros((1, 7))), Tensor(np.zeros(3)))

    def test_gradients_both_layouts(self):
        gen = np.random.default_rng(2)
        gradcheck(lambda a, s: tsum(ops.channel_scale(a, s) * ops.channel_scale(a, s)),
                  [gen.standard_normal((2, 3, 3, 3)), gen.uniform(0.5, 1.5, 3)])
        gradcheck(lambda a, s: tsum(ops.channel_scale(a, s) * ops.channel_scale(a, s)),
                  [gen.standard_normal((4, 9)), gen.uniform(0.5, 1.5, 3)])


class TestOtherOps:
    def test_relu_example(self):
        out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_maxpool_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = ops.maxpool2d(Tensor(x), kernel=2).data
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_maxpool_requires_divisible(self):
        with pytest.raises(ShapeError):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 3, 3))), kernel=2)

    def test_maxpool_stride_must_equal_kernel(self):
        with pytest.raises(NotImplementedError):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 4, 4))), kernel=2, stride=1)

    def test_avgpool(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = ops.avgpool2d(Tensor(x), kernel=2).data
        np.testing.assert_allclose(out, [[[[2.5]]]])

    def test_uniform_logits_cross_entropy_is_log_k(self):
        for k in (2, 5, 10):
            logits = np.zeros((3, k))
            loss = ops.softmax_cross_entropy(Tensor(logits), np.array([0, 1, k - 1]))
            np.testing.assert_allclose(loss.data, np.log(k), rtol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))

    def test_linear_shapes_and_grad(self):
        gen = np.random.default_rng(4)
        x = gen.standard_normal((3, 5))
        w = gen.standard_normal((4, 5))
        b = gen.standard_normal(4)
        out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, x @ w.T + b, rtol=1e-12)
        gradcheck(lambda a, ww, bb: tsum(ops.linear(a, ww, bb) * ops.linear(a, ww, bb)),
                  [x, w, b])

    def test_pool_and_flatten_gradients(self):
        gen = np.random.default_rng(6)
        x = gen.standard_normal((2, 2, 4, 4))
        gradcheck(lambda a: tsum(ops.maxpool2d(ops.relu(a), 2) *
                                 ops.maxpool2d(ops.relu(a), 2)), [x])
        gradcheck(lambda a: tsum(ops.avgpool2d(a, 2) * ops.avgpool2d(a, 2)), [x])
        gradcheck(lambda a: tsum(ops.flatten(a) * ops.flatten(a)), [x])

    def test_softmax_cross_entropy_gradient(self):
        gen = np.random.default_rng(8)
        logits = gen.standard_normal((4, 6))
        labels = np.array([0, 5, 2, 2])
        gradcheck(lambda a: ops.softmax_cross_entropy(a, labels), [logits])

    def test_maxpool_tie_gradient_is_deterministic(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        tsum(ops.maxpool2d(x, 2) * 1.0).backward()
        np.testing.assert_array_equal(x.grad.ravel(), [1.0, 0.0, 0.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), c=st.integers(1, 4), h=st.integers(3, 8),
       o=st.integers(1, 4), k=st.integers(1, 3), s=st.integers(1, 2),
       p=st.integers(0, 2), data=st.data())
def test_conv_matches_oracle_property(n, c, h, o, k, s, p, data):
    if h + 2 * p < k:
        return
    seed = data.draw(st.integers(0, 2 ** 16))
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((n, c, h, h)).astype(np.float32)
    w = gen.standard_normal((o, c, k, k)).astype(np.float32)
    fast = ops.conv2d(Tensor(x), Tensor(w), stride=s, padding=p).data
    slow = ops.naive_conv2d(x, w, stride=s, padding=p)
    assert np.abs(fast - slow).max() <= 1e-5
