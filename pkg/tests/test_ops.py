import math

import numpy as np
import pytest

from lesionnet import ops
from lesionnet.errors import ShapeError
from lesionnet.ops import RunningStats
from lesionnet.tensor import Tape, Tensor, backward


def naive_conv(x, w, stride, padding, groups):
    n, cin, h, width = x.shape
    cout, cin_g, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, out_h, out_w))
    per_group = cout // groups
    for b in range(n):
        for o in range(cout):
            g = o // per_group
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[b, g * cin_g : (g + 1) * cin_g, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def t64(values):
    return Tensor(np.asarray(values, dtype=np.float64))


# --------------------------------------------------------------------------- conv / dense


def test_conv_of_ones_with_ones_kernel():
    out = ops.conv2d(Tensor.ones((1, 1, 3, 3)), Tensor.ones((1, 1, 3, 3)))

    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_one_by_one_identity_kernel_copies_input(rng):
    x = t64(rng.normal(size=(2, 3, 5, 4)))
    identity = t64(np.eye(3).reshape(3, 3, 1, 1))

    np.testing.assert_array_equal(ops.conv2d(x, identity).data, x.data)


@pytest.mark.parametrize(
    "cin,cout,kernel,stride,padding,groups,size",
    [
        (1, 1, 3, 1, 0, 1, 5),
        (3, 4, 3, 1, 1, 1, 6),
        (3, 2, 3, 2, 1, 1, 7),
        (4, 4, 3, 1, 1, 4, 5),
        (4, 8, 1, 1, 0, 2, 4),
        (6, 3, 2, 2, 0, 3, 6),
        (2, 5, 5, 1, 2, 1, 5),
        (4, 6, 3, 3, 2, 2, 8),
        (8, 8, 3, 2, 1, 8, 9),
        (3, 3, 4, 1, 0, 1, 4),
    ],
)
def test_conv_matches_direct_summation(rng, cin, cout, kernel, stride, padding, groups, size):
    x = rng.normal(size=(2, cin, size, size))
    w = rng.normal(size=(cout, cin // groups, kernel, kernel))

    out = ops.conv2d(t64(x), t64(w), stride, padding, groups)

    np.testing.assert_allclose(out.data, naive_conv(x, w, stride, padding, groups), rtol=1e-10, atol=1e-12)


def test_depthwise_conv_equals_per_channel_convs(rng):
    x = rng.normal(size=(1, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))

    depthwise = ops.conv2d(t64(x), t64(w), padding=1, groups=3).data

    for channel in range(3):
        single = ops.conv2d(t64(x[:, channel : channel + 1]), t64(w[channel : channel + 1]), padding=1).data
        np.testing.assert_allclose(depthwise[:, channel : channel + 1], single, rtol=1e-12)


def test_pointwise_conv_equals_dense_per_pixel(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    w = rng.normal(size=(5, 4, 1, 1))

    conv = ops.conv2d(t64(x), t64(w)).data
    pixels = x.transpose(0, 2, 3, 1).reshape(-1, 4)
    dense = ops.dense(t64(pixels), t64(w[:, :, 0, 0].T), t64(np.zeros(5))).data

    np.testing.assert_allclose(conv, dense.reshape(2, 3, 3, 5).transpose(0, 3, 1, 2), rtol=1e-12)


def test_conv_shape_errors_name_the_mismatch():
    with pytest.raises(ShapeError, match="input channels"):
        ops.conv2d(Tensor.ones((1, 3, 4, 4)), Tensor.ones((2, 2, 3, 3)))
    with pytest.raises(ShapeError, match="groups"):
        ops.conv2d(Tensor.ones((1, 3, 4, 4)), Tensor.ones((4, 1, 3, 3)), groups=2)
    with pytest.raises(ShapeError, match="exceeds"):
        ops.conv2d(Tensor.ones((1, 1, 2, 2)), Tensor.ones((1, 1, 3, 3)))


def test_conv_rejects_mixed_precision():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor.ones((1, 1, 3, 3), "float32"), Tensor.ones((1, 1, 3, 3), "float64"))


def test_dense_example():
    out = ops.dense(t64([[1.0, 2.0]]), t64(2.0 * np.eye(2)), t64([1.0, 1.0]))

    np.testing.assert_array_equal(out.data, [[3.0, 5.0]])


# --------------------------------------------------------------------------- elementwise


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ops.relu(t64([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert ops.sigmoid(t64([0.0])).data[0] == 0.5


def test_sigmoid_is_stable_for_large_inputs():
    values = ops.sigmoid(t64([-1000.0, 1000.0])).data

    assert np.all(np.isfinite(values))
    np.testing.assert_allclose(values, [0.0, 1.0], atol=1e-300)


def test_relu_gradient_at_zero_is_zero():
    tape = Tape()
    x = tape.watch(t64([-1.0, 0.0, 3.0]))

    grads = backward(ops.reduce_sum(ops.relu(x, tape), tape), tape)

    np.testing.assert_array_equal(grads[x].data, [0.0, 0.0, 1.0])


def test_add_and_mul_require_equal_shapes():
    with pytest.raises(ShapeError):
        ops.add(Tensor.ones((2,)), Tensor.ones((3,)))
    with pytest.raises(ShapeError):
        ops.mul(Tensor.ones((2, 2)), Tensor.ones((4,)))


def test_scale_by_channel_vector(rng):
    x = t64(rng.normal(size=(2, 3, 2, 2)))

    out = ops.scale(x, t64([1.0, 0.0, -2.0]))

    np.testing.assert_array_equal(out.data[:, 1], 0.0)
    np.testing.assert_allclose(out.data[:, 2], -2.0 * x.data[:, 2])


def test_elementwise_dispatch_and_unknown_kind():
    np.testing.assert_array_equal(ops.elementwise("add", t64([1.0]), t64([2.0])).data, [3.0])
    with pytest.raises(ValueError):
        ops.elementwise("tanh", t64([1.0]))


# --------------------------------------------------------------------------- pooling


def test_max_pool_picks_the_largest():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])

    assert ops.pool2d(x, "max", 2).item() == 4.0


def test_global_average_pool_of_constant_map():
    x = Tensor(np.full((2, 3, 5, 7), 0.25))

    out = ops.pool2d(x, "global_avg")

    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(out.data, 0.25)


def test_ceil_mode_output_size():
    assert ops.pool_output_size(7, 2, 2, 0, ceil_mode=True) == 4
    assert ops.pool_output_size(7, 2, 2, 0, ceil_mode=False) == 3
    assert ops.pool2d(Tensor.ones((1, 1, 7, 7)), "max", 2, ceil_mode=True).shape == (1, 1, 4, 4)


def test_max_pool_padding_never_wins():
    x = Tensor(np.full((1, 1, 2, 2), -5.0))

    out = ops.pool2d(x, "max", 3, 1, padding=1)

    np.testing.assert_array_equal(out.data, -5.0)


def test_avg_pool_divides_by_in_bounds_count():
    out = ops.pool2d(Tensor.ones((1, 1, 2, 2), "float64"), "avg", 3, 1, padding=1)

    np.testing.assert_allclose(out.data, 1.0)


def test_window_larger_than_input_without_ceil_mode_fails():
    with pytest.raises(ShapeError, match="exceeds"):
        ops.pool2d(Tensor.ones((1, 1, 2, 2)), "max", 3)


def test_unknown_pool_kind():
    with pytest.raises(ValueError):
        ops.pool2d(Tensor.ones((1, 1, 2, 2)), "median")


# --------------------------------------------------------------------------- upsampling


def test_upsample_to_own_size_is_identity(rng):
    x = t64(rng.normal(size=(1, 2, 3, 4)))

    np.testing.assert_array_equal(ops.upsample_nearest(x, (3, 4)).data, x.data)


def test_upsample_single_pixel():
    out = ops.upsample_nearest(t64([[[[7.0]]]]), (2, 2))

    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))


def test_upsample_gradient_counts_copies():
    tape = Tape()
    x = tape.watch(t64(np.arange(4.0).reshape(1, 1, 2, 2)))

    loss = ops.reduce_sum(ops.upsample_nearest(x, (4, 4), tape), tape)

    np.testing.assert_array_equal(backward(loss, tape)[x].data, np.full((1, 1, 2, 2), 4.0))


def test_upsample_non_integer_ratio_covers_every_source_pixel():
    x = t64(np.arange(9.0).reshape(1, 1, 3, 3))

    out = ops.upsample_nearest(x, (7, 5))

    assert out.shape == (1, 1, 7, 5)
    assert set(np.unique(out.data)) == set(range(9))


def test_upsample_cannot_shrink():
    with pytest.raises(ShapeError):
        ops.upsample_nearest(Tensor.ones((1, 1, 4, 4)), (2, 4))


# --------------------------------------------------------------------------- batch norm


def test_batchnorm_infer_with_identity_statistics(rng):
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    running = RunningStats.fresh(3, np.dtype(np.float64))

    out = ops.batchnorm(x, t64(np.ones(3)), t64(np.zeros(3)), running, mode="infer")

    np.testing.assert_allclose(out.data, x.data, rtol=1e-5)


def test_batchnorm_train_matches_beta_and_gamma(rng):
    x = t64(rng.normal(3.0, 10.0, size=(4, 2, 8, 8)))
    gamma = t64([2.0, 0.5])
    beta = t64([1.0, -3.0])

    out = ops.batchnorm(x, gamma, beta, RunningStats.fresh(2, np.dtype(np.float64)), mode="train").data

    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta.data, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma.data**2, atol=1e-5)


def test_batchnorm_updates_running_statistics(rng):
    data = rng.normal(2.0, 3.0, size=(4, 1, 5, 5))
    running = RunningStats.fresh(1, np.dtype(np.float64))

    ops.batchnorm(t64(data), t64([1.0]), t64([0.0]), running, mode="train")

    unbiased = data.var(ddof=1)
    np.testing.assert_allclose(running.mean, [0.1 * data.mean()])
    np.testing.assert_allclose(running.var, [0.9 + 0.1 * unbiased])


def test_batchnorm_infer_leaves_running_statistics_alone(rng):
    running = RunningStats(np.array([0.5]), np.array([2.0]))

    ops.batchnorm(t64(rng.normal(size=(2, 1, 3, 3))), t64([1.0]), t64([0.0]), running, mode="infer")

    np.testing.assert_array_equal(running.mean, [0.5])
    np.testing.assert_array_equal(running.var, [2.0])


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.batchnorm(Tensor.ones((1, 3, 2, 2)), Tensor.ones((2,)), Tensor.zeros((2,)), RunningStats.fresh(2))


# --------------------------------------------------------------------------- loss


def test_cross_entropy_of_equal_logits_is_log_two():
    loss, probs = ops.softmax_cross_entropy(t64([[0.0, 0.0]]), [0])

    assert loss.item() == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(probs.data, [[0.5, 0.5]])


def test_cross_entropy_probabilities_sum_to_one(rng):
    logits = t64(rng.normal(0.0, 50.0, size=(6, 2)))

    loss, probs = ops.softmax_cross_entropy(logits, [0, 1, 0, 1, 1, 0])

    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0)
    assert loss.item() >= 0.0
    assert np.isfinite(loss.item())


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="label 2"):
        ops.softmax_cross_entropy(t64([[0.0, 1.0]]), [2])
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(t64([[0.0, 1.0]]), [0, 1])
