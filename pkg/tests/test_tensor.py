"""Core tensor ops: convolution, pointwise math, BN, dense, softmax, SGD."""

import numpy as np
import pytest

from maneuver import nn
from maneuver.checkpoint import load_tensors, save_tensors
from maneuver.errors import ConfigError, DimensionError, NonFiniteError
from maneuver.nn import BatchNorm, ConvSpec, batch_norm, conv2d, conv2d_grad, conv3d, \
    count_parameters, dense, dropout
from maneuver.optim import Sgd, SgdConfig, sgd_step
from maneuver.tensor import Tensor, cross_entropy, hadamard, relu, sigmoid, softmax, tanh

from oracles import conv2d_loops, conv3d_loops, finite_difference, relative_error


def T(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = T(np.arange(9.0).reshape(1, 3, 3))
    w = T(np.ones((1, 1, 1, 1)))
    spec = ConvSpec(1, 1, (1, 1))
    y = conv2d(x, spec, w)
    np.testing.assert_array_equal(y.data, x.data)


def test_conv2d_ceil_output_size_matches_decoder_geometry():
    spec = ConvSpec(1, 1, (4, 4), stride=(3, 3), padding=(0, 0), rounding="ceil")
    assert spec.out_size(112, 176) == (37, 59)
    rng = np.random.default_rng(0)
    x = T(rng.random((1, 112, 176)))
    w = T(rng.random((1, 1, 4, 4)))
    assert conv2d(x, spec, w).shape == (1, 37, 59)


def test_conv2d_stride2_windows():
    x = T(np.arange(1.0, 17.0).reshape(1, 4, 4))
    w = T(np.ones((1, 1, 2, 2)))
    spec = ConvSpec(1, 1, (2, 2), stride=(2, 2))
    y = conv2d(x, spec, w)
    np.testing.assert_array_equal(y.data.reshape(-1), [14.0, 22.0, 46.0, 54.0])


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(7)
    for _ in range(12):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        kh, kw = int(rng.integers(1, min(4, h) + 1)), int(rng.integers(1, min(4, w) + 1))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
        x = rng.standard_normal((c_in, h, w))
        k = rng.standard_normal((c_out, c_in, kh, kw))
        spec = ConvSpec(c_in, c_out, (kh, kw), stride, padding)
        got = conv2d(T(x), spec, T(k)).data
        np.testing.assert_allclose(got, conv2d_loops(x, k, stride, padding),
                                   rtol=1e-12, atol=1e-12)


def test_conv2d_ceil_mode_zero_fills_partial_windows():
    # 1-d analogue: length 3, kernel 2, stride 2 -> floor gives 1, ceil gives 2
    x = T(np.array([[[1.0, 2.0, 3.0]]]))
    w = T(np.ones((1, 1, 1, 2)))
    floor_spec = ConvSpec(1, 1, (1, 2), stride=(1, 2))
    ceil_spec = ConvSpec(1, 1, (1, 2), stride=(1, 2), rounding="ceil")
    np.testing.assert_array_equal(conv2d(x, floor_spec, w).data, [[[3.0]]])
    np.testing.assert_array_equal(conv2d(x, ceil_spec, w).data, [[[3.0, 3.0]]])


def test_conv2d_shape_errors_name_both_shapes():
    x = T(np.zeros((2, 4, 4)))
    w = T(np.zeros((1, 3, 2, 2)))
    with pytest.raises(DimensionError) as e:
        conv2d(x, ConvSpec(3, 1, (2, 2)), w)
    assert "(2, 4, 4)" in str(e.value)
    with pytest.raises(ConfigError):
        ConvSpec(1, 1, (5, 5)).out_size(3, 3)


def test_conv2d_grad_zero_upstream():
    rng = np.random.default_rng(1)
    x = T(rng.random((2, 5, 5)))
    w = T(rng.random((3, 2, 3, 3)))
    spec = ConvSpec(2, 3, (3, 3))
    gx, gw = conv2d_grad(x, spec, w, np.zeros((3, 3, 3)))
    assert not gx.any() and not gw.any()


def test_conv2d_grad_identity_kernel_passes_upstream_through():
    x = T(np.zeros((1, 4, 4)))
    w = T(np.ones((1, 1, 1, 1)))
    up = np.arange(16.0).reshape(1, 4, 4)
    gx, gw = conv2d_grad(x, ConvSpec(1, 1, (1, 1)), w, up)
    np.testing.assert_array_equal(gx, up)


def test_conv2d_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((2, 2, 3, 3))
    spec = ConvSpec(2, 2, (3, 3), stride=(1, 1), padding=(1, 1))
    proj = rng.standard_normal((1, 2, 5, 5))  # random scalarization

    def forward():
        y = conv2d(T(x[0]), spec, T(k)).data
        return float((proj[0] * y).sum())

    fd_x, fd_k = finite_difference(forward, [x, k])
    gx, gw = conv2d_grad(T(x[0]), spec, T(k), proj[0])
    assert relative_error(gx, fd_x[0]) < 1e-4
    assert relative_error(gw, fd_k) < 1e-4


def test_conv2d_grad_rejects_bad_upstream_shape():
    x = T(np.zeros((1, 4, 4)))
    w = T(np.zeros((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        conv2d_grad(x, ConvSpec(1, 1, (2, 2)), w, np.zeros((1, 4, 4)))


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------


def test_conv3d_identity_and_window_sum():
    x = T(np.ones((1, 2, 2, 2)))
    w = T(np.ones((1, 1, 2, 2, 2)))
    y = conv3d(x, w)
    assert y.shape == (1, 1, 1, 1)
    assert y.data.reshape(()) == pytest.approx(8.0)

    x2 = T(np.arange(8.0).reshape(1, 2, 2, 2))
    eye = T(np.ones((1, 1, 1, 1, 1)))
    np.testing.assert_array_equal(conv3d(x2, eye).data, x2.data)


def test_conv3d_temporal_stride_halves_frames():
    x = T(np.zeros((1, 16, 5, 5)))
    w = T(np.zeros((2, 1, 3, 3, 3)))
    y = conv3d(x, w, stride=(2, 1, 1), padding=(1, 1, 1))
    assert y.shape == (2, 8, 5, 5)


def test_conv3d_matches_loop_reference():
    rng = np.random.default_rng(11)
    for _ in range(6):
        x = rng.standard_normal((2, 4, 5, 5))
        k = rng.standard_normal((3, 2, 2, 3, 3))
        stride = (int(rng.integers(1, 3)),) * 3
        padding = (int(rng.integers(0, 2)),) * 3
        got = conv3d(T(x), T(k), stride, padding).data
        np.testing.assert_allclose(got, conv3d_loops(x, k, stride, padding),
                                   rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------


def test_pointwise_fixed_points():
    z = T(np.zeros((3, 2)))
    np.testing.assert_array_equal(sigmoid(z).data, np.full((3, 2), 0.5))
    np.testing.assert_array_equal(tanh(z).data, np.zeros((3, 2)))
    np.testing.assert_array_equal(relu(T([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_hadamard_values_and_shape_check():
    got = hadamard(T([1.0, 2.0, 3.0]), T([4.0, 5.0, 6.0]))
    np.testing.assert_array_equal(got.data, [4.0, 10.0, 18.0])
    with pytest.raises(DimensionError):
        hadamard(T([1.0, 2.0]), T([1.0, 2.0, 3.0]))


def test_sigmoid_is_finite_for_extreme_inputs():
    y = sigmoid(T([-1e4, 1e4]))
    assert np.isfinite(y.data).all()


def test_nonfinite_inputs_rejected():
    with pytest.raises(NonFiniteError):
        T([np.nan, 1.0])


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def test_batch_norm_train_normalizes_per_channel():
    rng = np.random.default_rng(5)
    bn = BatchNorm(3, feature_ndim=3)
    x = T(rng.standard_normal((3, 6, 7)) * 4 + 2)
    y = batch_norm(x, bn, "train")
    means = y.data.mean(axis=(1, 2))
    stds = y.data.var(axis=(1, 2))
    np.testing.assert_allclose(means, 0.0, atol=1e-6)
    np.testing.assert_allclose(stds, 1.0, atol=1e-3)  # epsilon skews variance slightly


def test_batch_norm_eval_identity_with_unit_stats():
    bn = BatchNorm(2, feature_ndim=3)
    x = T(np.random.default_rng(0).standard_normal((2, 4, 4)))
    y = batch_norm(x, bn, "eval")
    np.testing.assert_allclose(y.data, x.data / np.sqrt(1 + bn.EPS), rtol=1e-12)


def test_batch_norm_constant_channel_maps_to_zero():
    bn = BatchNorm(1, feature_ndim=3)
    x = T(np.full((1, 4, 4), 3.25))
    y = batch_norm(x, bn, "train")
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_batch_norm_running_stats_momentum():
    bn = BatchNorm(1, feature_ndim=1)
    x = T(np.array([10.0]))
    batch_norm(Tensor(np.stack([x.data, x.data])), bn, "train")  # batch of two vectors
    np.testing.assert_allclose(bn.running_mean, [0.9 * 0 + 0.1 * 10.0])


def test_batch_norm_rejects_empty_and_wrong_channels():
    bn = BatchNorm(2, feature_ndim=1)
    with pytest.raises(DimensionError):
        batch_norm(T(np.zeros(3)), bn, "train")


# ---------------------------------------------------------------------------
# dense / softmax / cross entropy
# ---------------------------------------------------------------------------


def test_dense_identity_zero_and_example():
    x = T([1.0, 1.0])
    np.testing.assert_array_equal(
        dense(x, T(np.eye(2)), T(np.zeros(2))).data, x.data)
    np.testing.assert_array_equal(
        dense(x, T([[1.0, 2.0], [3.0, 4.0]]), T(np.zeros(2))).data, [3.0, 7.0])
    b = np.array([5.0, -1.0, 2.0])
    np.testing.assert_array_equal(dense(x, T(np.zeros((3, 2))), T(b)).data, b)
    with pytest.raises(DimensionError):
        dense(x, T(np.zeros((2, 3))), None)


def test_softmax_constant_vector_and_example():
    np.testing.assert_allclose(softmax(T(np.zeros(5))).data, np.full(5, 0.2), rtol=1e-12)
    got = softmax(T([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(got, [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_softmax_sums_to_one_and_shift_invariant():
    rng = np.random.default_rng(13)
    for _ in range(20):
        v = rng.standard_normal(int(rng.integers(2, 9))) * 10
        p = softmax(T(v)).data
        assert abs(p.sum() - 1.0) <= 1e-12
        q = softmax(T(v + 123.456)).data
        np.testing.assert_allclose(p, q, atol=1e-12)


def test_cross_entropy_perfect_prediction_and_range():
    p = T([0.0, 1.0, 0.0])
    # exact one-hot would hit log(0) guards off-label; only the label term counts
    assert cross_entropy(p, 1).item() == pytest.approx(0.0)
    with pytest.raises(DimensionError):
        cross_entropy(T([0.5, 0.5]), 2)


def test_cross_entropy_class_weights():
    p = T([0.25, 0.75])
    unweighted = cross_entropy(p, 0).item()
    weighted = cross_entropy(p, 0, class_weights=[2.0, 1.0]).item()
    assert weighted == pytest.approx(2 * unweighted)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


def test_sgd_plain_step():
    params = {"w": np.array([1.0])}
    state = {}
    sgd_step(params, {"w": np.array([1.0])}, state,
             SgdConfig(learning_rate=0.1), epoch=0)
    np.testing.assert_allclose(params["w"], [0.9])


def test_sgd_momentum_two_steps():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9)
    params = {"w": np.array([0.0])}
    state = {}
    sgd_step(params, {"w": np.array([1.0])}, state, cfg, 0)
    np.testing.assert_allclose(params["w"], [-0.1], rtol=1e-12)
    sgd_step(params, {"w": np.array([1.0])}, state, cfg, 0)
    np.testing.assert_allclose(params["w"], [-0.29], rtol=1e-12)  # second delta -0.19


def test_sgd_schedule_and_weight_decay():
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.001,
                    lr_schedule=[(30, 0.1), (50, 0.1)])
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(29) == pytest.approx(0.1)
    assert cfg.lr_at(30) == pytest.approx(0.01)
    assert cfg.lr_at(50) == pytest.approx(0.001)
    params = {"w": np.array([2.0])}
    sgd_step(params, {"w": np.array([0.0])}, {}, cfg, 0)
    np.testing.assert_allclose(params["w"], [2.0 - 0.1 * 0.001 * 2.0], rtol=1e-12)


def test_sgd_aborts_on_nonfinite_gradient():
    params = {"w": np.array([1.0])}
    with pytest.raises(NonFiniteError, match="w"):
        sgd_step(params, {"w": np.array([np.inf])}, {}, SgdConfig(0.1), 0)
    np.testing.assert_array_equal(params["w"], [1.0])


def test_sgd_monotone_descent_on_quadratic():
    # f(w) = 0.5 * 3 * w^2, curvature 3 -> stable for lr < 2/3
    w = np.array([5.0])
    cfg = SgdConfig(learning_rate=0.5)
    state = {}
    last = 0.5 * 3 * w[0] ** 2
    for _ in range(25):
        sgd_step({"w": w}, {"w": 3 * w}, state, cfg, 0)
        loss = 0.5 * 3 * w[0] ** 2
        assert loss < last or loss == 0.0
        last = loss


def test_bad_configs_rejected():
    with pytest.raises(ConfigError):
        SgdConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        SgdConfig(learning_rate=0.1, lr_schedule=[(10, 0.1), (10, 0.1)])


# ---------------------------------------------------------------------------
# parameter counting, checkpoints
# ---------------------------------------------------------------------------


def test_count_parameters():
    rng = np.random.default_rng(0)
    conv = nn.Conv2d(ConvSpec(1, 1, (3, 3)), rng, with_bias=False)
    assert count_parameters(conv) == 9
    fc = nn.Dense(3072, 2048, rng)
    assert count_parameters(fc) == 3072 * 2048 + 2048 == 6_293_504

    class Empty(nn.Module):
        pass

    assert count_parameters(Empty()) == 0


def test_count_parameters_equals_bruteforce_enumeration():
    rng = np.random.default_rng(42)

    class Net(nn.Module):
        def __init__(self):
            self.a = nn.Conv2d(ConvSpec(3, 8, (3, 3)), rng)
            self.b = nn.BatchNorm(8, feature_ndim=3)
            self.c = nn.Dense(8, 5, rng)

    net = Net()
    brute = sum(p.data.size for _, p in net.named_parameters())
    assert count_parameters(net) == brute
    # running stats are buffers, not trainable parameters
    assert all("running" not in name for name, _ in net.named_parameters())


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    tensors = {
        "layer.weight": rng.standard_normal((4, 3, 2)),
        "layer.bias": rng.standard_normal(4),
        "bn.running_mean": np.zeros(4),
    }
    path = tmp_path / "model.ckpt"
    save_tensors(path, tensors, meta={"epoch": 3})
    loaded, meta = load_tensors(path)
    assert meta == {"epoch": 3}
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_deterministic_bytes(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.ones(2)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_tensors(p1, tensors, meta={"k": 1})
    save_tensors(p2, dict(reversed(list(tensors.items()))), meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# autograd sanity on composite expressions
# ---------------------------------------------------------------------------


def test_backward_through_composite_graph():
    x = T([1.0, -2.0, 3.0], grad=True)
    y = (relu(x) * T([2.0, 2.0, 2.0]) + sigmoid(x)).sum()
    y.backward()
    s = 1 / (1 + np.exp(-x.data))
    expect = np.where(x.data > 0, 2.0, 0.0) + s * (1 - s)
    np.testing.assert_allclose(x.grad, expect, rtol=1e-12)


def test_gradients_accumulate_across_uses():
    x = T([2.0], grad=True)
    y = (x * x).sum()  # same tensor used twice
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0])
